"""Simulated SIMD-ciphertext lowering of CNNs with exact operation metering."""

__version__ = "0.1.0"
