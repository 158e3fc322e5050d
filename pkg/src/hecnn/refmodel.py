"""Plaintext reference CNN used as the ground truth for every encrypted path.

Deliberately naive: convolutions and pools accumulate one filter tap at a
time in a fixed order, independent of the matrix construction in
:mod:`hecnn.convlower`.
"""

from __future__ import annotations

import numpy as np

from .convlower import FilterBank, conv_out_size
from .modelspec import LayerKind, ModelSpec, Weights, check_weights, filter_bank
from .slotvec import ShapeError


def _as_tensor3(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ShapeError(f"expected a (c, d, d) tensor, got shape {x.shape}")
    return x


def ref_conv(x, filters: FilterBank, stride: int = 1) -> np.ndarray:
    x = _as_tensor3(x)
    c_out, c_in, k, _ = filters.weights.shape
    if x.shape[0] != c_in:
        raise ShapeError(f"input has {x.shape[0]} channels, filters expect {c_in}")
    d_out = conv_out_size(x.shape[1], k, stride)
    span = stride * (d_out - 1) + 1
    out = np.zeros((c_out, d_out, d_out)) + filters.bias[:, None, None]
    for z in range(c_in):
        for dy in range(k):
            for dx in range(k):
                patch = x[z, dy:dy + span:stride, dx:dx + span:stride]
                out += filters.weights[:, z, dy, dx][:, None, None] * patch[None]
    return out


def ref_avgpool(x, k: int, s: int) -> np.ndarray:
    x = _as_tensor3(x)
    d_out = conv_out_size(x.shape[1], k, s)
    span = s * (d_out - 1) + 1
    out = np.zeros((x.shape[0], d_out, d_out))
    for dy in range(k):
        for dx in range(k):
            out += x[:, dy:dy + span:s, dx:dx + span:s]
    return out / (k * k)


def ref_square(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * x


def ref_dense(v, W, b) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != v.size:
        raise ShapeError(f"dense layer expects {W.shape[1]} inputs, got {v.size}")
    return W @ v + np.asarray(b, dtype=np.float64)


def ref_forward(model: ModelSpec, weights: Weights, x) -> np.ndarray:
    """Apply every layer in order (no fusion); returns the flattened output."""
    check_weights(model, weights)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape} != model input {model.input_shape}")
    for layer in model.layers:
        kind = layer.kind
        if kind.is_conv:
            x = ref_conv(x, filter_bank(layer, weights), layer.s)
        elif kind is LayerKind.AVGPOOL:
            x = ref_avgpool(x, layer.k, layer.s)
        elif kind is LayerKind.SQUARE:
            x = ref_square(x)
        elif kind is LayerKind.FLATTEN:
            x = x.ravel()
        elif kind is LayerKind.DENSE:
            x = ref_dense(x, *weights[layer.label])
    return x.ravel()
