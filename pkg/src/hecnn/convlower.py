"""Lowering of convolution, pooling, squaring and flattening to slot operations.

Tensors are flattened channel-major, then row, then column.  Convolutions and
pools are valid (unpadded) windows on square inputs with equal strides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .slotvec import (
    CapacityError,
    Kind,
    MeterContext,
    ShapeError,
    SlotVector,
    add,
    add_many,
    encrypt,
    mul,
    rotate_left,
    rotate_right,
)


def conv_out_size(d_in: int, k: int, s: int) -> int:
    if k < 1 or s < 1:
        raise ShapeError(f"kernel and stride must be positive, got k={k}, s={s}")
    if k > d_in:
        raise ShapeError(f"kernel {k} larger than input side {d_in}")
    return (d_in - k) // s + 1


@dataclass(frozen=True)
class ConvShape:
    d_in: int
    c_in: int
    c_out: int
    kernel_k: int
    stride: int = 1

    @property
    def d_out(self) -> int:
        return conv_out_size(self.d_in, self.kernel_k, self.stride)

    @property
    def n_taps(self) -> int:
        return self.kernel_k * self.kernel_k * self.c_in

    @property
    def in_size(self) -> int:
        return self.c_in * self.d_in * self.d_in

    @property
    def out_size(self) -> int:
        return self.c_out * self.d_out * self.d_out


@dataclass(frozen=True)
class FilterBank:
    weights: np.ndarray  # (c_out, c_in, k, k)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64).ravel()
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"filter weights must be (c_out, c_in, k, k), got {w.shape}")
        if b.size != w.shape[0]:
            raise ShapeError(f"expected {w.shape[0]} biases, got {b.size}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    def check(self, shape: ConvShape):
        expected = (shape.c_out, shape.c_in, shape.kernel_k, shape.kernel_k)
        if self.weights.shape != expected:
            raise ShapeError(f"filter bank {self.weights.shape} does not match {expected}")


@dataclass(frozen=True)
class ConvPackedInput:
    vectors: tuple  # k*k*c_in ciphertexts, tap order (z, x, y)
    shape: ConvShape


def _tap_indices(shape: ConvShape):
    """Flat input index for each (tap, output position), taps ordered (z, x, y)."""
    k, s, d_in, d_out = shape.kernel_k, shape.stride, shape.d_in, shape.d_out
    z, x, y = np.meshgrid(np.arange(shape.c_in), np.arange(k), np.arange(k), indexing="ij")
    oy, ox = np.meshgrid(np.arange(d_out), np.arange(d_out), indexing="ij")
    rows = oy.ravel()[None, :] * s + x.ravel()[:, None]
    cols = ox.ravel()[None, :] * s + y.ravel()[:, None]
    return z.ravel()[:, None] * d_in * d_in + rows * d_in + cols


def conv_pack(image, shape: ConvShape, n_slots: int) -> ConvPackedInput:
    """Client-side packing: vector ``i`` holds every pixel that meets filter tap ``i``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (shape.c_in, shape.d_in, shape.d_in):
        raise ShapeError(f"image shape {image.shape} != {(shape.c_in, shape.d_in, shape.d_in)}")
    if shape.d_out ** 2 > n_slots:
        raise CapacityError(f"d_out^2={shape.d_out ** 2} > N={n_slots}")
    flat = image.ravel()
    vectors = tuple(encrypt(flat[idx], n_slots) for idx in _tap_indices(shape))
    return ConvPackedInput(vectors, shape)


def _scalar_plaintext(value: float, width: int, n_slots: int) -> SlotVector:
    slots = np.zeros(n_slots)
    slots[:width] = value
    return SlotVector(slots, Kind.PLAINTEXT)


def conv_packed_forward(packed: ConvPackedInput, filters: FilterBank,
                        ctx: MeterContext | None = None) -> list[SlotVector]:
    """One output map per filter: ``sum_i g[i] * ct_i + bias``.

    Scalars and the bias are encoded only over the ``d_out**2`` used slots, so
    the outputs are zero elsewhere.
    """
    shape = packed.shape
    filters.check(shape)
    width = shape.d_out ** 2
    N = packed.vectors[0].n_slots
    taps = filters.weights.reshape(shape.c_out, -1)
    maps = []
    for j in range(shape.c_out):
        terms = [mul(ct, _scalar_plaintext(g, width, N), ctx) for ct, g in zip(packed.vectors, taps[j])]
        acc = add_many(terms, ctx)
        maps.append(add(acc, _scalar_plaintext(filters.bias[j], width, N), ctx))
    return maps


def pointwise_packed_forward(blocks: list[SlotVector], channels_per_block: list[int], width: int,
                             filters: FilterBank, ctx: MeterContext | None = None) -> list[SlotVector]:
    """1x1 convolution on channel-contiguous ciphertexts.

    Each input channel is rotated to slot 0 (free for the first channel of each
    block) and then treated like a packed first-layer tap; the masked scalar
    plaintexts discard whatever the rotation brought into the other slots.
    """
    w = filters.weights
    if w.shape[2:] != (1, 1):
        raise ShapeError(f"packed intermediate convolution supports 1x1 kernels only, got {w.shape[2:]}")
    if sum(channels_per_block) != w.shape[1]:
        raise ShapeError(f"filters expect {w.shape[1]} channels, input has {sum(channels_per_block)}")
    channels = []
    for ct, count in zip(blocks, channels_per_block):
        if count * width > ct.n_slots:
            raise CapacityError(f"{count} channels of {width} slots exceed N={ct.n_slots}")
        channels.extend(rotate_left(ct, c * width, ctx) for c in range(count))
    N = blocks[0].n_slots
    maps = []
    for j in range(w.shape[0]):
        terms = [mul(ch, _scalar_plaintext(g, width, N), ctx) for ch, g in zip(channels, w[j, :, 0, 0])]
        maps.append(add(add_many(terms, ctx), _scalar_plaintext(filters.bias[j], width, N), ctx))
    return maps


def conv_to_matrix(shape: ConvShape, filters: FilterBank) -> tuple[sp.csr_array, np.ndarray]:
    """Sparse ``A`` (``c_out*d_out^2`` x ``c_in*d_in^2``) and bias with ``A @ flat(x) + b == flat(conv(x))``."""
    filters.check(shape)
    idx = _tap_indices(shape)  # (taps, positions)
    width = shape.d_out ** 2
    taps = filters.weights.reshape(shape.c_out, -1)
    rows = (np.arange(shape.c_out)[:, None, None] * width + np.arange(width)[None, None, :])
    rows = np.broadcast_to(rows, (shape.c_out, shape.n_taps, width))
    cols = np.broadcast_to(idx[None], rows.shape)
    vals = np.broadcast_to(taps[:, :, None], rows.shape)
    A = sp.coo_array((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(shape.out_size, shape.in_size))
    return A.tocsr(), np.repeat(filters.bias, width)


def pool_to_matrix(channels: int, d_in: int, k: int, s: int) -> sp.csr_array:
    """Average pooling as a sparse matrix with ``1/k^2`` in every window position."""
    eye = np.eye(channels).reshape(channels, channels, 1, 1) * np.ones((1, 1, k, k)) / (k * k)
    A, _ = conv_to_matrix(ConvShape(d_in, channels, channels, k, s), FilterBank(eye, np.zeros(channels)))
    A.eliminate_zeros()
    return A


def square_layer(v: SlotVector, ctx: MeterContext | None = None) -> SlotVector:
    return mul(v, v, ctx)


def merge_maps(maps: list[SlotVector], width: int, ctx: MeterContext | None = None) -> SlotVector:
    """Concatenate ``c`` maps of ``width`` slots: map ``j`` is rotated right by ``j*width``."""
    if not maps:
        raise ValueError("no maps to merge")
    N = maps[0].n_slots
    if len(maps) * width > N:
        raise CapacityError(f"{len(maps)} maps of {width} slots exceed N={N}")
    acc = maps[0]
    for j, ct in enumerate(maps[1:], start=1):
        acc = add(acc, rotate_right(ct, j * width, ctx), ctx)
    return acc
