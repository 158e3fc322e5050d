"""Encrypted matrix-vector products over simulated ciphertext slots.

Three kernels are provided, each paired with a closed-form cost predictor:

* :func:`hs_matvec`, the generalized-diagonal method with zero-row padding
  when the slot count is too small for the unpadded fold;
* :func:`lola_dense_matvec`, one multiplication and one rotate-and-sum per row;
* :func:`lola_stacked_matvec`, several copies of the input per ciphertext so
  that several rows share one multiplication.

The weight matrix is always plaintext (server-side model); only operations
touching the ciphertext operand are metered.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .slotvec import (
    CapacityError,
    Kind,
    MeterContext,
    ShapeError,
    SlotVector,
    add,
    ceil_log2,
    encode,
    is_power_of_two,
    mul,
    rotate_left,
    rotate_right,
)


class LayoutError(ValueError):
    """Raised when a ciphertext does not have the layout a kernel needs."""


class VectorLayout(enum.Enum):
    DENSE = "dense"
    SPARSE = "sparse"
    STACKED = "stacked"
    INTERLEAVED = "interleaved"


# Alternative quoted counts for the m=64, n=4096, N=16384 fully-connected
# example.  They disagree with the closed forms below and are kept for reporting.
QUOTED_FC_COUNTS = {
    "m": 64,
    "n": 4096,
    "n_slots": 16384,
    "hs_rotations": 77,
    "lola_dense_rotations": 768,
    "lola_stacked_rotations": 1023,
    "lola_stacked_multiplications": 64,
}


def as_matrix(A) -> np.ndarray:
    if hasattr(A, "toarray"):
        A = A.toarray()
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    return A


def next_pow2(n: int) -> int:
    return 1 << ceil_log2(n)


def _check_slots(n_slots: int):
    if not is_power_of_two(n_slots):
        raise ShapeError(f"slot count must be a power of two, got {n_slots}")


# --------------------------------------------------------------------------
# Halevi-Shoup with padding


def hs_plan(m: int, n: int, n_slots: int) -> tuple[int, int, bool]:
    """Return ``(m_eff, fold_steps, padded)`` for an ``m x n`` product.

    The unpadded schedule folds blocks of ``m`` slots with power-of-two
    strides, so it is only wrap-free when ``m * 2**fold_steps <= N``.  That
    implies ``N >= m + n - 1`` but is stricter whenever ``m`` does not divide
    ``N``.  Otherwise ``m`` is rounded up to a power of two, which divides
    ``N`` and makes every wrap-around land on the right residue class.
    """
    _check_slots(n_slots)
    if m < 1 or n < 1:
        raise ShapeError(f"matrix dimensions must be positive, got {m}x{n}")
    if m > n_slots or n > n_slots:
        raise CapacityError(f"{m}x{n} matrix does not fit into N={n_slots} slots (need m <= N and n <= N)")
    steps = ceil_log2(-(-(m + n - 1) // m))
    if m * (1 << steps) <= n_slots:
        return m, steps, False
    m_pad = next_pow2(m)
    return m_pad, ceil_log2(n_slots // m_pad), True


@dataclass(frozen=True)
class GeneralizedDiagonals:
    """Diagonals ``mask_i[j] = A[(i + j) mod m_eff, j]`` (``j < n``) of a padded matrix."""

    m: int
    n: int
    m_eff: int
    n_slots: int
    values: np.ndarray  # (m_eff, n)
    padded: bool = False  # fold spans all N slots (m may already be a power of two)

    def mask(self, i: int) -> SlotVector:
        slots = np.zeros(self.n_slots)
        slots[: self.n] = self.values[i]
        return SlotVector(slots, Kind.PLAINTEXT)

    @property
    def masks(self) -> list[SlotVector]:
        return [self.mask(i) for i in range(self.m_eff)]

    def structural_count(self) -> int:
        """Number of ``(i, j)`` positions that refer to a real (non-pad) row."""
        rows = (np.arange(self.m_eff)[:, None] + np.arange(self.n)[None, :]) % self.m_eff
        return int((rows < self.m).sum())


def extract_diagonals(A, n_slots: int) -> GeneralizedDiagonals:
    A = as_matrix(A)
    m, n = A.shape
    m_eff, _, padded = hs_plan(m, n, n_slots)
    if m_eff > m:
        A = np.vstack([A, np.zeros((m_eff - m, n))])
    # values[i, j] = A[(i + j) % m_eff, j]: row j of A.T rotated left by j.
    # Per chunk of m_eff columns this is a skewed view of [A.T | A.T].
    values = np.empty((m_eff, n))
    for lo in range(0, n, m_eff):
        chunk = A[:, lo:lo + m_eff].T
        doubled = np.ascontiguousarray(np.hstack([chunk, chunk]))
        row, col = doubled.strides
        skewed = np.lib.stride_tricks.as_strided(doubled, shape=(chunk.shape[0], m_eff), strides=(row + col, col))
        values[:, lo:lo + m_eff] = skewed.T
    return GeneralizedDiagonals(m, n, m_eff, n_slots, values, padded)


def rotate_and_sum(v: SlotVector, span: int, block: int, ctx: MeterContext | None = None) -> SlotVector:
    """Fold residue classes mod ``block`` of slots ``< span`` into slots ``0..block-1``.

    Uses ``ceil(log2(ceil(span / block)))`` left rotations by ``block * 2**t``.
    Slots between ``span`` and the padded span are expected to be zero.
    """
    N = v.n_slots
    if block < 1 or block > N:
        raise ValueError(f"block {block} outside [1, {N}]")
    if span < block:
        raise ValueError(f"span {span} smaller than block {block}")
    steps = ceil_log2(-(-span // block))
    if block * (1 << steps) > N:
        raise CapacityError(f"fold of span {span} by block {block} wraps around N={N}")
    for t in reversed(range(steps)):
        v = add(v, rotate_left(v, block << t, ctx), ctx)
    return v


def hs_matvec(A, v: SlotVector, ctx: MeterContext | None = None, *, skip_zero: bool = True,
              layout: VectorLayout = VectorLayout.DENSE) -> SlotVector:
    """Generalized-diagonal product; result row ``r`` lands in slot ``r``.

    ``v`` must hold the ``n`` input values in slots ``0..n-1``; anything in
    higher slots is ignored because every diagonal mask is zero there.  With
    ``skip_zero`` all-zero diagonals cost nothing.
    """
    if layout is not VectorLayout.DENSE:
        raise LayoutError(f"hs_matvec needs a dense input, got {layout.value}")
    if not v.is_ciphertext:
        raise LayoutError("hs_matvec expects a ciphertext operand")
    diag = extract_diagonals(A, v.n_slots)
    _, steps, _ = hs_plan(diag.m, diag.n, v.n_slots)

    acc = None
    for i in range(diag.m_eff):
        row = diag.values[i]
        if skip_zero and not row.any():
            continue
        t = rotate_right(mul(v, diag.mask(i), ctx), i, ctx)
        acc = t if acc is None else add(acc, t, ctx)
    if acc is None:
        return mul(v, encode([], v.n_slots), ctx)
    span = v.n_slots if diag.padded else diag.m + diag.n - 1
    return rotate_and_sum(acc, span, diag.m_eff, ctx)


@dataclass(frozen=True)
class MatvecCost:
    rotations: int
    multiplications: int
    additions: int = 0
    # plaintext masks needed to merge partial outputs cleanly
    mask_multiplications: int = 0

    @property
    def total_multiplications(self) -> int:
        return self.multiplications + self.mask_multiplications


def predict_hs(m: int, n: int, n_slots: int) -> MatvecCost:
    """Upper bound on a dense-weight :func:`hs_matvec` (exact when no diagonal is zero)."""
    m_eff, steps, _ = hs_plan(m, n, n_slots)
    return MatvecCost(rotations=m_eff - 1 + steps, multiplications=m_eff, additions=m_eff - 1 + steps)


# --------------------------------------------------------------------------
# LoLa-style row-major kernels


def lola_dense_matvec(A, v: SlotVector, ctx: MeterContext | None = None) -> list[SlotVector]:
    """One multiply and one rotate-and-sum per row; output ``i`` holds row ``i`` in slot 0."""
    A = as_matrix(A)
    m, n = A.shape
    N = v.n_slots
    if next_pow2(n) > N:
        raise CapacityError(f"input length n={n} needs {next_pow2(n)} slots, have N={N}")
    out = []
    for i in range(m):
        prod = mul(v, encode(A[i], N), ctx)
        out.append(rotate_and_sum(prod, n, 1, ctx))
    return out


def predict_lola_dense(m: int, n: int) -> MatvecCost:
    steps = ceil_log2(n)
    return MatvecCost(rotations=m * steps, multiplications=m, additions=m * steps)


def stacking_factor(n: int, n_slots: int, width: int | None = None) -> tuple[int, int]:
    """``(delta, k)``: per-copy width (next power of two of ``n``) and copies per ciphertext."""
    delta = next_pow2(n) if width is None else width
    if not is_power_of_two(delta) or delta < n:
        raise ShapeError(f"stacking width {delta} must be a power of two >= n={n}")
    if delta > n_slots:
        raise CapacityError(f"stacking width {delta} exceeds N={n_slots}")
    return delta, n_slots // delta


def stacked_permutation(m: int, n: int, n_slots: int, width: int | None = None) -> np.ndarray:
    """Slot holding each product entry after :func:`lola_stacked_matvec`."""
    delta, k = stacking_factor(n, n_slots, width)
    i = np.arange(m)
    return (i % k) * delta + i // k


def lola_stacked_matvec(A, v: SlotVector, ctx: MeterContext | None = None, *,
                        width: int | None = None) -> tuple[SlotVector, np.ndarray]:
    """Stacked-vector row-major product.

    Row ``i = q*k + b`` is computed in batch ``q`` at block ``b`` and ends up in
    slot ``b*delta + q``.  Each batch re-stacks the input (``k - 1`` rotations),
    multiplies once, and folds ``ceil(log2 n)`` times; batch outputs are masked
    to their block heads before being shifted into place and merged.

    Returns the merged ciphertext and the row-to-slot permutation.
    """
    A = as_matrix(A)
    m, n = A.shape
    N = v.n_slots
    delta, k = stacking_factor(n, N, width)
    if m > N:
        raise CapacityError(f"m={m} outputs do not fit into N={N} slots")
    batches = -(-m // k)
    fold_steps = ceil_log2(delta)

    merged = None
    for q in range(batches):
        stacked = v
        for b in range(1, k):
            stacked = add(stacked, rotate_right(v, b * delta, ctx), ctx)
        rows = np.zeros(N)
        head = np.zeros(N)
        for b in range(k):
            i = q * k + b
            if i < m:
                rows[b * delta: b * delta + n] = A[i]
                head[b * delta] = 1.0
        part = mul(stacked, SlotVector(rows, Kind.PLAINTEXT), ctx)
        for t in reversed(range(fold_steps)):
            part = add(part, rotate_left(part, 1 << t, ctx), ctx)
        if batches > 1:
            part = mul(part, SlotVector(head, Kind.PLAINTEXT), ctx)
        part = rotate_right(part, q, ctx)
        merged = part if merged is None else add(merged, part, ctx)
    return merged, stacked_permutation(m, n, N, width)


def predict_lola_stacked(m: int, n: int, n_slots: int) -> MatvecCost:
    delta, k = stacking_factor(n, n_slots)
    batches = -(-m // k)
    steps = ceil_log2(n)
    per_batch = k + steps - 1
    return MatvecCost(
        rotations=batches * per_batch + batches - 1,
        multiplications=batches,
        additions=batches * per_batch + batches - 1,
        mask_multiplications=batches if batches > 1 else 0,
    )


# --------------------------------------------------------------------------
# layout conversions


def gather_sparse(outputs: list[SlotVector], ctx: MeterContext | None = None) -> SlotVector:
    """Collect slot 0 of each ciphertext into one dense ciphertext.

    Costs one mask multiplication per input, ``len - 1`` rotations and
    ``len - 1`` additions.
    """
    if not outputs:
        raise ValueError("nothing to gather")
    N = outputs[0].n_slots
    if len(outputs) > N:
        raise CapacityError(f"{len(outputs)} values do not fit into N={N} slots")
    e0 = encode([1.0], N)
    acc = None
    for i, ct in enumerate(outputs):
        t = rotate_right(mul(ct, e0, ctx), i, ctx)
        acc = t if acc is None else add(acc, t, ctx)
    return acc


def compact(v: SlotVector, positions, ctx: MeterContext | None = None) -> SlotVector:
    """Move the value at slot ``positions[i]`` to slot ``i`` for every ``i``.

    Entries sharing the same shift are moved together with one mask
    multiplication and one rotation.
    """
    positions = np.asarray(positions, dtype=np.int64)
    N = v.n_slots
    if positions.size > N:
        raise CapacityError(f"{positions.size} values do not fit into N={N} slots")
    shifts = (np.arange(positions.size) - positions) % N
    acc = None
    for s in np.unique(shifts):
        mask = np.zeros(N)
        mask[positions[shifts == s]] = 1.0
        t = rotate_right(mul(v, SlotVector(mask, Kind.PLAINTEXT), ctx), int(s), ctx)
        acc = t if acc is None else add(acc, t, ctx)
    return acc
