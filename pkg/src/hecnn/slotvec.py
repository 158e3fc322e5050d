"""Plaintext simulator for SIMD ciphertext slots with exact operation metering.

A :class:`SlotVector` stands in for one ciphertext (or one encoded plaintext)
holding ``n_slots`` real lanes.  Every homomorphic operation goes through the
module-level functions below, which record the operation class in a
:class:`MeterContext`.  No noise, modulus or level is modelled.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np


class CapacityError(ValueError):
    """Raised when data does not fit into the available slots."""


class ShapeError(ValueError):
    """Raised on mismatched slot counts or tensor shapes."""


class Kind(enum.Enum):
    CIPHERTEXT = "ct"
    PLAINTEXT = "pt"


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def ceil_log2(x: int) -> int:
    """Smallest ``b`` with ``2**b >= x`` (``x >= 1``)."""
    if x < 1:
        raise ValueError(f"ceil_log2 needs x >= 1, got {x}")
    return (int(x) - 1).bit_length()


@dataclass(frozen=True)
class SlotVector:
    slots: np.ndarray
    kind: Kind = Kind.CIPHERTEXT

    def __post_init__(self):
        arr = np.asarray(self.slots, dtype=np.float64)
        if arr.ndim != 1:
            raise ShapeError("slots must be one-dimensional")
        if not is_power_of_two(arr.size):
            raise ShapeError(f"slot count must be a power of two, got {arr.size}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "slots", arr)

    @property
    def n_slots(self) -> int:
        return self.slots.size

    @property
    def is_ciphertext(self) -> bool:
        return self.kind is Kind.CIPHERTEXT

    def __len__(self):
        return self.n_slots

    def __repr__(self):
        head = np.array2string(self.slots[:8], precision=4, separator=", ")
        more = ", ..." if self.n_slots > 8 else ""
        return f"SlotVector({self.kind.value}, N={self.n_slots}, {head[:-1]}{more}])"


@dataclass
class OpTally:
    add_pc: int = 0
    add_cc: int = 0
    mul_pc: int = 0
    mul_cc: int = 0
    rot: int = 0

    def total(self) -> int:
        return self.add_pc + self.add_cc + self.mul_pc + self.mul_cc + self.rot

    def as_tuple(self) -> tuple[int, int, int, int, int, int]:
        """``(total, add_pc, add_cc, mul_pc, mul_cc, rot)``, the report column order."""
        return (self.total(), self.add_pc, self.add_cc, self.mul_pc, self.mul_cc, self.rot)

    def __add__(self, other: "OpTally") -> "OpTally":
        return OpTally(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def __sub__(self, other: "OpTally") -> "OpTally":
        return OpTally(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    def copy(self) -> "OpTally":
        return OpTally(**{f.name: getattr(self, f.name) for f in fields(self)})


UNLABELLED = "(unlabelled)"


@dataclass
class MeterContext:
    """Operation counters for one execution.

    Operations are attributed to the label set with :meth:`stage`; anything
    outside a stage lands under ``"(unlabelled)"`` so that the per-stage rows
    always add up to ``tally``.  A context must not be shared between threads.
    """

    tally: OpTally = field(default_factory=OpTally)
    per_layer: "OrderedDict[str, OpTally]" = field(default_factory=OrderedDict)
    _current: str = UNLABELLED

    @contextmanager
    def stage(self, label: str):
        previous = self._current
        self._current = label
        self.per_layer.setdefault(label, OpTally())
        try:
            yield self
        finally:
            self._current = previous

    def record(self, op: str, count: int = 1):
        if count == 0:
            return
        setattr(self.tally, op, getattr(self.tally, op) + count)
        row = self.per_layer.setdefault(self._current, OpTally())
        setattr(row, op, getattr(row, op) + count)

    def snapshot(self) -> OpTally:
        return self.tally.copy()


def _check_same_width(a: SlotVector, b: SlotVector):
    if a.n_slots != b.n_slots:
        raise ShapeError(f"slot count mismatch: {a.n_slots} vs {b.n_slots}")


def _meter_binary(a: SlotVector, b: SlotVector, ctx: MeterContext | None, base: str) -> Kind:
    n_ct = a.is_ciphertext + b.is_ciphertext
    if ctx is not None and n_ct:
        ctx.record(f"{base}_cc" if n_ct == 2 else f"{base}_pc")
    return Kind.CIPHERTEXT if n_ct else Kind.PLAINTEXT


def rotate_right(v: SlotVector, r: int, ctx: MeterContext | None = None) -> SlotVector:
    """Cyclic shift so that output slot ``j`` holds ``v[(j - r) mod N]``.

    ``r`` is taken mod ``N``; a net rotation of zero is free.  Plaintext
    rotations are never metered since plaintexts are prepared at encode time.
    """
    r = int(r) % v.n_slots
    if r == 0:
        return v
    if ctx is not None and v.is_ciphertext:
        ctx.record("rot")
    return SlotVector(np.roll(v.slots, r), v.kind)


def rotate_left(v: SlotVector, r: int, ctx: MeterContext | None = None) -> SlotVector:
    return rotate_right(v, -int(r), ctx)


def add(a: SlotVector, b: SlotVector, ctx: MeterContext | None = None) -> SlotVector:
    _check_same_width(a, b)
    kind = _meter_binary(a, b, ctx, "add")
    return SlotVector(a.slots + b.slots, kind)


def mul(a: SlotVector, b: SlotVector, ctx: MeterContext | None = None) -> SlotVector:
    _check_same_width(a, b)
    kind = _meter_binary(a, b, ctx, "mul")
    return SlotVector(a.slots * b.slots, kind)


def pack(values, n_slots: int, kind: Kind = Kind.CIPHERTEXT) -> SlotVector:
    """Place ``values`` in slots ``0..len-1`` and zero-fill the rest (unmetered)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if not is_power_of_two(n_slots):
        raise ShapeError(f"slot count must be a power of two, got {n_slots}")
    if values.size > n_slots:
        raise CapacityError(f"{values.size} values do not fit into {n_slots} slots")
    slots = np.zeros(n_slots)
    slots[: values.size] = values
    return SlotVector(slots, kind)


def encrypt(values, n_slots: int) -> SlotVector:
    return pack(values, n_slots, Kind.CIPHERTEXT)


def encode(values, n_slots: int) -> SlotVector:
    return pack(values, n_slots, Kind.PLAINTEXT)


def add_many(vectors, ctx: MeterContext | None = None) -> SlotVector:
    """Left-fold summation; ``k`` ciphertexts cost ``k - 1`` additions."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("add_many needs at least one vector")
    acc = vectors[0]
    for v in vectors[1:]:
        acc = add(acc, v, ctx)
    return acc
