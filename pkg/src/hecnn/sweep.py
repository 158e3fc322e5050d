"""Cost sweeps over matrix shapes for the three matrix-vector kernels.

Each point pairs the closed-form prediction with, optionally, a metered run
of the kernel on a random dense matrix.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import matvec
from .slotvec import CapacityError, MeterContext, encrypt

METHODS = ("hs", "lola-dense", "lola-stacked")
CSV_FIELDS = ("method", "n", "m", "N", "rotations", "multiplications", "mask_multiplications")
MEASURED_FIELDS = ("measured_rotations", "measured_multiplications")


def parse_range(text: str) -> list[int]:
    """``"a,b,c"`` lists values; ``"lo:hi"`` doubles from ``lo`` up to ``hi``."""
    text = text.strip()
    if ":" in text:
        lo, hi = (int(part) for part in text.split(":"))
        if lo < 1 or hi < lo:
            raise ValueError(f"bad range '{text}'")
        values = []
        while lo <= hi:
            values.append(lo)
            lo *= 2
        return values
    values = [int(part) for part in text.split(",") if part.strip()]
    if not values or min(values) < 1:
        raise ValueError(f"bad value list '{text}'")
    return sorted(set(values))


def predict(method: str, m: int, n: int, n_slots: int) -> matvec.MatvecCost:
    if method == "hs":
        return matvec.predict_hs(m, n, n_slots)
    if method == "lola-dense":
        if matvec.next_pow2(n) > n_slots:
            raise CapacityError(f"n={n} does not fit into N={n_slots}")
        return matvec.predict_lola_dense(m, n)
    if method == "lola-stacked":
        if m > n_slots:
            raise CapacityError(f"m={m} outputs do not fit into N={n_slots}")
        return matvec.predict_lola_stacked(m, n, n_slots)
    raise ValueError(f"unknown method '{method}'")


def measure(method: str, m: int, n: int, n_slots: int, seed: int = 0) -> tuple[int, int]:
    """Metered (rotations, plaintext multiplications) of one kernel run."""
    rng = np.random.default_rng([seed, METHODS.index(method), m, n, n_slots])
    A = rng.normal(size=(m, n))
    v = encrypt(rng.normal(size=n), n_slots)
    ctx = MeterContext()
    if method == "hs":
        matvec.hs_matvec(A, v, ctx)
    elif method == "lola-dense":
        matvec.lola_dense_matvec(A, v, ctx)
    else:
        matvec.lola_stacked_matvec(A, v, ctx)
    return ctx.tally.rot, ctx.tally.mul_pc


@dataclass(frozen=True)
class SweepPoint:
    method: str
    n: int
    m: int
    N: int
    cost: matvec.MatvecCost
    measured: tuple | None = None

    def row(self) -> list:
        out = [self.method, self.n, self.m, self.N, self.cost.rotations,
               self.cost.multiplications, self.cost.mask_multiplications]
        if self.measured is not None:
            out += list(self.measured)
        return out


def run_sweep(ns, ms, slot_counts, methods=METHODS, *, do_measure: bool = False,
              seed: int = 0, jobs: int = 1) -> list[SweepPoint]:
    """Every feasible (method, n, m, N) point, sorted by that key."""
    unknown = [method for method in methods if method not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {list(METHODS)}")
    tasks = []
    for method in methods:
        for N in slot_counts:
            for n in ns:
                for m in ms:
                    try:
                        cost = predict(method, m, n, N)
                    except CapacityError:
                        continue  # shape does not fit this slot count
                    tasks.append((method, n, m, N, cost))

    def work(task):
        method, n, m, N, cost = task
        measured = measure(method, m, n, N, seed) if do_measure else None
        return SweepPoint(method, n, m, N, cost, measured)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            points = list(pool.map(work, tasks))
    else:
        points = [work(task) for task in tasks]
    return sorted(points, key=lambda p: (METHODS.index(p.method), p.N, p.n, p.m))


def to_csv(points: list[SweepPoint], with_measured: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS + (MEASURED_FIELDS if with_measured else ()))
    for point in points:
        writer.writerow(point.row())
    return buf.getvalue()
