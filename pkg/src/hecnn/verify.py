"""Randomized equivalence suites: kernels against ``A @ v``, fused against
unfused execution, and encrypted inference against the plaintext reference.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import matvec
from .modelspec import (
    LayerKind,
    LayerSpec,
    ModelSpec,
    Policy,
    builtin_models,
    random_input,
    random_weights,
)
from .netcompile import execute, lower
from .refmodel import ref_forward
from .slotvec import encrypt

KERNEL_TOL = 1e-9
FUSION_TOL = 1e-9
END_TO_END_TOL = 1e-7
KERNEL_SLOTS = (64, 128, 256)


def relative_error(got, want) -> float:
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    if got.shape != want.shape:
        return float("inf")
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - want)) / max(1.0, float(np.max(np.abs(want)))))


def kernel_outputs(A, x, n_slots: int) -> dict[str, np.ndarray]:
    """Decoded result of every kernel at its documented output slots."""
    A = np.asarray(A, dtype=np.float64)
    m = A.shape[0]
    v = encrypt(x, n_slots)
    out = {"hs": matvec.hs_matvec(A, v).slots[:m]}
    out["lola-dense"] = np.array([ct.slots[0] for ct in matvec.lola_dense_matvec(A, v)])
    ct, perm = matvec.lola_stacked_matvec(A, v)
    out["lola-stacked"] = ct.slots[perm]
    return out


def random_case(rng: np.random.Generator, max_dim: int = 64, slots=KERNEL_SLOTS):
    m = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(1, max_dim + 1))
    N = int(rng.choice(slots))
    A = rng.normal(size=(m, n))
    if rng.random() < 0.3:
        A[rng.random(size=A.shape) < 0.7] = 0.0  # exercise zero-diagonal skipping
    return A, rng.normal(size=n), N


def random_model(rng: np.random.Generator, n_slots: int = 1024) -> ModelSpec:
    """A small legal model: packed conv, square, a few linear layers, dense head."""
    c, d = int(rng.integers(1, 3)), int(rng.integers(5, 10))
    k, s = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    layers = [LayerSpec(LayerKind.CONV, "Conv1", k=k, s=s, out_channels=int(rng.integers(1, 4))),
              LayerSpec(LayerKind.SQUARE, "Square1")]
    side = (d - k) // s + 1
    policies = [None, Policy.HS, Policy.LOLA_DENSE, Policy.LOLA_STACKED]
    for i in range(int(rng.integers(0, 3))):
        if side >= 2 and rng.random() < 0.5:
            layers.append(LayerSpec(LayerKind.AVGPOOL, f"Pool{i + 1}", k=2, s=1))
            side -= 1
        else:
            kk = int(rng.integers(1, min(side, 2) + 1))
            layers.append(LayerSpec(LayerKind.CONV, f"Conv{i + 2}", k=kk, s=1,
                                    out_channels=int(rng.integers(1, 4))))
            side -= kk - 1
        if rng.random() < 0.3:
            layers.append(LayerSpec(LayerKind.SQUARE, f"Square{i + 2}"))
    layers.append(LayerSpec(LayerKind.FLATTEN, "Flatten"))
    layers.append(LayerSpec(LayerKind.DENSE, "Dense1", units=int(rng.integers(2, 7))))
    if rng.random() < 0.5:
        layers.append(LayerSpec(LayerKind.SQUARE, "SquareOut"))
        layers.append(LayerSpec(LayerKind.DENSE, "Dense2", units=int(rng.integers(2, 5)),
                                policy=policies[int(rng.integers(len(policies)))]))
    return ModelSpec("random", (c, d, d), n_slots, layers)


@dataclass
class SuiteResult:
    name: str
    cases: int = 0
    max_error: float = 0.0
    tolerance: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, error: float, what: str):
        self.cases += 1
        self.max_error = max(self.max_error, error)
        if not error <= self.tolerance:
            self.failures.append(f"{what}: error {error:.3e}")

    def summary(self) -> str:
        status = "ok" if self.passed else f"FAILED ({len(self.failures)})"
        return f"{self.name:<12} cases={self.cases:<5} max_error={self.max_error:.3e} tol={self.tolerance:.0e} {status}"


def kernel_suite(seed: int, cases: int) -> SuiteResult:
    result = SuiteResult("kernels", tolerance=KERNEL_TOL)
    rng = np.random.default_rng([seed, 1])
    for case in range(cases):
        A, x, N = random_case(rng)
        want = A @ x
        for name, got in kernel_outputs(A, x, N).items():
            result.record(relative_error(got, want), f"case {case} {name} {A.shape} N={N}")
    return result


def fusion_suite(seed: int, cases: int) -> SuiteResult:
    result = SuiteResult("fusion", tolerance=FUSION_TOL)
    rng = np.random.default_rng([seed, 2])
    for case in range(cases):
        model = random_model(rng)
        weights, x = random_weights(model, rng), random_input(model, rng)
        fused, _ = execute(lower(model, fuse=True), weights, x)
        unfused, _ = execute(lower(model, fuse=False), weights, x)
        ref = ref_forward(model, weights, x)
        result.record(max(relative_error(fused, unfused), relative_error(fused, ref)),
                      f"model {case} ({len(model.layers)} layers)")
    return result


def end_to_end_suite(seed: int, draws: int, models: dict | None = None) -> SuiteResult:
    result = SuiteResult("end-to-end", tolerance=END_TO_END_TOL)
    models = builtin_models() if models is None else models
    for name in sorted(models):
        model = models[name]
        program = lower(model)
        rng = np.random.default_rng([seed, 3, len(name)])
        for draw in range(draws):
            weights, x = random_weights(model, rng), random_input(model, rng)
            logits, _ = execute(program, weights, x)
            ref = ref_forward(model, weights, x)
            error = float(np.max(np.abs(logits - ref))) if logits.shape == ref.shape else float("inf")
            result.record(error, f"{name} draw {draw}")
    return result


@contextlib.contextmanager
def corrupted_hs_kernel(offset: float = 1e-3):
    """Test hook: make :func:`matvec.hs_matvec` return a slightly wrong result."""
    original = matvec.hs_matvec

    def faulty(A, v, ctx=None, **kwargs):
        out = original(A, v, ctx, **kwargs)
        slots = out.slots.copy()
        slots[0] += offset
        return type(out)(slots, out.kind)

    matvec.hs_matvec = faulty
    try:
        yield
    finally:
        matvec.hs_matvec = original


def run_all(seed: int, cases: int, draws: int | None = None, fault: bool = False) -> list[SuiteResult]:
    """Kernel suite with ``cases`` cases, fusion and end-to-end with ``min(cases, 20)`` each."""
    draws = min(cases, 20) if draws is None else draws
    context = corrupted_hs_kernel() if fault else contextlib.nullcontext()
    with context:
        return [kernel_suite(seed, cases),
                fusion_suite(seed, min(cases, 20)),
                end_to_end_suite(seed, draws)]
