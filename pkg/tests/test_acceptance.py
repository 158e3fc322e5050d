"""Acceptance criteria, one test each.

Every test records a one-line verdict; ``conftest.py`` prints them at the end
of the session, and running this file directly prints them as it goes.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from hecnn import matvec
from hecnn.cli import main
from hecnn.matvec import hs_matvec, hs_plan, next_pow2, predict_hs, predict_lola_dense, predict_lola_stacked
from hecnn.modelspec import REFERENCE_COUNTS, load_model, random_input, random_weights
from hecnn.netcompile import execute, lower
from hecnn.slotvec import MeterContext, encrypt
from hecnn.sweep import parse_range, run_sweep

RESULTS: dict[int, str] = {}
COLS = ("total", "add_pc", "add_cc", "mul_pc", "mul_cc", "rot")


def verdict(number: int, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    RESULTS[number] = line
    if __name__ == "__main__":
        print(line)
    assert ok, line


def timed_count(name: str):
    model = load_model(name)
    start = time.perf_counter()
    program = lower(model)
    _, report = execute(program, random_weights(model, 0), random_input(model, 1))
    return report, time.perf_counter() - start


def stage_check(report, reference, exact=("add_pc", "mul_pc", "mul_cc"), loose=("add_cc", "rot"), slack=2):
    problems = []
    for label, published in reference.items():
        if label == "Total":
            continue
        got = dict(zip(COLS, report.row(label).as_tuple()))
        want = dict(zip(COLS, published))
        problems += [f"{label}.{c} {got[c]}!={want[c]}" for c in exact if got[c] != want[c]]
        problems += [f"{label}.{c} {got[c]} vs {want[c]}" for c in loose if abs(got[c] - want[c]) > slack]
    return problems


def test_criterion_1_me_counts():
    report, seconds = timed_count("me")
    problems = stage_check(report, REFERENCE_COUNTS["me"])
    total = report.total().as_tuple()
    ok = not problems and seconds < 1.0
    verdict(1, ok, f"ME totals {total} vs {REFERENCE_COUNTS['me']['Total']}, "
                   f"stage mismatches {problems or 'none'}, lower+execute {seconds:.2f}s (<1s)")


def test_criterion_2_cryptonets_counts():
    report, _ = timed_count("cryptonets-hs")
    problems = stage_check(report, REFERENCE_COUNTS["cryptonets-hs"])
    conv1 = report.row("Conv1").as_tuple()
    ok = not problems and conv1 == (250, 5, 120, 125, 0, 0)
    verdict(2, ok, f"CryptoNets-HS totals {report.total().as_tuple()} vs "
                   f"{REFERENCE_COUNTS['cryptonets-hs']['Total']}, Conv1 {conv1}, "
                   f"stage mismatches {problems or 'none'}")


def test_criterion_3_ce_counts():
    report, seconds = timed_count("ce")
    got = report.total().as_tuple()
    want = REFERENCE_COUNTS["ce"]["Total"]
    rel = [abs(g - w) / w for g, w in zip(got, want)]
    conv1 = report.row("Conv1").as_tuple()
    ok = max(rel) <= 0.05 and conv1 == (972, 18, 468, 486, 0, 0) and seconds < 30
    verdict(3, ok, f"CE totals {got} vs {want} (max rel dev {max(rel):.2%} <= 5%), "
                   f"Conv1 {conv1}, {seconds:.2f}s (<30s)")


def test_criterion_4_worked_example():
    m, n, N = 64, 4096, 16384
    hs, dense, stacked = predict_hs(m, n, N), predict_lola_dense(m, n), predict_lola_stacked(m, n, N)
    got = ((hs.rotations, hs.multiplications), (dense.rotations, dense.multiplications),
           (stacked.rotations, stacked.multiplications))
    ok = got == ((70, 64), (768, 64), (255, 16))
    quoted = matvec.QUOTED_FC_COUNTS
    verdict(4, ok, f"hs {got[0]}, lola-dense {got[1]}, lola-stacked {got[2]}; "
                   f"quoted reference values: hs {quoted['hs_rotations']} rot, "
                   f"lola-stacked {quoted['lola_stacked_rotations']} rot / "
                   f"{quoted['lola_stacked_multiplications']} mul (reported, not asserted)")


def test_criterion_5_padding():
    rng = np.random.default_rng(5)
    cases, worst, bad_counts = 0, 0.0, 0
    while cases < 200:
        N = int(rng.choice([16, 32, 64]))
        m, n = int(rng.integers(1, N + 1)), int(rng.integers(1, N + 1))
        if not (N < m + n - 1 and next_pow2(m) <= N):
            continue
        cases += 1
        A, x = rng.normal(size=(m, n)), rng.normal(size=n)
        ctx = MeterContext()
        out = hs_matvec(A, encrypt(x, N), ctx, skip_zero=False)
        want = A @ x
        worst = max(worst, float(np.max(np.abs(out.slots[:m] - want)) / max(1.0, np.max(np.abs(want)))))
        m_pad = next_pow2(m)
        assert hs_plan(m, n, N)[0] == m_pad
        bad_counts += ctx.tally.rot != m_pad - 1 + int(np.log2(N // m_pad))
    ok = worst < 1e-9 and bad_counts == 0
    verdict(5, ok, f"{cases} padded cases, max rel error {worst:.2e} (<1e-9), rotation-count mismatches {bad_counts}")


def test_criterion_6_verify(capsys):
    start = time.perf_counter()
    code = main(["verify", "--seed", "1", "--cases", "500"])
    out = capsys.readouterr().out
    summary = [line.strip() for line in out.splitlines()]
    verdict(6, code == 0, f"verify --seed 1 --cases 500 exit {code} in {time.perf_counter() - start:.1f}s; "
                          + "; ".join(summary))


def test_criterion_7_metering_matches_formula():
    points = run_sweep(parse_range("16:4096"), parse_range("4:512"), [4096, 16384], do_measure=True)
    bad = []
    for p in points:
        rot, mul = p.measured
        if p.method == "hs" and hs_plan(p.m, p.n, p.N)[2]:
            fine = rot <= p.cost.rotations and mul <= p.cost.multiplications
        else:
            fine = (rot, mul) == (p.cost.rotations, p.cost.total_multiplications)
        if not fine:
            bad.append((p.method, p.n, p.m, p.N))
    verdict(7, not bad and len(points) > 0,
            f"{len(points)} sweep points, mismatches {bad[:5] or 'none'} "
            "(stacked multiplications include merge masks)")


def test_criterion_8_dominance():
    losers = []
    checked = 0
    for N in (4096, 16384):
        for n in parse_range("256:4096"):
            for m in parse_range("64:512"):
                checked += 1
                hs = predict_hs(m, n, N).rotations
                if not hs < min(predict_lola_dense(m, n).rotations, predict_lola_stacked(m, n, N).rotations):
                    losers.append((n, m, N))
    verdict(8, not losers, f"{checked} points with n>=256, m>=64; hs not strictly fewest rotations at {losers or 'none'}")


COMMANDS = [
    ["run", "--model", "me", "--seed", "7"],
    ["count", "--model", "cryptonets-hs", "--seed", "2"],
    ["sweep", "--n", "16:1024", "--m", "4:64", "--n-slots", "4096", "--measure", "--jobs", "4"],
    ["verify", "--seed", "3", "--cases", "5"],
]


def test_criterion_9_determinism(tmp_path):
    differing = []
    for argv in COMMANDS:
        outputs = []
        for run in range(2):
            report = tmp_path / f"report{run}.csv"
            extra = ["--report", str(report)] if argv[0] == "run" else []
            proc = subprocess.run([sys.executable, "-m", "hecnn.cli", *argv, *extra],
                                  capture_output=True, check=True)
            outputs.append(proc.stdout + (report.read_bytes() if extra else b""))
        if outputs[0] != outputs[1]:
            differing.append(argv[0])
    verdict(9, not differing, f"{len(COMMANDS)} commands run twice each; differing outputs: {differing or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
