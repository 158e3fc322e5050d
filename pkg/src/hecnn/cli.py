"""``hecnn`` command line: run, count, sweep and verify."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema

from . import sweep, verify
from .matvec import LayoutError
from .modelspec import (
    BUILTIN_MODELS,
    REFERENCE_COUNTS,
    load_model,
    random_input,
    random_weights,
    read_input,
    read_weights,
)
from .netcompile import LoweringError, execute, lower
from .slotvec import CapacityError, ShapeError

EXIT_OK, EXIT_IO, EXIT_SHAPE, EXIT_VERIFY = 0, 1, 2, 3
POLICIES = ("hs", "lola-dense", "lola-stacked")

# reference columns shown by ``count`` next to the measured counts
REFERENCE_COLUMNS = {
    "me": {"published": "me", "lola": "lola-mnist"},
    "cryptonets-hs": {"published": "cryptonets-hs", "lola": "lola-mnist"},
    "ce": {"published": "ce"},
}


def _write(path: str | None, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _prepare(args):
    model = load_model(args.model)
    if args.n_slots is not None:
        model = model.with_slots(args.n_slots)
    program = lower(model, policy=args.policy, fuse=not args.no_fuse)
    weights = read_weights(args.weights, model) if getattr(args, "weights", None) else random_weights(model, args.seed)
    x = read_input(args.input, model) if getattr(args, "input", None) else random_input(model, args.seed + 1)
    return model, program, weights, x


def _logits_csv(logits) -> str:
    return "class,logit\n" + "".join(f"{i},{v:.17g}\n" for i, v in enumerate(logits))


def _output_note(program) -> str:
    layout = program.output_layout
    if layout.kind == "interleaved":
        return "logits: class c read from slot perm[c] = " + ",".join(str(p) for p in layout.perm)
    if layout.kind == "sparse":
        return "logits: class c read from slot 0 of ciphertext c"
    return "logits: class c read from slot c of the output ciphertext"


def cmd_run(args) -> int:
    model, program, weights, x = _prepare(args)
    logits, report = execute(program, weights, x)
    if args.report:
        _write(args.report, report.to_csv())
    if args.out:
        _write(args.out, _logits_csv(logits))
    else:
        print(f"model {model.name}  N={program.n_slots}  HOPs={report.total().total()}")
        print(_logits_csv(logits), end="")
    return EXIT_OK


def cmd_count(args) -> int:
    model, program, weights, x = _prepare(args)
    _, report = execute(program, weights, x)
    refs = {}
    if args.policy is None and args.n_slots is None:
        refs = {tag: REFERENCE_COUNTS[key] for tag, key in REFERENCE_COLUMNS.get(model.name, {}).items()}
    print(f"model {model.name}  N={program.n_slots}  policy={args.policy or 'default'}")
    print(report.format_table(refs))
    print(_output_note(program))
    if args.out:
        _write(args.out, report.to_csv())
    return EXIT_OK


def cmd_sweep(args) -> int:
    ns, ms = sweep.parse_range(args.n), sweep.parse_range(args.m)
    slots = sweep.parse_range(args.n_slots)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    points = sweep.run_sweep(ns, ms, slots, methods, do_measure=args.measure, seed=args.seed, jobs=args.jobs)
    _write(args.out, sweep.to_csv(points, with_measured=args.measure))
    if args.measure:
        bad = [p for p in points if p.measured != (p.cost.rotations, p.cost.total_multiplications)
               and not (p.method == "hs" and p.measured[0] <= p.cost.rotations
                        and p.measured[1] <= p.cost.multiplications)]
        if bad:
            print(f"{len(bad)} points where measured counts differ from the prediction", file=sys.stderr)
            return EXIT_VERIFY
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.cases == 0:
        print("verify: 0 cases requested, nothing to check")
        return EXIT_OK
    results = verify.run_all(args.seed, args.cases, fault=args.inject_fault)
    for result in results:
        print(result.summary())
        for failure in result.failures[:5]:
            print(f"  {failure}")
    print(f"max error: {max(r.max_error for r in results):.3e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hecnn", description="Metered packed-ciphertext CNN inference simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    def model_args(p, with_files: bool):
        p.add_argument("--model", default="me",
                       help=f"built-in name ({', '.join(BUILTIN_MODELS)}), model file, or name in $HECNN_MODEL_DIR")
        if with_files:
            p.add_argument("--weights", help="little-endian float32 weights file (default: seeded random)")
            p.add_argument("--input", help="little-endian float32 input file (default: seeded random)")
        p.add_argument("--n-slots", type=int, help="override the model's slot count")
        p.add_argument("--policy", choices=POLICIES, help="kernel for every non-packed linear stage")
        p.add_argument("--no-fuse", action="store_true", help="one stage per linear layer")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output file (default: stdout)")

    p = sub.add_parser("run", help="execute a model and report logits and operation counts")
    model_args(p, True)
    p.add_argument("--report", help="write the per-stage operation CSV here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("count", help="print per-stage operation counts")
    model_args(p, False)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("sweep", help="predicted (and measured) kernel costs over a shape grid")
    p.add_argument("--n", default="16:4096", help="input sizes: list 'a,b' or doubling range 'lo:hi'")
    p.add_argument("--m", default="4:512", help="output sizes, same syntax")
    p.add_argument("--n-slots", default="4096,16384", help="slot counts, same syntax")
    p.add_argument("--methods", default=",".join(sweep.METHODS))
    p.add_argument("--measure", action="store_true", help="also meter each kernel on a random matrix")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="randomized equivalence suites")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--cases", type=int, default=500)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CapacityError, ShapeError, LoweringError, LayoutError, jsonschema.ValidationError) as exc:
        msg = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_SHAPE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
