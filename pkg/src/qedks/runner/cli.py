"""``qedks <task> --scenario FILE --out DIR``.

Exit codes: 0 when every invariant passes, 1 when one fails (named on
stderr), 2 for usage or schema errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from .. import __version__
from .arrays import write_array
from .config import TASKS, SchemaError, apply_overrides, load_scenario
from .tasks import TASK_FUNCS, Outcome, preflight

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _clean(obj):
    """JSON-safe copy: tuples to lists, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and (obj != obj or obj in (float("inf"), float("-inf"))):
        return str(obj)
    if hasattr(obj, "item"):
        return _clean(obj.item())
    return obj


def write_outputs(out_dir: Path, scn, outcome: Outcome, timings: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, arr in sorted(outcome.arrays.items()):
        p = write_array(out_dir / f"{name}.qarr", arr)
        digests[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    report = {
        "task": scn.task,
        "scenario_hash": scn.digest(),
        "code_version": __version__,
        "tolerances": scn.tolerances,
        "passed": outcome.passed,
        "invariants": [c.as_dict() for c in outcome.checks],
        "warnings": outcome.warnings,
        "results": outcome.report,
        "arrays": digests,
    }
    report = _clean(report)
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    manifest = dict(report, scenario=scn.source, timings=_clean(timings))
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qedks", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="task", required=True)
    for t in TASKS:
        s = sub.add_parser(t)
        s.add_argument("--scenario", required=True, help="TOML scenario file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--jobs", type=int, default=None, help="worker processes (sweep)")
        s.add_argument("--tol-override", action="append", default=[], metavar="KEY=VAL")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        scn = load_scenario(args.scenario)
        apply_overrides(scn, args.tol_override)
        if args.jobs is not None and args.jobs < 1:
            raise SchemaError([("--jobs", "must be >= 1")])
    except SchemaError as exc:
        for k, msg in exc.errors:
            print(f"schema error: {k}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    scn.task = args.task
    if args.task == "sweep" and not scn.sweep:
        from .config import _parse_sweep

        errs = []
        scn.sweep = _parse_sweep(errs, scn.raw.get("sweep", {}))
        if errs:
            for k, msg in errs:
                print(f"schema error: {k}: {msg}", file=sys.stderr)
            return EXIT_USAGE
    jobs = args.jobs or int(os.environ.get("QEDKS_JOBS", "0")) or None
    t = time.perf_counter()
    try:
        pre = preflight(scn)
        func = TASK_FUNCS[args.task]
        outcome = func(scn, jobs) if args.task == "sweep" else func(scn)
        outcome.checks[:0] = pre.checks
        outcome.warnings[:0] = pre.warnings
        outcome.report.update(pre.report)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"invariant failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        outcome = Outcome(report={"error": f"{type(exc).__name__}: {exc}"})
        from .tasks import Check

        outcome.checks.append(Check("run_completed", 1.0, 0.0, False, str(exc)))
    timings = dict(outcome.timings, total=time.perf_counter() - t)
    report = write_outputs(Path(args.out), scn, outcome, timings)
    for w in outcome.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for c in report["invariants"]:
        flag = "PASS" if c["passed"] else "FAIL"
        print(f"{flag} {c['name']}: {c['value']:.3e} (tol {c['tol']:.1e}) {c['note']}".rstrip())
    failed = [c["name"] for c in report["invariants"] if not c["passed"]]
    if failed:
        print(f"failed invariants: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_PASS


if __name__ == "__main__":
    sys.exit(main())
