#!/usr/bin/env python3
"""Deviation of the mean-field closure from the exact Fock dynamics as the coupling shrinks."""

import argparse
from pathlib import Path

from qedks.runner import load_scenario
from qedks.runner.sweep import run_sweep

ROOT = Path(__file__).resolve().parents[1]


def cli():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default=str(ROOT / "scenarios" / "sweep_e.toml"))
    ap.add_argument("--values", type=float, nargs="*", help="couplings (default: the scenario's list)")
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    scn = load_scenario(args.scenario)
    scn.sweep["metric"] = "mean_field"
    scn.sweep["axis"] = "e"
    if args.values:
        scn.sweep["values"] = args.values
    rep, checks = run_sweep(scn, args.jobs)
    print(f"{'e':>8} {'max deviation':>14}")
    for p in rep["points"]:
        print(f"{p['axis_value']:8.3f} {p['value']:14.4e}" if p.get("ok") else f"{p['axis_value']:8.3f}  {p['error']}")
    print(f"fitted order: {rep.get('order', float('nan')):.3f}")
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}")
    return 0 if all(c.passed for c in checks) else 1


if __name__ == "__main__":
    raise SystemExit(cli())
