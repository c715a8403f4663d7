#!/usr/bin/env python3
"""Time-step and lattice-spacing convergence: EOM residual against dt, dispersion error against dx."""

import argparse
import copy
from pathlib import Path

from qedks.runner import load_scenario
from qedks.runner.sweep import run_sweep

ROOT = Path(__file__).resolve().parents[1]


def table(rep, label):
    print(f"-- {label} ({rep['metric']} vs {rep['axis']})")
    for p in rep["points"]:
        val = f"{p['value']:.4e}" if p.get("ok") else p["error"]
        print(f"   {p['axis_value']:<10g} {val}")
    print(f"   fitted order {rep.get('order', float('nan')):.3f}")


def cli():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--jobs", type=int, default=None)
    args = ap.parse_args()
    scn = load_scenario(ROOT / "scenarios" / "sweep_dt.toml")
    rep_dt, checks = run_sweep(scn, args.jobs)
    table(rep_dt, "time step")
    disp = copy.deepcopy(scn)
    disp.raw["model"]["n_sites"] = 8
    disp.sweep.update(axis="dx", metric="dispersion", values=[1.0, 0.5, 0.25, 0.125])
    rep_dx, checks_dx = run_sweep(disp, 1)
    table(rep_dx, "lattice spacing at fixed box length")
    ok = all(c.passed for c in checks + checks_dx)
    print("PASS" if ok else "FAIL", "both orders within 2 +- 0.2")
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(cli())
