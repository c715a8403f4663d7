#!/usr/bin/env python3
"""Exact run, inversion and Kohn-Sham replay for the two bundled inversion scenarios.

Writes into ``runs/`` next to the scenarios and prints the headline numbers.
"""

import argparse
import json
from pathlib import Path

from qedks.runner.cli import main

ROOT = Path(__file__).resolve().parents[1]


def run(task, scenario, out):
    code = main([task, "--scenario", str(ROOT / "scenarios" / scenario), "--out", str(out)])
    rep = json.loads((out / "report.json").read_text())
    return code, rep


def main_cli():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", default=str(ROOT / "runs"))
    args = ap.parse_args()
    runs = Path(args.runs)
    steps = [
        ("simulate", "reference.toml", "reference_simulate"),
        ("invert", "reference.toml", "reference_invert"),
        ("taylor", "reference.toml", "reference_taylor"),
        ("invert", "product_invert.toml", "product_invert"),
        ("ks", "product_invert.toml", "product_ks"),
    ]
    worst = 0
    for task, scn, name in steps:
        code, rep = run(task, scn, runs / name)
        worst = max(worst, code)
        print(f"== {name}: exit {code}")
        for key in ("max_deviation", "iterations_mean", "radius_estimate", "eom_order"):
            if key in rep["results"]:
                print(f"   {key}: {rep['results'][key]}")
    return worst


if __name__ == "__main__":
    raise SystemExit(main_cli())
