"""Parameter sweeps run in worker processes, with convergence-order fits."""

from __future__ import annotations

import copy
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .tasks import Check


def _apply(raw: dict, axis: str, value: float) -> dict:
    raw = copy.deepcopy(raw)
    raw["task"] = "simulate"
    raw.pop("sweep", None)
    model = raw.setdefault("model", {})
    grid = raw.setdefault("grid", {})
    if axis == "e":
        model["e"] = float(value)
    elif axis == "n_max":
        model["n_max"] = int(value)
    elif axis == "l_max":
        raw.setdefault("taylor", {})["l_max"] = int(value)
    elif axis == "dx":
        model["lattice_spacing"] = float(value)
    elif axis == "dt":
        dt0 = float(grid.get("dt", 1e-3))
        n0 = grid.get("n_steps")
        t0 = float(grid.get("t0", 0.0))
        tf = float(grid.get("t_final", t0 + (n0 * dt0 if n0 else 2.0)))
        grid.pop("n_steps", None)
        grid["dt"] = float(value)
        grid["t_final"] = tf
    return raw


def evaluate_point(raw: dict, axis: str, value: float, metric: str) -> dict:
    """One sweep point; never raises (failures are recorded)."""
    from .. import dynamics as dy
    from ..kohnsham import mean_field_run
    from ..model import evaluate_drive
    from . import tasks
    from .config import parse_scenario

    try:
        if metric == "dispersion":
            # fundamental mode of a box of fixed length: lattice vs continuum frequency
            model = raw.get("model", {})
            L = int(model.get("n_sites", 2)) * float(model.get("lattice_spacing", 1.0))
            h = float(value) if axis == "dx" else float(model.get("lattice_spacing", 1.0))
            n = max(2, int(round(L / h)))
            k = 2 * math.pi / (n * h)
            return {"ok": True, "value": abs(2 * math.sin(k * h / 2) / h - k), "n_sites": n}
        scn = parse_scenario(_apply(raw, axis, value))
        if metric == "eom":
            run = tasks.forward(scn)
            rc = dy.eom_residual_current(run.hs, run.traj, run.obs, run.a_grid)
            return {"ok": True, "value": rc.max_raw, "richardson": rc.max_richardson}
        if metric == "leakage":
            run = tasks.forward(scn)
            return {"ok": True, "value": float(np.max(run.traj.leakage))}
        if metric == "mean_field":
            run = tasks.forward(scn)
            m = run.model
            _, jext0 = evaluate_drive(m, scn.drive, scn.grid.t0)
            fld = tasks.classical_from_config(m, run.hs, run.config, jext0)
            if run.orbitals is None:
                raise ValueError("mean-field sweep needs a product or vacuum initial configuration")
            kt = mean_field_run(run.orbitals, fld, lambda t: evaluate_drive(m, scn.drive, t)[0],
                                lambda t: evaluate_drive(m, scn.drive, t)[1], scn.grid)
            return {"ok": True, "value": tasks.mean_field_deviation(m, kt, run.obs)}
        if metric == "taylor":
            scn.task = "taylor"
            scn.taylor["compare"] = False
            out = tasks.task_taylor(scn)
            return {"ok": True, "value": out.report["radius_estimate"]}
        raise ValueError(f"unknown metric {metric}")
    except Exception as exc:  # recorded, sweep continues
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc(limit=3)}


def fit_order(x, y) -> float:
    """Slope of ``log y`` against ``log x`` over points with positive values."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def run_sweep(scn, jobs: int | None = None) -> tuple[dict, list[Check]]:
    axis, values, metric = scn.sweep["axis"], scn.sweep["values"], scn.sweep["metric"]
    jobs = jobs or os.cpu_count() or 1
    raw = {k: v for k, v in scn.raw.items() if k != "sweep"}
    args = [(raw, axis, v, metric) for v in values]
    if jobs == 1:
        points = [evaluate_point(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            points = list(pool.map(evaluate_point, *zip(*args)))
    for v, p in zip(values, points):
        p["axis_value"] = v
    good = [(v, p["value"]) for v, p in zip(values, points) if p.get("ok")]
    rep = {"axis": axis, "metric": metric, "points": points, "failures": sum(not p.get("ok") for p in points)}
    checks = []
    if len(good) >= 2:
        xs, ys = zip(*good)
        rep["order"] = fit_order(xs, ys)
        order = sorted(good)
        ys_by_x = [y for _, y in order]
        if axis in ("dt", "dx") and metric in ("eom", "dispersion"):
            checks.append(Check(f"{axis}_order", rep["order"], 0.2, abs(rep["order"] - 2.0) <= 0.2,
                                "fitted order vs 2"))
        if axis == "e" and metric == "mean_field":
            mono = all(a < b for a, b in zip(ys_by_x, ys_by_x[1:]))
            checks.append(Check("mean_field_monotone", float(mono), 1.0, mono, "deviation increases with e"))
        if axis == "n_max" and metric == "leakage":
            mono = all(a > b for a, b in zip(ys_by_x, ys_by_x[1:]))
            checks.append(Check("leakage_monotone", float(mono), 1.0, mono, "leakage decreases with n_max"))
    return rep, checks
