"""Task implementations: each returns arrays, invariant checks and a report dict."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dynamics as dy
from .. import inversion as inv
from ..fock import (
    InitialConfiguration,
    coherent_photons,
    free_vacuum,
    product_state,
    slater_matter,
)
from ..hamiltonian import build_hamiltonians, single_particle_dirac
from ..kohnsham import ClassicalFieldState, OrbitalSet, ks_propagate, mean_field_run
from ..model import build_model, drive_residuals, evaluate_drive
from .arrays import read_array
from .guard import schwinger_guard


@dataclass
class Check:
    name: str
    value: float
    tol: float
    passed: bool
    note: str = ""

    @classmethod
    def le(cls, name: str, value: float, tol: float, note: str = "") -> Check:
        value = float(value)
        return cls(name, value, float(tol), bool(value <= tol), note)

    def as_dict(self) -> dict:
        return {"name": self.name, "value": self.value, "tol": self.tol, "passed": self.passed, "note": self.note}


@dataclass
class Outcome:
    arrays: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    report: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


class _Timer:
    def __init__(self, out: dict, key: str):
        self.out, self.key = out, key

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.out[self.key] = self.out.get(self.key, 0.0) + time.perf_counter() - self.t


# --------------------------------------------------------------------------
# builders


def product_orbitals(model, orbitals) -> OrbitalSet:
    """``"dirac_sea"`` or per-site Bloch pairs ``[<sigma_x>, <sigma_y>]`` (2-spinors, one particle per site)."""
    if orbitals == "dirac_sea":
        w, v = np.linalg.eigh(single_particle_dirac(model))
        if np.any(np.abs(w) < 1e-12):
            raise ValueError("free spectrum has zero modes; Dirac sea is ambiguous")
        return OrbitalSet.from_amplitudes(model, v[:, w < 0])
    amps = np.zeros((model.spec.fermion_modes, model.n_sites), dtype=complex)
    for x, (sx, sy) in enumerate(orbitals):
        amps[2 * x: 2 * x + 2, x] = inv._bloch_orbital(float(sx), float(sy))
    return OrbitalSet.from_amplitudes(model, amps)


def build_initial(model, hs, initial: dict, drive, t0: float):
    """Returns ``(InitialConfiguration, OrbitalSet or None)``."""
    kind = initial["kind"]
    ops = hs.ops
    vac_p = np.zeros(ops.dp, dtype=complex)
    vac_p[0] = 1.0
    if kind == "vacuum":
        orbs = product_orbitals(model, "dirac_sea")
        return InitialConfiguration.pure(product_state(free_vacuum(model, ops), vac_p), "vacuum"), orbs
    if kind == "ground":
        a, j = evaluate_drive(model, drive, t0)
        return dy.ground_state(hs, a, j), None
    if kind == "product":
        orbs = product_orbitals(model, initial.get("orbitals", "dirac_sea"))
        coh = initial.get("coherent") or [[0.0, 0.0]] * model.spec.n_oscillators
        photons = coherent_photons(model, [complex(r, i) for r, i in coh]) if model.spec.n_oscillators else vac_p
        matter = slater_matter(model, ops, orbs.amplitudes)
        return InitialConfiguration.pure(product_state(matter, photons), "product"), orbs
    arr = read_array(initial["path"])
    states = arr if arr.ndim == 2 else arr[:, None]
    w = np.asarray(initial.get("weights") or [1.0 / states.shape[1]] * states.shape[1], dtype=float)
    return InitialConfiguration(w, states, "explicit"), None


def classical_from_config(model, hs, cfg: InitialConfiguration, j_ext0: np.ndarray, interacting: bool = True):
    """Classical field with the Fock state's ``<A>, <A_dot>`` and Lorenz-consistent spectators."""
    j = dy.current_expectations(hs, cfg.states, cfg.weights)
    A, Ad = dy.potential_expectations(hs, cfg.states, cfg.weights)
    if 0 not in model.quantized:
        A, Ad = dy.lorenz_initial_spectators(model, j if interacting else 0 * j, j_ext0, A, Ad)
    return ClassicalFieldState(model, A, Ad)


@dataclass
class ForwardRun:
    model: object
    hs: object
    config: InitialConfiguration
    orbitals: OrbitalSet | None
    traj: dy.StateTrajectory
    obs: dy.ConjugateTrajectory
    a_grid: np.ndarray
    j_grid: np.ndarray
    schedule: object


def forward(scn, spec=None, grid=None, initial=None, interacting=True) -> ForwardRun:
    model = build_model(spec or scn.model)
    grid = grid or scn.grid
    hs = build_hamiltonians(model, interacting=interacting)
    cfg, orbs = build_initial(model, hs, initial or scn.initial, scn.drive, grid.t0)
    sched = dy.drive_schedule(model, scn.drive, grid)
    traj = dy.propagate(hs, cfg, sched, grid, leak_max=scn.tolerances["leak_max"])
    a_g, j_g = dy.sample_drive(model, scn.drive, grid)
    obs = dy.observables(hs, traj, sched, j_g[0])
    return ForwardRun(model, hs, cfg, orbs, traj, obs, a_g, j_g, sched)


def gauge_bound(model, run: ForwardRun, tol_gauge: float) -> float:
    """``tol_gauge`` plus an ``O(dt^2)`` allowance scaled by the source and the run length."""
    dt = run.traj.grid.dt
    T = run.traj.grid.t_final - run.traj.grid.t0
    src = float(np.max(np.abs(run.obs.j)) + np.max(np.abs(run.j_grid), initial=0.0))
    return tol_gauge + dt**2 * abs(model.spec.e) * src * max(T, 1.0) ** 2


def conservation_checks(model, run: ForwardRun, tol: dict) -> list[Check]:
    charge = dy.global_charge(model, run.obs)
    gb = dy.gupta_bleuler_residual(model, run.obs)
    return [
        Check.le("unitarity", run.traj.max_norm_error, tol["tol_unitarity"]),
        Check.le("charge_drift", float(np.max(np.abs(charge - charge[0]))), tol["tol_charge"]),
        Check.le("leakage", float(np.max(run.traj.leakage)), tol["leak_max"]),
        Check.le("gupta_bleuler", float(np.max(np.abs(gb))), gauge_bound(model, run, tol["tol_gauge"]),
                 "bound = tol_gauge + e |j_eff|max T^2 dt^2"),
    ]


def eom_checks(model, run: ForwardRun, tol: dict) -> tuple[list[Check], dict]:
    if run.traj.grid.n_steps < 5:
        return [], {}
    rc = dy.eom_residual_current(run.hs, run.traj, run.obs, run.a_grid)
    rp = dy.eom_residual_potential(model, run.obs, run.j_grid)
    checks = [Check.le("eom_current", rc.max_richardson, tol["tol_eom"], "one Richardson level"),
              Check.le("eom_potential", rp.max_richardson, tol["tol_eom"], "one Richardson level")]
    return checks, {"eom_current_raw": rc.max_raw, "eom_potential_raw": rp.max_raw}


def trajectory_arrays(prefix: str, obs: dy.ConjugateTrajectory) -> dict:
    return {f"{prefix}times": obs.times, f"{prefix}j": obs.j, f"{prefix}A": obs.A, f"{prefix}A_dot": obs.A_dot}


# --------------------------------------------------------------------------
# tasks


def task_simulate(scn) -> Outcome:
    out = Outcome()
    with _Timer(out.timings, "simulate"):
        run = forward(scn)
    m = run.model
    out.arrays.update(trajectory_arrays("", run.obs))
    out.arrays["leakage"] = run.traj.leakage
    out.arrays["norms"] = run.traj.norms
    out.checks += conservation_checks(m, run, scn.tolerances)
    eom, info = eom_checks(m, run, scn.tolerances)
    out.checks += eom
    out.report.update(info, leakage_max=float(np.max(run.traj.leakage)), fock_dim=m.dim)
    return out


def preflight(scn) -> Outcome:
    """Drive checks shared by every task: gauge admissibility and the Schwinger guard."""
    out = Outcome()
    m = build_model(scn.model)
    lor, cont = drive_residuals(m, scn.drive, scn.grid.times[:: max(1, scn.grid.n_steps // 50)])
    out.checks.append(Check.le("drive_admissible", float(max(np.max(np.abs(lor)), np.max(np.abs(cont)))),
                               scn.tolerances["tol_gauge"], "Lorenz and continuity of the drive"))
    g = schwinger_guard(m, scn.drive, scn.grid.times[:: max(1, scn.grid.n_steps // 200)],
                        scn.tolerances["critical_ratio"])
    if g.warning:
        out.warnings.append(g.warning)
    out.report["schwinger_ratio"] = g.ratio
    return out


def _ks_initial(scn, run: ForwardRun, deq, hs0, target) -> InitialConfiguration:
    if scn.ks["initial"] == "product_matched":
        return inv.product_matched_configuration(hs0, deq, target)
    return run.config


def task_invert(scn) -> Outcome:
    out = Outcome()
    tol = scn.tolerances
    with _Timer(out.timings, "target"):
        run = forward(scn)
    m = run.model
    with _Timer(out.timings, "invert"):
        hs0 = build_hamiltonians(m, interacting=False, ops=run.hs.ops)
        deq = inv.build_defining_equation(m, hs0, run.hs)
        target = inv.record_target(deq, run.traj, run.obs, run.a_grid, run.j_grid)
        cfg_ks = _ks_initial(scn, run, deq, hs0, target)
        match = inv.match_initial_configuration(target, deq, hs0, cfg_ks, tol["tol_init"], raise_on_fail=False)
        out.checks.append(Check.le("initial_match", max(match.j, match.A, match.A_dot, match.rate), tol["tol_init"],
                                   f"worst component: {match.worst()}"))
        if not match.passed:
            out.report["refused"] = f"initial mismatch in {match.worst()}"
            return out
        res = inv.fixed_point_invert(deq, hs0, target, cfg_ks, seed_shift=scn.ks["seed_shift"],
                                     theta=scn.ks["theta"], tol_fp=tol["tol_fp"], max_iter=scn.ks["max_iter"],
                                     n_floor=tol["n_floor"], feedback=tuple(scn.ks["feedback"]),
                                     predictor=scn.ks["predictor"], check_initial=False)
    err = res.reproduction_error(target)
    f = res.fields
    out.arrays.update(trajectory_arrays("target_", run.obs))
    out.arrays.update(a_eff=f.a_eff, j_eff=f.j_eff, a_ext=run.a_grid, j_ext=run.j_grid,
                      ks_j=res.ks_obs.j, ks_A=res.ks_obs.A, ks_A_dot=res.ks_obs.A_dot,
                      fp_iterations=f.iterations.astype(float), fp_residuals=f.residuals)
    out.checks += [
        Check.le("reproduce_j", err["j"], tol["tol_match"]),
        Check.le("reproduce_A", err["A"], tol["tol_match"]),
        Check.le("jeff_identity", float(np.max(np.abs(f.j_eff - (run.obs.j + run.j_grid)))), 0.0),
        Check.le("fixed_point_converged", float(np.max(f.residuals)), tol["tol_fp"]),
        Check.le("leakage", float(np.max(run.traj.leakage)), tol["leak_max"]),
    ]
    out.report.update(max_deviation=err, gauge_meta=f.gauge_meta, iterations_mean=float(f.iterations.mean()),
                      iterations_max=int(f.iterations.max()), halvings_max=int(f.theta_levels.max()),
                      condition_max=float(np.max(f.condition)), null_dim=int(np.max(f.null_dim)),
                      leakage_max=float(np.max(run.traj.leakage)))
    return out


def task_ks(scn) -> Outcome:
    out = Outcome()
    tol = scn.tolerances
    m = build_model(scn.model)
    hs = build_hamiltonians(m)
    if scn.initial["kind"] not in ("product", "vacuum"):
        raise ValueError("the Kohn-Sham propagator needs a factorised (product or vacuum) initial configuration")
    cfg, orbs = build_initial(m, hs, scn.initial, scn.drive, scn.grid.t0)
    _, jext0 = evaluate_drive(m, scn.drive, scn.grid.t0)

    def a_ext(t):
        return evaluate_drive(m, scn.drive, t)[0]

    def j_ext(t):
        return evaluate_drive(m, scn.drive, t)[1]

    if scn.ks["mode"] == "effective":
        fdir = Path(scn.ks["fields"])
        a_eff, j_eff = read_array(fdir / "a_eff.qarr"), read_array(fdir / "j_eff.qarr")
        if a_eff.shape[0] != scn.grid.n_steps + 1:
            raise ValueError("effective fields do not match the scenario grid")
        hs0 = build_hamiltonians(m, interacting=False, ops=hs.ops)
        fld = classical_from_config(m, hs0, cfg, j_eff[0], interacting=False)
        with _Timer(out.timings, "ks"):
            kt = ks_propagate(orbs, fld, a_eff, j_eff, scn.grid)
        if (fdir / "target_j.qarr").exists():
            tj, tA = read_array(fdir / "target_j.qarr"), read_array(fdir / "target_A.qarr")
            q = [m.mu_slot(mu) for mu in m.quantized]
            out.checks += [Check.le("reproduce_j", float(np.max(np.abs(kt.j - tj))), tol["tol_match"]),
                           Check.le("reproduce_A", float(np.max(np.abs(kt.A[..., q] - tA[..., q]), initial=0.0)),
                                    tol["tol_match"])]
    else:
        fld = classical_from_config(m, hs, cfg, jext0)
        with _Timer(out.timings, "ks"):
            kt = mean_field_run(orbs, fld, a_ext, j_ext, scn.grid)
        if scn.ks["compare_exact"]:
            with _Timer(out.timings, "exact"):
                run = forward(scn)
            dev = mean_field_deviation(m, kt, run.obs)
            out.report["mean_field_deviation"] = dev
            out.arrays.update(trajectory_arrays("exact_", run.obs))
            if m.spec.e == 0:
                out.checks.append(Check.le("mean_field_exact_e0", dev, 1e-10))
    out.arrays.update(times=kt.times, j=kt.j, A=kt.A, A_dot=kt.A_dot, a_eff=kt.a_eff, field_energy=kt.energy)
    out.checks.append(Check.le("orthonormality", kt.ortho_error, 1e-9))
    q0 = m.dx * kt.j[:, :, m.mu_slot(0)].sum(axis=1)
    out.checks.append(Check.le("charge_drift", float(np.max(np.abs(q0 - q0[0]))), tol["tol_charge"]))
    return out


def mean_field_deviation(model, kt, obs: dy.ConjugateTrajectory) -> float:
    q = [model.mu_slot(mu) for mu in model.quantized]
    dj = np.max(np.abs(kt.j - obs.j))
    dA = np.max(np.abs(kt.A[..., q] - obs.A[..., q]), initial=0.0)
    return float(max(dj, dA))


def _target_at_t0(deq, hs, cfg, drive, t0) -> inv.TargetRecord:
    m = deq.model
    j, A, Ad, xv = inv.initial_moments(hs, deq, cfg)
    a, jx = evaluate_drive(m, drive, t0)
    T = deq.target_rate(cfg.states, cfg.weights, a)
    g = dy.TimeGrid(t0, 1.0, 1)
    two = lambda v: np.stack([v, v])
    return inv.TargetRecord(g, two(j), two(A), two(Ad), two(T), two(xv), two(a), two(jx))


def task_taylor(scn) -> Outcome:
    out = Outcome()
    tol = scn.tolerances
    m = build_model(scn.model)
    hs = build_hamiltonians(m)
    hs0 = build_hamiltonians(m, interacting=False, ops=hs.ops)
    deq = inv.build_defining_equation(m, hs0, hs)
    cfg, _ = build_initial(m, hs, scn.initial, scn.drive, scn.drive.t0)
    t_rec = _target_at_t0(deq, hs, cfg, scn.drive, scn.drive.t0)
    cfg_ks = cfg if scn.ks["initial"] == "same" else inv.product_matched_configuration(hs0, deq, t_rec)
    seed = inv.gauge_seed(m, t_rec, scn.ks["seed_shift"])
    n_cmp = min(scn.grid.n_steps, 20)
    with _Timer(out.timings, "taylor"):
        # the series is used (and compared) on the first n_cmp steps only
        tt = inv.taylor_construct(deq, hs, hs0, scn.drive, cfg, cfg_ks, scn.taylor["l_max"], seed,
                                  tol["n_floor"], horizon=n_cmp * scn.grid.dt)
    out.warnings += tt.warnings
    out.arrays.update(a_coef=tt.a_coef, j_coef=tt.j_coef)
    out.report.update(radius_estimate=tt.radius, matched_residual=tt.residual.tolist())
    out.checks.append(Check.le("taylor_matched_residual", float(np.max(tt.residual)), 1e-8))
    if scn.taylor["compare"]:
        short = dy.TimeGrid(scn.drive.t0, scn.grid.dt, n_cmp)
        with _Timer(out.timings, "fixed_point"):
            run = forward(scn, grid=short)
            target = inv.record_target(deq, run.traj, run.obs, run.a_grid, run.j_grid)
            res = inv.fixed_point_invert(deq, hs0, target, cfg_ks, seed_shift=scn.ks["seed_shift"],
                                         tol_fp=tol["tol_fp"], n_floor=tol["n_floor"])
        a0, da = inv.fd_derivatives(res.fields.a_eff, short.dt)
        out.checks += [Check.le("taylor_vs_fixed_point_order0", float(np.max(np.abs(tt.derivative(0) - a0))), 1e-5),
                       Check.le("taylor_vs_fixed_point_order1", float(np.max(np.abs(tt.derivative(1) - da))), 1e-5)]
    return out


def task_verify(scn) -> Outcome:
    from .verify import run_suite

    out = Outcome()
    with _Timer(out.timings, "verify"):
        checks, report = run_suite(scn)
    out.checks += checks
    out.report.update(report)
    return out


def task_sweep(scn, jobs: int | None = None) -> Outcome:
    from .sweep import run_sweep

    out = Outcome()
    with _Timer(out.timings, "sweep"):
        rep, checks = run_sweep(scn, jobs)
    out.report.update(rep)
    out.checks += checks
    vals = np.array([p.get("value", math.nan) if p.get("ok") else math.nan for p in rep["points"]], dtype=float)
    out.arrays["sweep_values"] = np.array(scn.sweep["values"], dtype=float)
    out.arrays["sweep_metric"] = vals
    return out


TASK_FUNCS = {
    "simulate": task_simulate,
    "invert": task_invert,
    "ks": task_ks,
    "taylor": task_taylor,
    "verify": task_verify,
    "sweep": task_sweep,
}
