"""Invariant suite run by the ``verify`` task."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .. import dynamics as dy
from ..fock import (
    FockOperators,
    anticomm,
    charge_conjugation,
    coherent_photons,
    comm,
    current_matter,
    free_vacuum,
)
from ..hamiltonian import build_hamiltonians
from ..kohnsham import ClassicalFieldState, propagate_maxwell
from ..model import ExternalDrive, build_model
from .tasks import Check, forward


def algebra_checks(model) -> list[Check]:
    ops = FockOperators(model)
    car = 0.0
    eye = np.eye(ops.dm)
    for f in range(ops.n_f):
        for g in range(ops.n_f):
            car = max(car, np.max(np.abs(anticomm(ops.c[f], ops.cdag[g]) - (f == g) * eye)))
            car = max(car, np.max(np.abs(anticomm(ops.c[f], ops.c[g]))))
    osc = 0.0
    top = ops.top_level_projector
    keep = np.diag(top) == 0
    for o, lad in enumerate(ops.ladder):
        cm = comm(lad, lad.conj().T)
        # exact below the truncation level
        osc = max(osc, np.max(np.abs((cm - np.eye(ops.dp))[np.ix_(keep, keep)]), initial=0.0))
        for o2, lad2 in enumerate(ops.ladder):
            if o2 != o:
                osc = max(osc, np.max(np.abs(comm(lad, lad2.conj().T))))
    g = model.gammas
    cliff = 0.0
    for mu in g.indices:
        for nu in g.indices:
            target = 2 * (mu == nu) * g.metric[mu] * np.eye(model.spec.spinor_dim)
            cliff = max(cliff, np.max(np.abs(anticomm(g.gamma[mu], g.gamma[nu]) - target)))
    return [Check.le("anticommutators", car, 1e-12), Check.le("oscillator_commutators", osc, 1e-12),
            Check.le("clifford", cliff, 0.0)]


def charge_conjugation_checks(model) -> list[Check]:
    if model.spec.spinor_dim != 2 or model.spec.m0 == 0:
        return []
    ops = FockOperators(model)
    hs = build_hamiltonians(model, interacting=False, ops=ops)
    U = charge_conjugation(model, ops)
    even = np.max(np.abs(U @ hs.H_M @ U.conj().T - hs.H_M))
    odd = max(np.max(np.abs(U @ current_matter(model, ops, mu, x) @ U.conj().T + current_matter(model, ops, mu, x)))
              for mu in model.mu_indices for x in range(model.n_sites))
    vac = free_vacuum(model, ops)
    jv = max(abs(np.vdot(vac, current_matter(model, ops, mu, x) @ vac))
             for mu in model.mu_indices for x in range(model.n_sites))
    return [Check.le("C_even_H_M", even, 1e-12), Check.le("C_odd_current", odd, 1e-12),
            Check.le("vacuum_current", jv, 1e-12)]


def eom_order(scn, window: float = 0.5) -> tuple[list[Check], dict]:
    dt = scn.grid.dt
    res = {}
    for h in (2 * dt, dt):
        n = max(8, int(round(min(window, scn.grid.t_final - scn.grid.t0) / h)))
        run = forward(scn, grid=dy.TimeGrid(scn.grid.t0, h, n))
        rc = dy.eom_residual_current(run.hs, run.traj, run.obs, run.a_grid)
        res[h] = rc
    r2, r1 = res[2 * dt].max_raw, res[dt].max_raw
    order = float(np.log2(r2 / r1)) if r1 > 0 and r2 > 0 else float("nan")
    checks = [Check.le("eom_order_deviation", abs(order - 2.0) if np.isfinite(order) else 0.0, 0.2,
                       f"order {order:.3f}" if np.isfinite(order) else "residual at round-off"),
              Check.le("eom_richardson", res[dt].max_richardson, scn.tolerances["tol_eom"])]
    return checks, {"eom_order": order, "eom_raw": r1}


def causality_check(scn, n_steps: int = 200) -> list[Check]:
    model = build_model(scn.model)
    hs = build_hamiltonians(model)
    grid = dy.TimeGrid(scn.grid.t0, scn.grid.dt, n_steps)
    from .tasks import build_initial

    cfg, _ = build_initial(model, hs, scn.initial, scn.drive, grid.t0)
    base = dy.drive_schedule(model, scn.drive, grid)
    mu = model.quantized[0] if model.quantized else 1
    kr = dy.response_kernel(hs, cfg, base, grid, (mu, 0, n_steps // 2))
    return [Check.le("causality", kr.causal_violation, scn.tolerances["tol_causal"]),
            Check.le("kernel_linearity", kr.linearity_error, 5e-3)]


def ehrenfest_check(scn, n_steps: int = 1000, alpha: complex = 0.3 + 0.1j) -> list[Check]:
    spec = replace(scn.model, e=0.0)
    model = build_model(spec)
    if not model.quantized:
        return []
    hs = build_hamiltonians(model)
    ops = hs.ops
    photons = coherent_photons(model, [alpha] * spec.n_oscillators)
    matter = free_vacuum(model, ops) if spec.m0 != 0 else np.eye(ops.dm)[:, 0]
    cfg = dy.InitialConfiguration.pure(np.kron(matter, photons))
    grid = dy.TimeGrid(scn.grid.t0, scn.grid.dt, n_steps)
    drive = ExternalDrive(t0=grid.t0)
    sched = dy.drive_schedule(model, drive, grid)
    traj = dy.propagate(hs, cfg, sched, grid)
    obs = dy.observables(hs, traj, sched)
    fld = ClassicalFieldState(model, obs.A[0], obs.A_dot[0], components=model.quantized)
    ft = propagate_maxwell(fld, np.zeros((n_steps, model.n_sites, model.n_mu)), grid)
    q = [model.mu_slot(mu) for mu in model.quantized]
    dev = max(np.max(np.abs(ft.A[..., q] - obs.A[..., q])), np.max(np.abs(ft.A_dot[..., q] - obs.A_dot[..., q])))
    return [Check.le("ehrenfest", dev, 1e-8)]


def maxwell_energy_check(scn, n_steps: int = 1000) -> list[Check]:
    model = build_model(scn.model)
    x = np.arange(model.n_sites)
    A = np.zeros((model.n_sites, model.n_mu))
    A[:, model.mu_slot(1)] = np.cos(2 * np.pi * x / model.n_sites) + 0.3 * (-1.0) ** x
    fld = ClassicalFieldState(model, A, np.zeros_like(A), components=(1,))
    grid = dy.TimeGrid(0.0, scn.grid.dt, n_steps)
    out = []
    for scheme in ("exact", "leapfrog"):
        ft = propagate_maxwell(fld, np.zeros((n_steps, model.n_sites, model.n_mu)), grid, scheme=scheme)
        e = ft.energy if scheme == "exact" else ft.shadow
        drift = float(np.max(np.abs(e - e[0])) / max(e[0], 1e-300))
        note = "relative drift over 1e3 steps" + ("" if scheme == "exact" else " (scheme's conserved form)")
        out.append(Check.le(f"maxwell_energy_{scheme}", drift, scn.tolerances["tol_energy"], note))
    return out


def run_suite(scn) -> tuple[list[Check], dict]:
    model = build_model(scn.model)
    checks = algebra_checks(model) + charge_conjugation_checks(model)
    run = forward(scn)
    from .tasks import conservation_checks

    checks += conservation_checks(model, run, scn.tolerances)
    eo, rep = eom_order(scn)
    checks += eo
    checks += causality_check(scn, min(200, scn.grid.n_steps))
    checks += ehrenfest_check(scn)
    checks += maxwell_energy_check(scn)
    rep["table"] = [c.as_dict() for c in checks]
    return checks, rep
