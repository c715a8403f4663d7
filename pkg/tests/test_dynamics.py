import numpy as np
import pytest
import scipy.linalg
from conftest import REF_DRIVE

from qedks import dynamics as dy
from qedks.fock import InitialConfiguration, charge_operator
from qedks.model import ExternalDrive


def test_grid():
    g = dy.TimeGrid(0.5, 0.1, 4)
    assert np.allclose(g.times, [0.5, 0.6, 0.7, 0.8, 0.9]) and g.t_final == pytest.approx(0.9)
    assert g.refined().n_steps == 8
    with pytest.raises(ValueError):
        dy.TimeGrid(0, -1, 3)


def test_static_propagation_is_exact(ref_hs, rng):
    v = rng.normal(size=80) + 1j * rng.normal(size=80)
    cfg = InitialConfiguration.pure(v)
    grid = dy.TimeGrid(0, 0.01, 50)
    sched = dy.drive_schedule(ref_hs.model, ExternalDrive(), grid)
    for method in ("expm", "krylov"):
        tr = dy.propagate(ref_hs, cfg, sched, grid, method=method)
        exact = scipy.linalg.expm(-1j * 0.5 * ref_hs.static) @ cfg.states
        assert np.max(np.abs(tr.states[-1] - exact)) < 1e-10
        assert tr.max_norm_error < 1e-12


def test_midpoint_rule_second_order(ref_hs):
    cfg = dy.ground_state(ref_hs)
    ref = dy.TimeGrid(0, 1.25e-4, 4000)
    fine = dy.propagate(ref_hs, cfg, dy.drive_schedule(ref_hs.model, REF_DRIVE, ref), ref).states[-1]
    errs = []
    for dt in (0.02, 0.01):
        g = dy.TimeGrid(0, dt, int(round(0.5 / dt)))
        psi = dy.propagate(ref_hs, cfg, dy.drive_schedule(ref_hs.model, REF_DRIVE, g), g).states[-1]
        errs.append(np.linalg.norm(psi - fine))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(2.0, abs=0.2)


def test_ground_state_sector(ref_model, ref_hs):
    cfg = dy.ground_state(ref_hs)
    Q = ref_hs.ops.matter(charge_operator(ref_model, ref_hs.ops))
    assert abs(np.vdot(cfg.states[:, 0], Q @ cfg.states[:, 0])) < 1e-12
    E = np.vdot(cfg.states[:, 0], ref_hs.static @ cfg.states[:, 0]).real
    sector = np.linalg.eigvalsh(ref_hs.static)
    assert E <= sector[0] + 1e-9 or E == pytest.approx(min(sector[sector > E - 1e-9]))


@pytest.fixture(scope="module")
def short_run(ref_hs):
    grid = dy.TimeGrid(0, 1e-3, 200)
    sched = dy.drive_schedule(ref_hs.model, REF_DRIVE, grid)
    tr = dy.propagate(ref_hs, dy.ground_state(ref_hs), sched, grid)
    a, j = dy.sample_drive(ref_hs.model, REF_DRIVE, grid)
    return tr, dy.observables(ref_hs, tr, sched, j[0]), a, j


def test_conservation_on_short_run(ref_model, short_run):
    tr, obs, _, _ = short_run
    q = dy.global_charge(ref_model, obs)
    assert np.max(np.abs(q - q[0])) <= 1e-10
    assert np.max(np.abs(dy.continuity_residual(ref_model, obs))) <= 1e-10
    assert tr.max_norm_error <= 1e-10


def test_equations_of_motion(ref_model, ref_hs, short_run):
    tr, obs, a, j = short_run
    assert dy.eom_residual_current(ref_hs, tr, obs, a).max_richardson <= 1e-6
    assert dy.eom_residual_potential(ref_model, obs, j).max_richardson <= 1e-6


def test_causal_kernel_and_leading_term(ref_hs):
    grid = dy.TimeGrid(0, 1e-3, 60)
    cfg = dy.ground_state(ref_hs)
    base = dy.drive_schedule(ref_hs.model, REF_DRIVE, grid)
    kr = dy.response_kernel(ref_hs, cfg, base, grid, (1, 0, 30))
    assert kr.causal_violation <= 1e-8
    # one step after the pulse the response is the short-time commutator
    tr = dy.propagate(ref_hs, cfg, base, grid)
    pred = dy.leading_response(ref_hs, tr.states[30], tr.weights, 1, 0, grid.dt)
    got = kr.kernel[31]
    assert np.max(np.abs(got - pred)) <= 0.05 * np.max(np.abs(pred))


def test_probe_step_validated(ref_hs):
    grid = dy.TimeGrid(0, 1e-3, 5)
    base = dy.drive_schedule(ref_hs.model, REF_DRIVE, grid)
    with pytest.raises(ValueError):
        dy.response_kernel(ref_hs, dy.ground_state(ref_hs), base, grid, (1, 0, 5))
