import math

import numpy as np
import pytest
from conftest import REF_DRIVE
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qedks import dynamics as dy
from qedks import inversion as inv
from qedks.fock import (
    InitialConfiguration,
    coherent_photons,
    product_state,
    slater_matter,
)
from qedks.model import ExternalDrive, Series
from qedks.runner.tasks import _target_at_t0, product_orbitals

POLY_DRIVE = ExternalDrive(a_ext={(0, 1): Series((0.1, 0.2), ((0.5, 1.3, 0.0),)),
                                  (1, 1): Series(trig=((-0.3, 0.7, 0.4),))})


@given(J=arrays(np.float64, (3, 3), elements=st.floats(-2, 2)), b=arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_solve_channels_full_rank(J, b):
    s = np.linalg.svd(J, compute_uv=False)
    if s[-1] < 1e-3 * s[0] or s[0] < 1e-6:
        return
    a, null, _ = inv.solve_channels(J, b, np.full(3, 9.0))
    assert null == 0 and np.allclose(J @ a, b, atol=1e-9)


def test_solve_channels_takes_null_part_from_gauge():
    J = np.array([[2.0, 0.0], [0.0, 0.0]])
    a, null, cond = inv.solve_channels(J, np.array([1.0, 0.0]), np.array([5.0, -3.0]))
    assert np.allclose(a, [0.5, -3.0]) and null == 1 and cond == 1.0
    with pytest.raises(inv.SingularInversionError):
        inv.solve_channels(np.zeros((2, 2)), np.ones(2), np.zeros(2))


def test_jeff_is_plain_sum(rng):
    j, jx = rng.normal(size=(5, 2, 2)), rng.normal(size=(5, 2, 2))
    assert np.array_equal(inv.jeff_construct(j, jx), j + jx)
    with pytest.raises(ValueError):
        inv.jeff_construct(j, jx[:3])


@pytest.fixture(scope="module")
def free_target(ref_model, ref_hs0):
    deq = inv.build_defining_equation(ref_model, ref_hs0, ref_hs0)
    grid = dy.TimeGrid(0, 5e-4, 200)
    cfg = dy.ground_state(ref_hs0)
    sched = dy.drive_schedule(ref_model, POLY_DRIVE, grid)
    tr = dy.propagate(ref_hs0, cfg, sched, grid)
    a, j = dy.sample_drive(ref_model, POLY_DRIVE, grid)
    obs = dy.observables(ref_hs0, tr, sched, j[0])
    return deq, cfg, inv.record_target(deq, tr, obs, a, j), a


def test_noninteracting_target_inverts_to_its_drive(ref_hs0, free_target):
    deq, cfg, target, a = free_target
    res = inv.fixed_point_invert(deq, ref_hs0, target, cfg)
    assert np.max(np.abs(res.fields.a_eff[..., 1] - a[..., 1])) <= 1e-8
    assert res.reproduction_error(target)["j"] <= 1e-8


def test_predictors_reach_the_same_fixed_point(ref_hs0, free_target):
    deq, cfg, target, _ = free_target
    lin = inv.fixed_point_invert(deq, ref_hs0, target, cfg, predictor="linear")
    const = inv.fixed_point_invert(deq, ref_hs0, target, cfg, predictor="constant")
    assert np.max(np.abs(lin.fields.a_eff - const.fields.a_eff)) <= 1e-8


def test_nonconvergence_raises(ref_hs0, free_target):
    deq, cfg, target, _ = free_target
    with pytest.raises(inv.ConvergenceError):
        inv.fixed_point_invert(deq, ref_hs0, target, cfg, max_iter=1, max_halvings=1, tol_fp=1e-30)


def test_series_of_noninteracting_target_is_the_drive(ref_model, ref_hs0):
    deq = inv.build_defining_equation(ref_model, ref_hs0, ref_hs0)
    cfg = dy.ground_state(ref_hs0)
    tt = inv.taylor_construct(deq, ref_hs0, ref_hs0, POLY_DRIVE, cfg, cfg, l_max=3)
    for l in range(4):
        want = [POLY_DRIVE.a_ext[(x, 1)](0.0, l) / math.factorial(l) for x in range(2)]
        assert np.allclose(tt.a_coef[l][:, 1], want, atol=1e-12)


def test_taylor_order_cap(ref_model, ref_hs0):
    deq = inv.build_defining_equation(ref_model, ref_hs0, ref_hs0)
    cfg = dy.ground_state(ref_hs0)
    with pytest.raises(ValueError):
        inv.taylor_construct(deq, ref_hs0, ref_hs0, POLY_DRIVE, cfg, cfg, l_max=inv.L_MAX_CAP + 1)


@pytest.fixture(scope="module")
def product_setup(ref_model, ref_hs, ref_hs0):
    deq = inv.build_defining_equation(ref_model, ref_hs0, ref_hs)
    orbs = product_orbitals(ref_model, [[0.3, 0.0], [-0.2, 0.1]])
    matter = slater_matter(ref_model, ref_hs.ops, orbs.amplitudes)
    cfg = InitialConfiguration.pure(product_state(matter, coherent_photons(ref_model, [0.2 + 0.1j])))
    return deq, matter, cfg, _target_at_t0(deq, ref_hs, cfg, REF_DRIVE, 0.0)


def test_product_state_order0_is_external_plus_mean_field(product_setup):
    deq, _, cfg, t0 = product_setup
    a0, _ = inv.aeff_order0(deq, t0, cfg)
    assert np.allclose(a0[:, 1], t0.a_ext[0][:, 1] + t0.A[0][:, 1], atol=1e-12)


def test_mismatch_reports_the_injected_shift(ref_model, ref_hs0, product_setup):
    deq, matter, cfg, t0 = product_setup
    assert inv.match_initial_configuration(t0, deq, ref_hs0, cfg).passed
    shifted = InitialConfiguration.pure(product_state(matter, coherent_photons(ref_model, [0.25 + 0.1j])))
    rep = inv.match_initial_configuration(t0, deq, ref_hs0, shifted, raise_on_fail=False)
    A1, _ = dy.potential_expectations(ref_hs0, shifted.states, shifted.weights)
    assert rep.A == pytest.approx(np.max(np.abs(A1[:, 1] - t0.A[0][:, 1])), rel=1e-12)
    assert rep.j < 1e-12 and rep.worst() in ("A", "A_dot")
    with pytest.raises(inv.InitialMismatchError):
        inv.match_initial_configuration(t0, deq, ref_hs0, shifted)


def test_product_matched_state_matches(ref_hs, ref_hs0, product_setup):
    deq, _, cfg, t0 = product_setup
    pm = inv.product_matched_configuration(ref_hs0, deq, t0)
    assert inv.match_initial_configuration(t0, deq, ref_hs0, pm).passed


def test_defining_equation_rows(ref_model, ref_hs, ref_hs0):
    deq = inv.build_defining_equation(ref_model, ref_hs0, ref_hs)
    # two-component spinors: every row is a second-order equation; a_0 channels are inert
    assert set(deq.levels.tolist()) == {2}
    rho = inv.reduced_matter(dy.ground_state(ref_hs).states, np.ones(1), ref_hs.ops.dm, ref_hs.ops.dp)
    J = deq.jacobian(rho)
    for c, (mu, _) in enumerate(deq.channels):
        if mu == 0:
            assert np.max(np.abs(J[:, c])) < 1e-12
