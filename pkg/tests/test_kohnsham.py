import numpy as np
import pytest
from conftest import REF_DRIVE
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import unitary_group

from qedks import dynamics as dy
from qedks.fock import (
    InitialConfiguration,
    coherent_photons,
    product_state,
    slater_matter,
)
from qedks.kohnsham import (
    CFLError,
    ClassicalFieldState,
    InstabilityError,
    OrbitalSet,
    coherent_amplitudes,
    current_from_orbitals,
    propagate_maxwell,
    propagate_orbitals,
    static_field,
)
from qedks.model import ModelSpec, build_model


def sub_orbitals(model, seed, n_orb=2):
    return OrbitalSet.from_amplitudes(model, unitary_group.rvs(model.spec.fermion_modes, random_state=seed)[:, :n_orb])


def test_orbitals_must_be_orthonormal(ref_model):
    with pytest.raises(ValueError):
        OrbitalSet(ref_model, np.ones((4, 2)), np.ones(2))


@given(seed=st.integers(0, 2**31 - 1), c=st.floats(-5, 5))
@settings(max_examples=20, deadline=None)
def test_constant_scalar_shift_leaves_currents(seed, c):
    m = build_model(ModelSpec(n_sites=4, max_dim=2**40))
    orbs = sub_orbitals(m, seed)
    grid = dy.TimeGrid(0, 0.01, 40)
    a = np.zeros((41, 4, 2))
    a[:, :, 1] = np.sin(grid.times)[:, None] * np.array([0.3, -0.1, 0.2, 0.0])
    b = a.copy()
    b[:, :, 0] += c
    ja = propagate_orbitals(orbs, a, grid.times).currents
    jb = propagate_orbitals(orbs, b, grid.times).currents
    assert np.max(np.abs(ja - jb)) <= 1e-10


def test_orbitals_reproduce_noninteracting_fock(ref_model, ref_hs0):
    orbs = sub_orbitals(ref_model, 7)
    vac_p = np.eye(ref_hs0.ops.dp)[:, 0]
    cfg = InitialConfiguration.pure(product_state(slater_matter(ref_model, ref_hs0.ops, orbs.amplitudes), vac_p))
    grid = dy.TimeGrid(0, 1e-2, 100)
    a, j = dy.sample_drive(ref_model, REF_DRIVE, grid)
    # endpoint-averaged fields in both propagators
    tr = dy.propagate(ref_hs0, cfg, dy.sampled_schedule(a, j), grid)
    j_fock = dy.current_expectations(ref_hs0, tr.states, tr.weights)
    j_orb = propagate_orbitals(orbs, a, grid.times, subtract_vacuum=True).currents
    assert np.max(np.abs(j_fock - j_orb)) <= 1e-10


def test_cfl_guard(ref_model):
    orbs = sub_orbitals(ref_model, 1)
    with pytest.raises(CFLError):
        propagate_orbitals(orbs, np.zeros((2, 2, 2)), np.array([0.0, 5.0]))


def test_free_mode_rotation_is_exact(ref_model):
    A = np.zeros((2, 2))
    A[:, 1] = [0.4, -0.4]  # pure k = pi mode, omega = 2
    fld = ClassicalFieldState(ref_model, A, np.zeros_like(A), (1,))
    grid = dy.TimeGrid(0, 0.05, 200)
    ft = propagate_maxwell(fld, np.zeros((200, 2, 2)), grid)
    assert np.allclose(ft.A[:, 0, 1], 0.4 * np.cos(2 * grid.times), atol=1e-13)


def test_static_source_is_fixed_point():
    m = build_model(ModelSpec(n_sites=5, n_modes=0, max_dim=2**40))
    j = np.zeros((5, 2))
    j[:, 1] = [0.3, -0.1, 0.0, 0.2, -0.4]  # no zero-mode component
    A = np.zeros((5, 2))
    A[:, 1] = static_field(m, j[:, 1], 1)
    fld = ClassicalFieldState(m, A, np.zeros_like(A), (1,))
    ft = propagate_maxwell(fld, np.repeat(j[None], 50, axis=0), dy.TimeGrid(0, 0.1, 50))
    assert np.max(np.abs(ft.A - A)) < 1e-12


def test_leapfrog_instability_reported(ref_model):
    A = np.zeros((2, 2))
    A[:, 1] = [0.4, -0.4]
    fld = ClassicalFieldState(ref_model, A, np.zeros_like(A), (1,))
    with pytest.raises(InstabilityError):
        propagate_maxwell(fld, np.zeros((100, 2, 2)), dy.TimeGrid(0, 1.2, 100), scheme="leapfrog")


@given(re=st.floats(-1, 1), im=st.floats(-1, 1))
@settings(max_examples=20, deadline=None)
def test_coherent_amplitude_round_trip(re, im):
    m = build_model(ModelSpec(n_max=30))
    hs = __import__("qedks.hamiltonian", fromlist=["x"]).build_hamiltonians(m, interacting=False)
    matter = np.eye(hs.ops.dm)[:, 0]
    state = product_state(matter, coherent_photons(m, [complex(re, im)]))
    A, Ad = dy.potential_expectations(hs, state[:, None], np.ones(1))
    fld = ClassicalFieldState(m, A, Ad, m.quantized)
    assert coherent_amplitudes(fld)[0] == pytest.approx(complex(re, im), abs=1e-10)


def test_mean_field_exact_without_coupling():
    from qedks.kohnsham import mean_field_run
    from qedks.model import evaluate_drive

    m = build_model(ModelSpec(e=0.0))
    from qedks.hamiltonian import build_hamiltonians

    hs = build_hamiltonians(m)
    orbs = sub_orbitals(m, 3)
    ph = coherent_photons(m, [0.2 + 0.1j])
    cfg = InitialConfiguration.pure(product_state(slater_matter(m, hs.ops, orbs.amplitudes), ph))
    grid = dy.TimeGrid(0, 1e-2, 100)
    sched = dy.drive_schedule(m, REF_DRIVE, grid)
    tr = dy.propagate(hs, cfg, sched, grid)
    obs = dy.observables(hs, tr, sched)
    A, Ad = dy.potential_expectations(hs, cfg.states, cfg.weights)
    fld = ClassicalFieldState(m, A, Ad, m.quantized)
    kt = mean_field_run(orbs, fld, lambda t: evaluate_drive(m, REF_DRIVE, t)[0],
                        lambda t: evaluate_drive(m, REF_DRIVE, t)[1], grid)
    q = m.mu_slot(1)
    assert np.max(np.abs(kt.A[..., q] - obs.A[..., q])) <= 1e-10
    assert np.max(np.abs(kt.j - obs.j)) <= 1e-3  # drive sampling differs, see the acceptance run
    assert np.max(np.abs(current_from_orbitals(kt.orbitals, True) - obs.j[-1])) <= 1e-3


@pytest.mark.parametrize("scheme", ["exact", "leapfrog"])
def test_field_energy_balance(ref_model, scheme, rng):
    A = np.zeros((2, 2))
    A[:, 1] = [0.1, -0.1]
    fld = ClassicalFieldState(ref_model, A, np.zeros_like(A), (1,))
    src = rng.normal(size=(300, 2, 2))
    ft = propagate_maxwell(fld, src, dy.TimeGrid(0, 1e-2, 300), scheme=scheme)
    drift = np.max(np.abs((ft.energy - ft.work) - ft.energy[0]))
    # exact for the closed-form step; the stencil carries its O(dt^2) energy error
    assert drift < (1e-12 if scheme == "exact" else 1e-3)
