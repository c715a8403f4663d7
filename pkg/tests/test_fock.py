import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import unitary_group

from qedks.fock import (
    FockOperators,
    InitialConfiguration,
    OperatorMatrix,
    anticomm,
    charge_operator,
    coherent_photons,
    comm,
    current_matter,
    dump_operator,
    free_vacuum,
    load_operator,
    photon_field_ops,
    slater_matter,
)
from qedks.hamiltonian import build_H_E_photon, build_H_M_matter, field_energy_classical
from qedks.kohnsham import OrbitalSet, current_from_orbitals
from qedks.model import ModelSpec, build_model


def jw_oracle(nf, f):
    """Annihilator built bit by bit: mode f is bit nf-1-f, sign from occupied modes g < f."""
    dim = 2**nf
    out = np.zeros((dim, dim))
    for n in range(dim):
        occ = [(n >> (nf - 1 - g)) & 1 for g in range(nf)]
        if occ[f]:
            out[n ^ (1 << (nf - 1 - f)), n] = (-1) ** sum(occ[:f])
    return out


@pytest.mark.parametrize("n_sites", [1, 2])
def test_jordan_wigner_matches_oracle(n_sites):
    ops = FockOperators(build_model(ModelSpec(n_sites=n_sites, n_modes=0)))
    for f in range(ops.n_f):
        assert np.array_equal(ops.c[f], jw_oracle(ops.n_f, f))


def test_canonical_anticommutators(ref_model):
    ops = FockOperators(ref_model)
    eye = np.eye(ops.dm)
    for f in range(ops.n_f):
        for g in range(ops.n_f):
            assert np.max(np.abs(anticomm(ops.c[f], ops.cdag[g]) - (f == g) * eye)) <= 1e-12
            assert np.max(np.abs(anticomm(ops.c[f], ops.c[g]))) <= 1e-12


@given(n_max=st.integers(1, 8))
def test_truncated_oscillator(n_max):
    ops = FockOperators(build_model(ModelSpec(n_max=n_max)))
    a = ops.ladder[0]
    oracle = np.diag(np.sqrt(np.arange(1.0, n_max + 1)), 1)
    assert np.allclose(a, oracle, atol=0)
    cm = comm(a, a.conj().T)
    expect = np.eye(n_max + 1)
    expect[-1, -1] = -n_max  # the truncation defect sits on the top level only
    assert np.max(np.abs(cm - expect)) <= 1e-12
    assert np.diag(ops.top_level_projector)[-1] == 1 and ops.top_level_projector.trace() == 1


def test_photon_energy_levels(ref_model):
    ops = FockOperators(ref_model)
    w = np.linalg.eigvalsh(build_H_E_photon(ref_model, ops))
    assert np.allclose(w, 2.0 * np.arange(5))


def test_field_commutator_below_truncation():
    m = build_model(ModelSpec(n_sites=3, n_modes=2, n_max=3, max_dim=10**6))
    A, Ad = photon_field_ops(m)
    keep = np.diag(FockOperators(m).top_level_projector) == 0
    u = m.mode_functions
    for x in range(3):
        for y in range(3):
            c = comm(Ad[(x, 1)], A[(y, 1)])[np.ix_(keep, keep)]
            assert np.allclose(c, -1j * (u[:, x] @ u[:, y]) * np.eye(keep.sum()), atol=1e-12)


def test_vacuum_is_neutral_ground_state(ref_model):
    ops = FockOperators(ref_model)
    vac = free_vacuum(ref_model, ops)
    H = build_H_M_matter(ref_model, ops)
    assert abs(np.vdot(vac, H @ vac)) < 1e-12
    assert np.linalg.eigvalsh(H)[0] == pytest.approx(0.0, abs=1e-12)
    Q = charge_operator(ref_model, ops)
    assert abs(np.vdot(vac, Q @ vac)) < 1e-12
    assert np.max(np.abs(comm(Q, H))) < 1e-12


@given(seed=st.integers(0, 2**31 - 1), n_orb=st.integers(1, 3))
@settings(max_examples=25, deadline=None)
def test_slater_current_equals_orbital_current(seed, n_orb):
    m = build_model(ModelSpec(n_modes=0))
    ops = FockOperators(m)
    U = unitary_group.rvs(ops.n_f, random_state=seed)
    orbs = OrbitalSet.from_amplitudes(m, U[:, :n_orb])
    psi = slater_matter(m, ops, orbs.amplitudes)
    want = current_from_orbitals(orbs, subtract_vacuum=True)
    for s, mu in enumerate(m.mu_indices):
        for x in range(m.n_sites):
            got = np.vdot(psi, current_matter(m, ops, mu, x) @ psi).real
            assert abs(got - want[x, s]) <= 1e-10


@given(re=st.floats(-1, 1), im=st.floats(-1, 1))
@settings(max_examples=25, deadline=None)
def test_coherent_state_energy(re, im):
    m = build_model(ModelSpec(n_max=30))
    ops = FockOperators(m)
    alpha = complex(re, im)
    ph = coherent_photons(m, [alpha])
    w = m.mode_frequencies[0]
    assert np.vdot(ph, build_H_E_photon(m, ops) @ ph).real == pytest.approx(w * abs(alpha) ** 2, abs=1e-12)
    A, Ad = photon_field_ops(m, ops)
    a = np.array([np.vdot(ph, A[(x, 1)] @ ph).real for x in range(2)])
    ad = np.array([np.vdot(ph, Ad[(x, 1)] @ ph).real for x in range(2)])
    assert field_energy_classical(m, a, ad, 1) == pytest.approx(w * abs(alpha) ** 2, abs=1e-12)


def test_initial_configuration_validation():
    with pytest.raises(ValueError):
        InitialConfiguration(np.array([0.5, 0.6]), np.eye(3)[:, :2])
    with pytest.raises(ValueError):
        InitialConfiguration(np.array([0.5, 0.5]), np.ones((3, 2)))
    mix = InitialConfiguration(np.array([0.25, 0.75]), np.eye(3)[:, :2])
    assert mix.states.shape == (3, 2)


def test_operator_dump_round_trip(tmp_path, ref_model):
    op = OperatorMatrix(current_matter(ref_model, FockOperators(ref_model), 1, 0), "current", (1, 0))
    dump_operator(tmp_path / "j.npz", op)
    back = load_operator(tmp_path / "j.npz")
    assert np.array_equal(back.data, op.data)


def test_coherent_amplitude_count(ref_model):
    with pytest.raises(ValueError):
        coherent_photons(ref_model, [0.1, 0.2])
    assert math.isclose(np.linalg.norm(coherent_photons(ref_model, [0.3])), 1.0)


def test_symmetrised_current_is_normal_ordered(ref_model):
    from qedks.fock import current_normal_ordered

    ops = FockOperators(ref_model)
    for mu in ref_model.mu_indices:
        for x in range(ref_model.n_sites):
            diff = current_matter(ref_model, ops, mu, x) - current_normal_ordered(ref_model, mu, x, ops)
            assert np.max(np.abs(diff)) < 1e-12
