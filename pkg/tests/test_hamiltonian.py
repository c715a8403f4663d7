import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qedks.fock import charge_operator, comm, free_vacuum
from qedks.hamiltonian import build_hamiltonians, single_particle_dirac
from qedks.model import ModelSpec, build_model

field = arrays(np.float64, (2, 2), elements=st.floats(-2, 2))


@given(a=field, j=field)
@settings(max_examples=20, deadline=None)
def test_total_hamiltonian_hermitian(ref_hs, a, j):
    H = ref_hs.total(a, j)
    assert np.max(np.abs(H - H.conj().T)) < 1e-12


@given(a=field)
@settings(max_examples=20, deadline=None)
def test_drive_couples_linearly(ref_hs, a):
    z = np.zeros((2, 2))
    lin = ref_hs.external(a, z)
    assert np.allclose(lin, sum(a[x, s] * ref_hs.ops.matter(ref_hs.a_ops[(mu, x)])
                                for s, mu in enumerate(ref_hs.model.mu_indices) for x in range(2)))


def test_decoupled_at_zero_charge():
    m = build_model(ModelSpec(e=0.0))
    hs, hs0 = build_hamiltonians(m), build_hamiltonians(m, interacting=False)
    assert np.array_equal(hs.static, hs0.static)


def test_charge_conserved_by_interaction(ref_model, ref_hs):
    Q = ref_hs.ops.matter(charge_operator(ref_model, ref_hs.ops))
    assert np.max(np.abs(comm(Q, ref_hs.static))) < 1e-12


def test_free_sea_energy_is_zero(ref_model, ref_hs0):
    vac = np.kron(free_vacuum(ref_model, ref_hs0.ops), np.eye(ref_hs0.ops.dp)[:, 0])
    assert abs(np.vdot(vac, ref_hs0.static @ vac)) < 1e-12


@given(c=st.floats(-3, 3))
def test_constant_scalar_potential_shifts_levels(c):
    m = build_model(ModelSpec(n_sites=4, max_dim=2**40))
    a = np.zeros((4, 2))
    a[:, 0] = c
    w0 = np.linalg.eigvalsh(single_particle_dirac(m))
    w1 = np.linalg.eigvalsh(single_particle_dirac(m, a))
    assert np.allclose(w1, w0 + m.spec.e * c, atol=1e-12)


@pytest.mark.parametrize("n", [6, 8])
def test_massless_dispersion(n):
    m = build_model(ModelSpec(n_sites=n, m0=0.0, max_dim=2**62))
    w = np.sort(np.linalg.eigvalsh(single_particle_dirac(m)))
    k = 2 * np.pi * np.arange(n) / n
    want = np.sort(np.concatenate([np.sin(k), -np.sin(k)]))
    assert np.allclose(w, want, atol=1e-12)


def test_massless_group_velocity():
    """A positive-energy packet at k0 moves at cos(k0 h) on the centred-difference lattice."""
    n, h, k0, width, t = 128, 1.0, np.pi / 4, 6.0, 10.0
    m = build_model(ModelSpec(n_sites=n, lattice_spacing=h, m0=0.0, n_modes=0, max_dim=2**400))
    x = np.arange(n) * h
    env = np.exp(-((x - 40.0) ** 2) / (4 * width**2) + 1j * k0 * x)
    psi = np.kron(env, np.array([1.0, 1.0]) / np.sqrt(2))
    psi /= np.linalg.norm(psi)
    from scipy.linalg import expm

    out = expm(-1j * t * single_particle_dirac(m)) @ psi
    dens = lambda v: (np.abs(v.reshape(n, 2)) ** 2).sum(axis=1)
    shift = x @ dens(out) - x @ dens(psi)
    assert shift / t == pytest.approx(np.cos(k0 * h), rel=1e-2)
