"""Noninteracting Kohn-Sham propagator: Dirac orbitals plus classical Maxwell fields.

Orbitals are lattice spinor fields ``phi[f, n]`` with ``f = x * spinor_dim + a``
and ``sum_f dx |phi[f, n]|^2 = 1``.  Field components follow the same mode
expansion as the quantised photons (see ``Model.wave_basis``) so a coherent
Fock state and its classical counterpart evolve identically.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .fock import FockOperators, slater_matter
from .hamiltonian import single_particle_dirac
from .model import Model

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-10
CFL_MAX = 1.0


class CFLError(ValueError):
    pass


class InstabilityError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# orbitals


@dataclass(eq=False)
class OrbitalSet:
    model: Model
    orbitals: np.ndarray  # (n_f, n_orb)
    occupations: np.ndarray

    def __post_init__(self):
        self.orbitals = np.asarray(self.orbitals, dtype=complex)
        if self.orbitals.ndim == 1:
            self.orbitals = self.orbitals[:, None]
        self.occupations = np.asarray(self.occupations, dtype=float)
        if self.orbitals.shape[0] != self.model.spec.fermion_modes:
            raise ValueError("orbital length must equal n_sites * spinor_dim")
        if self.occupations.shape != (self.orbitals.shape[1],):
            raise ValueError("one occupation per orbital")
        if np.any(self.occupations < 0):
            raise ValueError("occupations must be non-negative")
        err = self.orthonormality_error()
        if err > ORTHO_TOL:
            raise ValueError(f"orbitals not orthonormal (error {err:.2e})")

    def orthonormality_error(self) -> float:
        g = self.model.dx * self.orbitals.conj().T @ self.orbitals
        return float(np.max(np.abs(g - np.eye(g.shape[0])), initial=0.0))

    @classmethod
    def from_amplitudes(cls, model: Model, amps: np.ndarray, occupations=None) -> OrbitalSet:
        """From unit-norm mode amplitudes (the Fock convention)."""
        amps = np.asarray(amps, dtype=complex).reshape(model.spec.fermion_modes, -1)
        occ = np.ones(amps.shape[1]) if occupations is None else occupations
        return cls(model, amps / np.sqrt(model.dx), occ)

    @property
    def amplitudes(self) -> np.ndarray:
        return self.orbitals * np.sqrt(self.model.dx)

    def replace(self, orbitals: np.ndarray) -> OrbitalSet:
        return OrbitalSet(self.model, orbitals, self.occupations)


def current_from_orbitals(orbs: OrbitalSet, subtract_vacuum: bool = False) -> np.ndarray:
    """``j^mu(x) = sum_n c_n phi_n(x)^dag gamma^0 gamma^mu phi_n(x)``, shape ``(n_sites, n_mu)``.

    ``subtract_vacuum`` removes ``tr(gamma^0 gamma^mu) / (2 dx)``, the offset of
    the charge-symmetrised Fock current operator.
    """
    m = orbs.model
    s = m.spec.spinor_dim
    phi = orbs.orbitals.reshape(m.n_sites, s, -1)
    out = np.zeros((m.n_sites, m.n_mu))
    for k, mu in enumerate(m.mu_indices):
        M = m.gammas.current_matrix(mu)
        val = np.einsum("xan,ab,xbn,n->x", phi.conj(), M, phi, orbs.occupations)
        out[:, k] = val.real
        if subtract_vacuum:
            out[:, k] -= 0.5 * np.trace(M).real / m.dx
    return out


def check_cfl(h: np.ndarray, dt: float, cfl_max: float = CFL_MAX) -> float:
    r = dt * float(np.linalg.norm(h, 2))
    if r > cfl_max:
        raise CFLError(f"dt * ||h|| = {r:.3f} exceeds {cfl_max}; reduce dt")
    return r


def orbital_step(orbs: OrbitalSet, a: np.ndarray, dt: float, cfl_max: float = CFL_MAX) -> np.ndarray:
    h = single_particle_dirac(orbs.model, a)
    check_cfl(h, dt, cfl_max)
    return scipy.linalg.expm(-1j * dt * h) @ orbs.orbitals


@dataclass(eq=False)
class OrbitalTrajectory:
    times: np.ndarray
    orbitals: np.ndarray  # (T, n_f, n_orb)
    currents: np.ndarray  # (T, n_sites, n_mu)
    ortho_error: float


def propagate_orbitals(orbs: OrbitalSet, a_grid: np.ndarray, times: np.ndarray, subtract_vacuum: bool = False,
                       cfl_max: float = CFL_MAX) -> OrbitalTrajectory:
    """Exponential midpoint with ``a_eff`` averaged over each step."""
    a_grid = np.asarray(a_grid, dtype=float)
    if a_grid.shape[0] != len(times):
        raise ValueError("a_eff must be sampled on the time grid")
    out = [orbs.orbitals]
    cur = [current_from_orbitals(orbs, subtract_vacuum)]
    err = orbs.orthonormality_error()
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        orbs = orbs.replace(orbital_step(orbs, 0.5 * (a_grid[k] + a_grid[k + 1]), dt, cfl_max))
        err = max(err, orbs.orthonormality_error())
        out.append(orbs.orbitals)
        cur.append(current_from_orbitals(orbs, subtract_vacuum))
    return OrbitalTrajectory(np.asarray(times), np.array(out), np.array(cur), err)


def slater_from_orbitals(orbs: OrbitalSet, ops: FockOperators | None = None) -> np.ndarray:
    """Matter-factor Slater determinant; requires unit occupations."""
    if not np.allclose(orbs.occupations, 1.0):
        raise ValueError("Slater mapping needs occupations equal to one")
    ops = ops or FockOperators(orbs.model)
    return slater_matter(orbs.model, ops, orbs.amplitudes)


# --------------------------------------------------------------------------
# classical Maxwell fields


@dataclass(eq=False)
class ClassicalFieldState:
    """Real ``A[x, slot]`` and ``A_dot`` for the evolved components."""

    model: Model
    A: np.ndarray
    A_dot: np.ndarray
    components: tuple[int, ...] = ()

    def __post_init__(self):
        shape = (self.model.n_sites, self.model.n_mu)
        self.A = np.array(self.A, dtype=float).reshape(shape)
        self.A_dot = np.array(self.A_dot, dtype=float).reshape(shape)
        if not self.components:
            self.components = tuple(self.model.mu_indices)
        if not (np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.A_dot))):
            raise ValueError("field values must be finite")

    def modes(self, mu: int) -> tuple[np.ndarray, np.ndarray]:
        u, _ = self.model.wave_basis(mu)
        s = self.model.mu_slot(mu)
        return self.model.dx * u @ self.A[:, s], self.model.dx * u @ self.A_dot[:, s]

    def energy(self) -> float:
        tot = 0.0
        for mu in self.components:
            c, cd = self.modes(mu)
            _, w = self.model.wave_basis(mu)
            tot += 0.5 * float(cd @ cd + (w * c) @ (w * c))
        return tot

    def lorenz_residual(self) -> np.ndarray:
        m = self.model
        return self.A_dot[:, m.mu_slot(0)] - m.grad @ self.A[:, m.mu_slot(1)]


def coherent_amplitudes(state: ClassicalFieldState) -> np.ndarray:
    """Coherent-state amplitudes ``sqrt(w/2) (c + i c_dot / w)`` per oscillator."""
    m = state.model
    out = np.zeros(m.spec.n_oscillators, dtype=complex)
    for (q, mu), o in m.oscillator_index.items():
        c, cd = state.modes(mu)
        w = m.mode_frequencies[q]
        out[o] = np.sqrt(w / 2) * (c[q] + 1j * cd[q] / w)
    return out


@dataclass(eq=False)
class FieldTrajectory:
    A: np.ndarray  # (T, n_sites, n_mu)
    A_dot: np.ndarray
    energy: np.ndarray  # (T,)
    work: np.ndarray  # (T,) cumulative work done by the source
    shadow: np.ndarray | None = None  # leapfrog only: the scheme's exactly conserved quadratic form


def _source_gain(model: Model, mu: int) -> float:
    return model.spec.e * model.gammas.metric[mu]


def _rotate(c, cd, w, f, dt, damping=0.0):
    """Exact step of ``c'' = -w^2 c - damping c' + f`` with constant ``f``."""
    if damping == 0.0:
        cs, sn = np.cos(w * dt), np.sin(w * dt)
        one_m_cos = 2 * np.sin(0.5 * w * dt) ** 2
        c1 = c * cs + cd * sn / w + f * one_m_cos / w**2
        cd1 = -c * w * sn + cd * cs + f * sn / w
        return c1, cd1
    # damped oscillator: shift to the static solution, then propagate the 2x2 system
    cst = f / w**2
    out_c, out_cd = np.empty_like(c), np.empty_like(cd)
    for i in range(len(w)):
        M = np.array([[0.0, 1.0], [-w[i] ** 2, -damping]])
        y = scipy.linalg.expm(M * dt) @ np.array([c[i] - cst[i], cd[i]])
        out_c[i], out_cd[i] = y[0] + cst[i], y[1]
    return out_c, out_cd


def propagate_maxwell(state: ClassicalFieldState, sources: np.ndarray, grid, scheme: str = "exact",
                      damping: float = 0.0, blowup: float = 10.0) -> FieldTrajectory:
    """Lattice Maxwell equation ``A_mu'' = L A_mu + e g_mumu P j_eff^mu`` (plus optional damping).

    ``sources[k]`` is the upper-index source current held constant over step
    ``k`` (use midpoint values).  ``scheme="exact"`` integrates each mode in
    closed form; ``scheme="leapfrog"`` is the velocity-Verlet stencil on the
    lattice.  Energy above ``blowup`` times the running reference aborts.
    """
    if scheme not in ("exact", "leapfrog"):
        raise ValueError(f"unknown Maxwell scheme {scheme!r}")
    m = state.model
    dt, n = grid.dt, grid.n_steps
    sources = np.asarray(sources, dtype=float)
    if sources.shape != (n, m.n_sites, m.n_mu):
        raise ValueError(f"sources must have shape {(n, m.n_sites, m.n_mu)}")
    A = np.empty((n + 1, m.n_sites, m.n_mu))
    Ad = np.empty_like(A)
    A[0], Ad[0] = state.A, state.A_dot
    energy = np.empty(n + 1)
    work = np.zeros(n + 1)
    energy[0] = state.energy()
    shadow = np.empty(n + 1) if scheme == "leapfrog" else None
    coeffs = {}
    for mu in state.components:
        u, w = m.wave_basis(mu)
        c, cd = state.modes(mu)
        coeffs[mu] = [u, w, c, cd]
    untouched = [m.mu_slot(mu) for mu in m.mu_indices if mu not in state.components]
    ref = max(energy[0], 1e-300)

    def shadow_of(entries):
        # 1/2 v^2 + 1/2 w^2 (1 - w^2 dt^2 / 4) q^2 is invariant under free velocity Verlet
        return sum(0.5 * float(cd @ cd + (w**2 * (1 - (w * dt) ** 2 / 4)) @ (c * c)) for _, w, c, cd in entries)

    if shadow is not None:
        shadow[0] = shadow_of(coeffs.values())
    for k in range(n):
        e_k = 0.0
        dW = 0.0
        for mu, entry in coeffs.items():
            u, w, c, cd = entry
            f = _source_gain(m, mu) * m.dx * u @ sources[k, :, m.mu_slot(mu)]
            if scheme == "exact":
                c1, cd1 = _rotate(c, cd, w, f, dt, damping)
            else:
                vh = cd + 0.5 * dt * (-(w**2) * c + f - damping * cd)
                c1 = c + dt * vh
                cd1 = (vh + 0.5 * dt * (-(w**2) * c1 + f)) / (1 + 0.5 * dt * damping)
            dW += float(f @ (c1 - c))
            entry[2], entry[3] = c1, cd1
            s = m.mu_slot(mu)
            A[k + 1, :, s] = u.T @ c1
            Ad[k + 1, :, s] = u.T @ cd1
            e_k += 0.5 * float(cd1 @ cd1 + (w * c1) @ (w * c1))
        for s in untouched:
            A[k + 1, :, s] = A[k, :, s] + dt * Ad[k, :, s]
            Ad[k + 1, :, s] = Ad[k, :, s]
        energy[k + 1] = e_k
        if shadow is not None:
            shadow[k + 1] = shadow_of(coeffs.values())
        work[k + 1] = work[k] + dW
        ref = max(ref, energy[0] + abs(work[k + 1]))
        if e_k > blowup * ref and e_k > 1e-12:
            wmax = max(float(np.max(entry[1])) for entry in coeffs.values())
            raise InstabilityError(
                f"field energy grew to {e_k / ref:.1f}x its reference at step {k + 1}; "
                f"dt * omega_max = {dt * wmax:.3f} (leapfrog needs < 2)"
            )
    return FieldTrajectory(A, Ad, energy, work, shadow)


def static_field(model: Model, source: np.ndarray, mu: int) -> np.ndarray:
    """Solution of ``L A_mu + e g_mumu P j^mu = 0`` for a static source."""
    L, P = model.wave_operator(mu), model.projector(mu)
    rhs = -_source_gain(model, mu) * P @ source
    return np.linalg.lstsq(L, rhs, rcond=None)[0]


# --------------------------------------------------------------------------
# coupled Kohn-Sham runs


@dataclass(eq=False)
class KSTrajectory:
    times: np.ndarray
    j: np.ndarray  # orbital currents (T, n_sites, n_mu)
    A: np.ndarray
    A_dot: np.ndarray
    a_eff: np.ndarray  # potentials seen by the orbitals at grid times
    ortho_error: float
    energy: np.ndarray
    orbitals: OrbitalSet = field(repr=False)


def ks_propagate(orbs: OrbitalSet, field0: ClassicalFieldState, a_eff_grid: np.ndarray, j_eff_grid: np.ndarray,
                 grid, subtract_vacuum: bool = True, cfl_max: float = CFL_MAX) -> KSTrajectory:
    """Orbitals driven by ``a_eff``, fields sourced by ``j_eff`` only (no matter back-reaction)."""
    times = grid.times
    otraj = propagate_orbitals(orbs, a_eff_grid, times, subtract_vacuum, cfl_max)
    src = 0.5 * (j_eff_grid[1:] + j_eff_grid[:-1])
    ftraj = propagate_maxwell(field0, src, grid)
    final = orbs.replace(otraj.orbitals[-1])
    return KSTrajectory(times, otraj.currents, ftraj.A, ftraj.A_dot, np.asarray(a_eff_grid), otraj.ortho_error,
                        ftraj.energy, final)


def _feedback(model: Model, A: np.ndarray) -> np.ndarray:
    out = np.zeros_like(A)
    for mu in model.quantized:
        s = model.mu_slot(mu)
        out[:, s] = A[:, s]
    return out


def mean_field_step(orbs: OrbitalSet, fld: ClassicalFieldState, a_ext: Callable, j_ext: Callable, t: float,
                    dt: float, subtract_vacuum: bool = True, cfl_max: float = CFL_MAX):
    """One Strang step of the closure ``a_eff = a_ext + A``, ``j_eff = j_orbitals + j_ext``.

    ``a_ext(t)`` and ``j_ext(t)`` return ``(n_sites, n_mu)`` arrays.  Only the
    quantised components of ``A`` feed back on the orbitals; the others are
    spectators, as in the exact dynamics.
    """
    m = orbs.model
    phi = orbital_step(orbs, a_ext(t + 0.25 * dt) + _feedback(m, fld.A), 0.5 * dt, cfl_max)
    half = orbs.replace(phi)
    src = current_from_orbitals(half, subtract_vacuum) + j_ext(t + 0.5 * dt)
    ftraj = propagate_maxwell(fld, src[None], _Step(dt))
    new_fld = ClassicalFieldState(m, ftraj.A[1], ftraj.A_dot[1], fld.components)
    phi = orbital_step(half, a_ext(t + 0.75 * dt) + _feedback(m, new_fld.A), 0.5 * dt, cfl_max)
    return half.replace(phi), new_fld


@dataclass(frozen=True)
class _Step:
    dt: float
    n_steps: int = 1


def mean_field_run(orbs: OrbitalSet, fld: ClassicalFieldState, a_ext: Callable, j_ext: Callable, grid,
                   subtract_vacuum: bool = True, cfl_max: float = CFL_MAX) -> KSTrajectory:
    m = orbs.model
    times = grid.times
    js, As, Ads, aeff, energy = [], [], [], [], []
    err = orbs.orthonormality_error()

    def record(o, f, t):
        js.append(current_from_orbitals(o, subtract_vacuum))
        As.append(f.A.copy())
        Ads.append(f.A_dot.copy())
        aeff.append(a_ext(t) + _feedback(m, f.A))
        energy.append(f.energy())

    record(orbs, fld, times[0])
    for k in range(grid.n_steps):
        orbs, fld = mean_field_step(orbs, fld, a_ext, j_ext, times[k], grid.dt, subtract_vacuum, cfl_max)
        err = max(err, orbs.orthonormality_error())
        record(orbs, fld, times[k + 1])
    return KSTrajectory(times, np.array(js), np.array(As), np.array(Ads), np.array(aeff), err, np.array(energy),
                        orbs)
