"""Exact Fock-space propagation and the conjugate trajectory ``(j, A, Adot)``.

Steps use the exponential midpoint rule ``exp(-i dt H(t_k + dt/2))``.  Drive
values for a step come from a *schedule*: ``schedule(k) -> (a, j)`` with
``a`` the lower-index potentials and ``j`` the upper-index currents, each of
shape ``(n_sites, n_mu)``.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .fock import InitialConfiguration, current_matter, photon_field_ops, q_operators
from .hamiltonian import HamiltonianSet
from .model import ExternalDrive, Model, evaluate_drive

log = logging.getLogger(__name__)

Schedule = Callable[[int], tuple[np.ndarray, np.ndarray]]

LEAK_MAX = 1e-6
NORM_TOL = 1e-10


class PropagationError(RuntimeError):
    pass


class NonlinearResponseError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    t0: float = 0.0
    dt: float = 1e-3
    n_steps: int = 2000

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def t_final(self) -> float:
        return self.t0 + self.dt * self.n_steps

    def refined(self, factor: int = 2) -> TimeGrid:
        return TimeGrid(self.t0, self.dt / factor, self.n_steps * factor)


def drive_schedule(model: Model, drive: ExternalDrive, grid: TimeGrid) -> Schedule:
    def schedule(k: int):
        return evaluate_drive(model, drive, grid.t0 + (k + 0.5) * grid.dt)

    return schedule


def sampled_schedule(a_grid: np.ndarray, j_grid: np.ndarray) -> Schedule:
    """Midpoint values as averages of neighbouring grid samples."""

    def schedule(k: int):
        return 0.5 * (a_grid[k] + a_grid[k + 1]), 0.5 * (j_grid[k] + j_grid[k + 1])

    return schedule


def sample_drive(model: Model, drive: ExternalDrive, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    vals = [evaluate_drive(model, drive, t) for t in grid.times]
    return np.array([v[0] for v in vals]), np.array([v[1] for v in vals])


# --------------------------------------------------------------------------
# expectation values on ensembles, states shaped (..., dim, n_states)


def expect(op: np.ndarray, states: np.ndarray, weights: np.ndarray) -> np.ndarray:
    val = np.einsum("...ik,ij,...jk->...k", states.conj(), op, states)
    return (val @ weights).real


def expect_matter(op: np.ndarray, states: np.ndarray, weights: np.ndarray, dp: int) -> np.ndarray:
    dm = op.shape[0]
    psi = states.reshape(states.shape[:-2] + (dm, dp, states.shape[-1]))
    val = np.einsum("...apk,ab,...bpk->...k", psi.conj(), op, psi)
    return (val @ weights).real


def expect_photon(op: np.ndarray, states: np.ndarray, weights: np.ndarray, dm: int) -> np.ndarray:
    dp = op.shape[0]
    psi = states.reshape(states.shape[:-2] + (dm, dp, states.shape[-1]))
    val = np.einsum("...apk,pq,...aqk->...k", psi.conj(), op, psi)
    return (val @ weights).real


# --------------------------------------------------------------------------
# propagation


@dataclass(eq=False)
class StateTrajectory:
    grid: TimeGrid
    states: np.ndarray  # (n_steps + 1, dim, n_states)
    weights: np.ndarray
    norms: np.ndarray  # (n_steps + 1, n_states)
    leakage: np.ndarray  # (n_steps + 1,)
    leak_max: float = LEAK_MAX

    @property
    def flagged(self) -> bool:
        return bool(np.max(self.leakage) > self.leak_max)

    @property
    def max_norm_error(self) -> float:
        return float(np.max(np.abs(self.norms - 1.0)))


def leakage_of(hs: HamiltonianSet, states: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if hs.model.spec.n_oscillators == 0:
        return np.zeros(states.shape[:-2])
    return expect_photon(hs.ops.top_level_projector.astype(complex), states, weights, hs.ops.dm)


def step_unitary(H: np.ndarray, dt: float) -> np.ndarray:
    return scipy.linalg.expm(-1j * dt * H)


def propagate(hs: HamiltonianSet, config: InitialConfiguration, schedule: Schedule, grid: TimeGrid,
              method: str = "expm", leak_max: float = LEAK_MAX) -> StateTrajectory:
    """Evolve every member of the ensemble; returns all intermediate states."""
    if method not in ("expm", "krylov"):
        raise ValueError(f"unknown propagation method {method!r}")
    psi = np.array(config.states, dtype=complex)
    if psi.shape[0] != hs.model.dim:
        raise ValueError(f"state dimension {psi.shape[0]} does not match Fock dimension {hs.model.dim}")
    out = np.empty((grid.n_steps + 1,) + psi.shape, dtype=complex)
    out[0] = psi
    static = hs.static
    for k in range(grid.n_steps):
        a, j = schedule(k)
        H = static + hs.external(a, j)
        if method == "expm":
            psi = step_unitary(H, grid.dt) @ psi
        else:
            psi = scipy.sparse.linalg.expm_multiply(-1j * grid.dt * H, psi)
        norms = np.linalg.norm(psi, axis=0)
        if np.max(np.abs(norms - 1.0)) > NORM_TOL:
            raise PropagationError(f"unitarity check failed at step {k}: norm error {np.max(np.abs(norms - 1)):.2e}")
        out[k + 1] = psi
    norms = np.linalg.norm(out, axis=1)
    leak = leakage_of(hs, out, config.weights)
    traj = StateTrajectory(grid, out, config.weights, norms, leak, leak_max)
    if traj.flagged:
        log.warning("photon truncation leakage %.2e exceeds leak_max %.1e", np.max(leak), leak_max)
    return traj


def ground_state(hs: HamiltonianSet, a: np.ndarray | None = None, j: np.ndarray | None = None,
                 charge: float = 0.0) -> InitialConfiguration:
    """Lowest eigenstate of ``H`` in the given global-charge sector."""
    m = hs.model
    a = np.zeros((m.n_sites, m.n_mu)) if a is None else a
    j = np.zeros((m.n_sites, m.n_mu)) if j is None else j
    H = hs.total(a, j)
    q_m = sum(m.dx * current_matter(m, hs.ops, 0, x) for x in range(m.n_sites))
    q_diag = np.kron(np.diag(q_m).real, np.ones(hs.ops.dp))
    idx = np.flatnonzero(np.abs(q_diag - charge) < 1e-9)
    if idx.size == 0:
        raise ValueError(f"no states with charge {charge}")
    w, v = np.linalg.eigh(H[np.ix_(idx, idx)])
    if w.size > 1 and w[1] - w[0] < 1e-10:
        log.warning("ground state is degenerate (gap %.1e)", w[1] - w[0])
    psi = np.zeros(m.dim, dtype=complex)
    psi[idx] = v[:, 0]
    return InitialConfiguration.pure(psi, label="ground")


# --------------------------------------------------------------------------
# observables


@dataclass(eq=False)
class ConjugateTrajectory:
    """``j[k, x, mu]`` (upper), ``A[k, x, mu]`` and ``A_dot`` (lower index)."""

    times: np.ndarray
    j: np.ndarray
    A: np.ndarray
    A_dot: np.ndarray
    leakage: np.ndarray
    quantized: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def current_expectations(hs: HamiltonianSet, states: np.ndarray, weights: np.ndarray) -> np.ndarray:
    m = hs.model
    out = np.zeros(states.shape[:-2] + (m.n_sites, m.n_mu))
    for s, mu in enumerate(m.mu_indices):
        for x in range(m.n_sites):
            out[..., x, s] = expect_matter(current_matter(m, hs.ops, mu, x), states, weights, hs.ops.dp)
    return out


def potential_expectations(hs: HamiltonianSet, states: np.ndarray, weights: np.ndarray):
    m = hs.model
    A_op, D_op = photon_field_ops(m, hs.ops)
    A = np.zeros(states.shape[:-2] + (m.n_sites, m.n_mu))
    Ad = np.zeros_like(A)
    for mu in m.quantized:
        s = m.mu_slot(mu)
        for x in range(m.n_sites):
            A[..., x, s] = expect_photon(A_op[(x, mu)], states, weights, hs.ops.dm)
            Ad[..., x, s] = expect_photon(D_op[(x, mu)], states, weights, hs.ops.dm)
    return A, Ad


def lorenz_initial_spectators(model: Model, j0: np.ndarray, jext0: np.ndarray, A0: np.ndarray,
                              Ad0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Classical ``A_0`` data at ``t0`` with ``G = d_t A_0 - grad A_1`` and ``d_t G`` both zero."""
    A, Ad = A0.copy(), Ad0.copy()
    if 0 in model.quantized:
        return A, Ad
    s0, s1 = model.mu_slot(0), model.mu_slot(1)
    D = model.grad
    Ad[:, s0] = D @ A0[:, s1]
    L = model.wave_operator(0)
    A[:, s0] = np.linalg.solve(L, D @ Ad0[:, s1] - model.spec.e * (j0[:, s0] + jext0[:, s0]))
    return A, Ad


def observables(hs: HamiltonianSet, traj: StateTrajectory, schedule: Schedule,
                j_ext_t0: np.ndarray | None = None, spectator_init: str = "lorenz") -> ConjugateTrajectory:
    """Expectation values along a trajectory, plus classical non-quantised components.

    Non-quantised components of ``A`` are classical fields obeying the lattice
    Maxwell equation with source ``j + j_ext`` (``j_ext`` alone for a
    noninteracting system); they do not act back on the matter.
    ``spectator_init="lorenz"`` starts ``A_0`` in the state that satisfies the
    Lorenz condition and its first time derivative at ``t0``.
    """
    from .kohnsham import ClassicalFieldState, propagate_maxwell

    m = hs.model
    states, w = traj.states, traj.weights
    for k in (0, len(states) // 2, len(states) - 1):
        for s, mu in enumerate(m.mu_indices):
            val = np.einsum("ik,ij,jk->k", states[k].conj(), hs.ops.matter(current_matter(m, hs.ops, mu, 0)),
                            states[k]) @ w
            if abs(val.imag) > 1e-10:
                raise ValueError(f"imaginary current expectation {val.imag:.2e}: operator construction bug")
    j = current_expectations(hs, states, w)
    A, Ad = potential_expectations(hs, states, w)
    classical = [mu for mu in m.mu_indices if mu not in m.quantized]
    if classical:
        if j_ext_t0 is None:
            j_ext_t0 = np.zeros((m.n_sites, m.n_mu))
        # without coupling the matter current does not source the field
        j_src = j if hs.interacting else np.zeros_like(j)
        if spectator_init == "lorenz":
            a_init, ad_init = lorenz_initial_spectators(m, j_src[0], j_ext_t0, A[0], Ad[0])
        else:
            a_init, ad_init = A[0], Ad[0]
        field0 = ClassicalFieldState(m, a_init, ad_init, components=tuple(classical))
        sources = np.array([0.5 * (j_src[k] + j_src[k + 1]) + schedule(k)[1] for k in range(traj.grid.n_steps)])
        ftraj = propagate_maxwell(field0, sources, traj.grid)
        for mu in classical:
            s = m.mu_slot(mu)
            A[..., s] = ftraj.A[..., s]
            Ad[..., s] = ftraj.A_dot[..., s]
    return ConjugateTrajectory(traj.grid.times, j, A, Ad, traj.leakage, m.quantized,
                               {"mu_indices": m.mu_indices})


# --------------------------------------------------------------------------
# equation-of-motion residuals


def _first_derivative(y: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Centred difference and its one-level Richardson extrapolation (interior points)."""
    d1 = (y[3:-1] - y[1:-3]) / (2 * dt)
    d2 = (y[4:] - y[:-4]) / (4 * dt)
    return d1, (4 * d1 - d2) / 3


def _second_derivative(y: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    s1 = (y[3:-1] - 2 * y[2:-2] + y[1:-3]) / dt**2
    s2 = (y[4:] - 2 * y[2:-2] + y[:-4]) / (4 * dt**2)
    return s1, (4 * s1 - s2) / 3


@dataclass
class Residual:
    raw: np.ndarray  # max over time, per (x, mu)
    richardson: np.ndarray

    @property
    def max_raw(self) -> float:
        return float(np.max(self.raw, initial=0.0))

    @property
    def max_richardson(self) -> float:
        return float(np.max(self.richardson, initial=0.0))


def current_rate_expectations(hs: HamiltonianSet, traj: StateTrajectory, a_grid: np.ndarray,
                              q: dict | None = None) -> np.ndarray:
    """``<q_kin + q_int + n a_ext>`` at every grid time, shape ``(T, n_sites, n_mu)``."""
    m = hs.model
    q = q_operators(m, hs.ops) if q is None else q
    st, w = traj.states, traj.weights
    out = np.zeros((len(st), m.n_sites, m.n_mu))
    for s, mu in enumerate(m.mu_indices):
        for x in range(m.n_sites):
            out[:, x, s] = expect_matter(q[("q_kin", mu, x)], st, w, hs.ops.dp)
            if hs.interacting:
                out[:, x, s] += expect(q[("q_int", mu, x)], st, w)
            for s2, nu in enumerate(m.mu_indices):
                n_op = q[("n", mu, nu, x)]
                if np.any(n_op != 0):
                    out[:, x, s] += a_grid[:, x, s2] * expect_matter(n_op, st, w, hs.ops.dp)
    return out


def eom_residual_current(hs: HamiltonianSet, traj: StateTrajectory, obs: ConjugateTrajectory,
                         a_grid: np.ndarray, q: dict | None = None) -> Residual:
    """``max_t |d<j>/dt - <q_kin + q_int + n a_ext>|`` per ``(x, mu)``."""
    rate = current_rate_expectations(hs, traj, a_grid, q)[2:-2]
    d1, rich = _first_derivative(obs.j, obs.dt)
    return Residual(np.max(np.abs(d1 - rate), axis=0), np.max(np.abs(rich - rate), axis=0))


def eom_residual_potential(model: Model, obs: ConjugateTrajectory, j_ext_grid: np.ndarray) -> Residual:
    """``max_t |d^2<A_mu>/dt^2 - (L <A_mu> - e P (j^mu + j_ext^mu))|`` for quantised ``mu``."""
    raw = np.zeros((model.n_sites, model.n_mu))
    rich = np.zeros_like(raw)
    e = model.spec.e
    for mu in model.quantized:
        s = model.mu_slot(mu)
        L, P = model.wave_operator(mu), model.projector(mu)
        A = obs.A[:, :, s]
        rhs = (A @ L.T - e * (obs.j[:, :, s] + j_ext_grid[:, :, s]) @ P.T)[2:-2]
        s1, r1 = _second_derivative(A, obs.dt)
        raw[:, s] = np.max(np.abs(s1 - rhs), axis=0)
        rich[:, s] = np.max(np.abs(r1 - rhs), axis=0)
    return Residual(raw, rich)


def continuity_residual(model: Model, obs: ConjugateTrajectory) -> np.ndarray:
    """``d_t j^0 + grad j^1`` at interior times (Richardson-extrapolated derivative)."""
    _, dj0 = _first_derivative(obs.j[:, :, model.mu_slot(0)], obs.dt)
    return dj0 + obs.j[2:-2, :, model.mu_slot(1)] @ model.grad.T


def gupta_bleuler_residual(model: Model, obs: ConjugateTrajectory) -> np.ndarray:
    """``d^mu <A_mu> = d_t A_0 - grad A_1`` at every grid time."""
    return obs.A_dot[:, :, model.mu_slot(0)] - obs.A[:, :, model.mu_slot(1)] @ model.grad.T


def global_charge(model: Model, obs: ConjugateTrajectory) -> np.ndarray:
    return model.dx * obs.j[:, :, model.mu_slot(0)].sum(axis=1)


# --------------------------------------------------------------------------
# linear response


@dataclass
class KernelResult:
    kernel: np.ndarray  # (T, n_sites, n_mu): delta j^mu(x, t_k) / delta a_nu(y, t')
    kernel_half: np.ndarray
    probe: tuple[int, int, int]  # (nu, y, step of t')
    eps: float
    linearity_error: float
    causal_violation: float


def probe_schedule(base: Schedule, model: Model, nu: int, y: int, k_probe: int, eps: float) -> Schedule:
    s = model.mu_slot(nu)

    def schedule(k: int):
        a, j = base(k)
        if k == k_probe:
            a = a.copy()
            a[y, s] += eps
        return a, j

    return schedule


def response_kernel(hs: HamiltonianSet, config: InitialConfiguration, base: Schedule, grid: TimeGrid,
                    probe: tuple[int, int, int], eps: float = 1e-5, lin_tol: float = 5e-3) -> KernelResult:
    """Finite-difference response of ``j`` to a one-step pulse in ``a_nu(y)`` at step ``k'``."""
    nu, y, kp = probe
    if not 0 <= kp < grid.n_steps:
        raise ValueError("probe step outside the grid")
    m = hs.model

    def currents(sched):
        tr = propagate(hs, config, sched, grid)
        return current_expectations(hs, tr.states, tr.weights)

    j0 = currents(base)
    j1 = currents(probe_schedule(base, m, nu, y, kp, eps))
    j2 = currents(probe_schedule(base, m, nu, y, kp, eps / 2))
    kern = (j1 - j0) / eps
    kern_half = (j2 - j0) / (eps / 2)
    after = slice(kp + 1, None)
    scale = np.max(np.abs(kern[after]), initial=0.0)
    lin = float(np.max(np.abs(kern[after] - kern_half[after]), initial=0.0) / scale) if scale > 0 else 0.0
    if lin > lin_tol:
        raise NonlinearResponseError(f"kernel(eps) and kernel(eps/2) differ by {lin:.2%}; reduce eps")
    causal = float(np.max(np.abs(kern[: kp + 1]), initial=0.0))
    return KernelResult(kern, kern_half, probe, eps, lin, causal)


def leading_response(hs: HamiltonianSet, state_states: np.ndarray, weights: np.ndarray, nu: int, y: int,
                     dt: float, q: dict | None = None) -> np.ndarray:
    """Short-time prediction of ``delta j(t' + dt) / eps`` for a one-step pulse.

    ``dt <n^{mu nu}(y)> delta_xy + dt^2/2 <i[dx e j^nu(y), d_t j^mu(x)]>``
    evaluated on the state at ``t'``; the first term is absent when ``n``
    vanishes identically.
    """
    m = hs.model
    q = q_operators(m, hs.ops) if q is None else q
    op_c = hs.a_ops[(nu, y)]
    pred = np.zeros((m.n_sites, m.n_mu))
    dp = hs.ops.dp
    for s, mu in enumerate(m.mu_indices):
        for x in range(m.n_sites):
            if x == y:
                pred[x, s] += dt * expect_matter(q[("n", mu, nu, x)], state_states, weights, dp)
            rate = hs.ops.matter(q[("q_kin", mu, x)]) + (q[("q_int", mu, x)] if hs.interacting else 0)
            full_c = hs.ops.matter(op_c)
            pred[x, s] += 0.5 * dt**2 * expect(1j * (full_c @ rate - rate @ full_c), state_states, weights)
    return pred
