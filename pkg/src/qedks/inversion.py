"""Construction of the effective fields ``(a_eff, j_eff)`` for the noninteracting system.

Rows of the defining equation are the currents ``j^mu(x)``.  For each row the
construction uses the lowest time derivative of ``<j>`` in which ``a_eff``
appears.  With ``X_r = j_r`` (level 1) or ``X_r = i[H_M, j_r]`` (level 2) the
equation at time ``t`` reads

    sum_c <i[O_c, X_r]>' a_c = <i[H(t), X_r]>_target - <i[H_M, X_r]>'

where ``O_c = dx e j^mu(y)`` is the generator multiplying ``a_mu(y)`` and
primes denote the noninteracting state.  For 4-spinors the level-1 Jacobian
is the familiar ``<n^{mu nu}>``; for 2-spinors ``n`` vanishes identically and
every row is level 2.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .dynamics import (
    ConjugateTrajectory,
    StateTrajectory,
    TimeGrid,
    observables,
    sampled_schedule,
)
from .fock import (
    FockOperators,
    InitialConfiguration,
    coherent_photons,
    current_matter,
    product_state,
    slater_matter,
)
from .hamiltonian import HamiltonianSet, single_particle_dirac
from .model import ExternalDrive, Model, evaluate_drive

log = logging.getLogger(__name__)

TOL_INIT = 1e-9
TOL_FP = 1e-10
TOL_MATCH = 1e-6
N_FLOOR = 1e-8
L_MAX_CAP = 4
OP_TOL = 1e-12


class InitialMismatchError(ValueError):
    pass


class SingularInversionError(np.linalg.LinAlgError):
    pass


class ConvergenceError(RuntimeError):
    pass


class TaylorDivergenceWarning(UserWarning):
    pass


def _icomm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 1j * (a @ b - b @ a)


def reduced_matter(states: np.ndarray, weights: np.ndarray, dm: int, dp: int) -> np.ndarray:
    """Matter reduced density matrix; ``states`` is ``(..., dim, n)``."""
    psi = states.reshape(states.shape[:-2] + (dm, dp, states.shape[-1]))
    return np.einsum("...apk,...bpk,k->...ab", psi, psi.conj(), weights)


def _trace(rho: np.ndarray, ops: np.ndarray) -> np.ndarray:
    """``tr(rho X)`` for a stack ``ops[..., a, b]``; real part."""
    return np.einsum("ab,...ba->...", rho, ops).real


# --------------------------------------------------------------------------
# the defining equation


@dataclass(eq=False)
class DefiningEquation:
    model: Model
    ops: FockOperators
    rows: list[tuple[int, int]]  # (mu, x)
    channels: list[tuple[int, int]]  # (mu, y)
    levels: np.ndarray
    X: np.ndarray  # (n_rows, dm, dm) matter operators
    K: np.ndarray  # (n_rows, n_ch, dm, dm): i[O_c, X_r]
    F: np.ndarray  # (n_rows, dm, dm): i[H_M, X_r]
    G: list | None = field(default=None, repr=False)  # full space i[H_int, X_r] of the target

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def channel_slot(self, c: int) -> tuple[int, int]:
        mu, y = self.channels[c]
        return y, self.model.mu_slot(mu)

    def to_grid(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros((self.model.n_sites, self.model.n_mu))
        for c, v in enumerate(vec):
            out[self.channel_slot(c)] = v
        return out

    def from_grid(self, arr: np.ndarray) -> np.ndarray:
        return np.array([arr[self.channel_slot(c)] for c in range(self.n_channels)])

    def rows_from_grid(self, arr: np.ndarray) -> np.ndarray:
        m = self.model
        return np.array([arr[..., x, m.mu_slot(mu)] for mu, x in self.rows]).T

    def jacobian(self, rho_m: np.ndarray) -> np.ndarray:
        return _trace(rho_m, self.K)

    def free_rate(self, rho_m: np.ndarray) -> np.ndarray:
        return _trace(rho_m, self.F)

    def x_values(self, rho_m: np.ndarray) -> np.ndarray:
        return _trace(rho_m, self.X)

    def target_rate(self, states: np.ndarray, weights: np.ndarray, a_ext: np.ndarray) -> np.ndarray:
        """``<i[H(t), X_r]>`` on the target state; ``states`` is ``(dim, n)``."""
        rho = reduced_matter(states, weights, self.ops.dm, self.ops.dp)
        out = self.free_rate(rho) + self.jacobian(rho) @ self.from_grid(a_ext)
        if self.G is not None:
            for r, g in enumerate(self.G):
                if g is not None:
                    out[r] += float(np.einsum("ik,ij,jk,k->", states.conj(), g, states, weights).real)
        return out

    def degenerate_pattern(self) -> dict:
        """Rows per derivative level and channels that never enter the equation."""
        unused = [self.channels[c] for c in range(self.n_channels)
                  if np.max(np.abs(self.K[:, c]), initial=0.0) < OP_TOL]
        return {
            "level1_rows": [self.rows[r] for r in range(self.n_rows) if self.levels[r] == 1],
            "level2_rows": [self.rows[r] for r in range(self.n_rows) if self.levels[r] == 2],
            "inert_channels": unused,
        }


def build_defining_equation(model: Model, hs_ks: HamiltonianSet, hs_target: HamiltonianSet | None = None,
                            ) -> DefiningEquation:
    ops = hs_ks.ops
    chans = list(hs_ks.a_ops)
    rows = [(mu, x) for mu in model.mu_indices for x in range(model.n_sites)]
    H_M = hs_ks.H_M
    X, K, F, levels = [], [], [], []
    for mu, x in rows:
        j = current_matter(model, ops, mu, x)
        first = [_icomm(hs_ks.a_ops[c], j) for c in chans]
        if max(np.max(np.abs(k)) for k in first) > OP_TOL:
            lvl, xr, kr = 1, j, first
        else:
            lvl, xr = 2, _icomm(H_M, j)
            kr = [_icomm(hs_ks.a_ops[c], xr) for c in chans]
        levels.append(lvl)
        X.append(xr)
        K.append(kr)
        F.append(_icomm(H_M, xr))
    G = None
    if hs_target is not None and hs_target.interacting and np.any(hs_target.H_int):
        G = []
        for xr in X:
            full = ops.matter(xr)
            g = _icomm(hs_target.H_int, full)
            G.append(g if np.max(np.abs(g)) > OP_TOL else None)
    return DefiningEquation(model, ops, rows, chans, np.array(levels), np.array(X), np.array(K), np.array(F), G)


def solve_channels(J: np.ndarray, rhs: np.ndarray, gauge: np.ndarray, n_floor: float = N_FLOOR,
                   ) -> tuple[np.ndarray, int, float]:
    """Least-squares solve on the range of ``J``; null directions taken from ``gauge``.

    Returns the solution, the null-space dimension and the condition number of
    the retained block.
    """
    U, s, Vt = np.linalg.svd(J)
    if s.size == 0 or s[0] <= 0:
        raise SingularInversionError("defining equation has no non-degenerate block")
    keep = s > n_floor * s[0]
    Vk = Vt[keep]
    a = Vk.T @ ((U[:, keep].T @ rhs) / s[keep])
    a += gauge - Vk.T @ (Vk @ gauge)
    return a, int(J.shape[1] - keep.sum()), float(s[0] / s[keep][-1])


# --------------------------------------------------------------------------
# target record


@dataclass(eq=False)
class TargetRecord:
    """Stored target-run data on the grid; ``T`` and ``Xv`` are per defining-equation row."""

    grid: TimeGrid
    j: np.ndarray
    A: np.ndarray
    A_dot: np.ndarray
    T: np.ndarray  # (n_t, n_rows): <i[H(t), X_r]>
    Xv: np.ndarray  # (n_t, n_rows): <X_r>
    a_ext: np.ndarray
    j_ext: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.grid.times


def record_target(deq: DefiningEquation, traj: StateTrajectory, obs: ConjugateTrajectory, a_grid: np.ndarray,
                  j_grid: np.ndarray) -> TargetRecord:
    ops = deq.ops
    rho = reduced_matter(traj.states, traj.weights, ops.dm, ops.dp)
    T = np.array([deq.target_rate(traj.states[k], traj.weights, a_grid[k]) for k in range(len(traj.states))])
    Xv = np.array([deq.x_values(r) for r in rho])
    return TargetRecord(traj.grid, obs.j, obs.A, obs.A_dot, T, Xv, a_grid, j_grid)


def jeff_construct(j: np.ndarray, j_ext: np.ndarray) -> np.ndarray:
    j, j_ext = np.asarray(j, dtype=float), np.asarray(j_ext, dtype=float)
    if j.shape != j_ext.shape:
        raise ValueError(f"shape mismatch {j.shape} vs {j_ext.shape}")
    return j + j_ext


# --------------------------------------------------------------------------
# initial configuration


@dataclass
class InitialMatch:
    j: float
    A: float
    A_dot: float
    rate: float  # level-2 rows: mismatch of d<j>/dt, the first derivative fixed by the state
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.j, self.A, self.A_dot, self.rate) <= self.tol

    def worst(self) -> str:
        return max(("j", "A", "A_dot", "rate"), key=lambda k: getattr(self, k))


def initial_moments(hs: HamiltonianSet, deq: DefiningEquation, config: InitialConfiguration):
    from .dynamics import current_expectations, potential_expectations

    j = current_expectations(hs, config.states, config.weights)
    A, Ad = potential_expectations(hs, config.states, config.weights)
    rho = reduced_matter(config.states, config.weights, hs.ops.dm, hs.ops.dp)
    return j, A, Ad, deq.x_values(rho)


def match_initial_configuration(target: TargetRecord, deq: DefiningEquation, hs_ks: HamiltonianSet,
                                config: InitialConfiguration, tol_init: float = TOL_INIT,
                                raise_on_fail: bool = True) -> InitialMatch:
    """Compare ``j``, ``A``, ``A_dot`` and (for level-2 rows) ``<X_r>`` at ``t0``."""
    m = deq.model
    j, A, Ad, xv = initial_moments(hs_ks, deq, config)
    q = [m.mu_slot(mu) for mu in m.quantized]
    lvl2 = deq.levels == 2
    rep = InitialMatch(
        j=float(np.max(np.abs(j - target.j[0]))),
        A=float(np.max(np.abs(A[:, q] - target.A[0][:, q]), initial=0.0)),
        A_dot=float(np.max(np.abs(Ad[:, q] - target.A_dot[0][:, q]), initial=0.0)),
        rate=float(np.max(np.abs(xv[lvl2] - target.Xv[0][lvl2]), initial=0.0)),
        tol=tol_init,
    )
    if raise_on_fail and not rep.passed:
        k = rep.worst()
        raise InitialMismatchError(f"initial configuration mismatch in {k}: {getattr(rep, k):.3e} > {tol_init:.1e}")
    return rep


def _bloch_orbital(x: float, y: float) -> np.ndarray:
    """Unit spinor with <sigma_x> = x, <sigma_y> = y and <sigma_z> <= 0."""
    z = -math.sqrt(max(0.0, 1.0 - x * x - y * y))
    # |n> ~ (cos(th/2), e^{i ph} sin(th/2))
    th = math.acos(max(-1.0, min(1.0, z)))
    ph = math.atan2(y, x)
    return np.array([math.cos(th / 2), np.exp(1j * ph) * math.sin(th / 2)])


def _match_coherent(model: Model, ops: FockOperators, A: np.ndarray, Ad: np.ndarray) -> np.ndarray:
    """Truncated coherent state whose ``<A>, <A_dot>`` equal the given values on the modes."""
    from .dynamics import expect_photon
    from .fock import photon_field_ops
    from .kohnsham import ClassicalFieldState, coherent_amplitudes

    guess = coherent_amplitudes(ClassicalFieldState(model, A, Ad))
    if not np.any(guess):
        return coherent_photons(model, guess)
    A_op, D_op = photon_field_ops(model, ops)
    keys = [(x, mu) for mu in model.quantized for x in range(model.n_sites)]
    want = np.concatenate([[A[x, model.mu_slot(mu)] for x, mu in keys], [Ad[x, model.mu_slot(mu)] for x, mu in keys]])

    def resid(p):
        al = p[: guess.size] + 1j * p[guess.size:]
        v = coherent_photons(model, al)[:, None]
        got = [expect_photon(A_op[k], v, np.ones(1), 1) for k in keys]
        got += [expect_photon(D_op[k], v, np.ones(1), 1) for k in keys]
        return np.array(got) - want

    sol = scipy.optimize.least_squares(resid, np.concatenate([guess.real, guess.imag]), xtol=1e-15, ftol=1e-15,
                                       gtol=1e-15)
    return coherent_photons(model, sol.x[: guess.size] + 1j * sol.x[guess.size:])


def product_matched_configuration(hs_ks: HamiltonianSet, deq: DefiningEquation, target: TargetRecord,
                                  ) -> InitialConfiguration:
    """Factorised ``Slater x coherent`` state with the target's ``j, A, A_dot`` and rates at ``t0``.

    Closed form for 2-spinors without hopping (one particle per site, Bloch
    vector fixed by ``j^1`` and the rate row); otherwise a least-squares fit
    over orthonormal orbitals.
    """
    m, ops = deq.model, deq.ops
    photons = _match_coherent(m, ops, target.A[0], target.A_dot[0])
    j0, xv0 = target.j[0], target.Xv[0]
    no_hop = not np.any(m.grad)
    if m.spec.spinor_dim == 2 and no_hop and np.allclose(j0[:, m.mu_slot(0)], 0.0, atol=1e-12):
        orbs = np.zeros((ops.n_f, m.n_sites), dtype=complex)
        # with D = 0: j^1 = <sigma_x>/dx and X = i[H_M, j^1] = -2 m0 <sigma_y>/dx per site
        for x in range(m.n_sites):
            sx = j0[x, m.mu_slot(1)] * m.dx
            r = deq.rows.index((1, x))
            sy = -xv0[r] * m.dx / (2 * m.spec.m0) if m.spec.m0 else 0.0
            if sx * sx + sy * sy > 1:
                raise InitialMismatchError(f"site {x}: target moments not representable by one orbital")
            orbs[2 * x: 2 * x + 2, x] = _bloch_orbital(sx, sy)
        matter = slater_matter(m, ops, orbs)
    else:
        matter = _fit_slater(hs_ks, deq, j0, xv0)
    return InitialConfiguration.pure(product_state(matter, photons), label="product_matched")


def _fit_slater(hs_ks: HamiltonianSet, deq: DefiningEquation, j0: np.ndarray, xv0: np.ndarray) -> np.ndarray:
    m, ops = deq.model, deq.ops
    w, V = np.linalg.eigh(single_particle_dirac(m))
    n_occ = int(np.sum(w < 0)) + int(round(m.dx * j0[:, m.mu_slot(0)].sum()))
    nf = ops.n_f
    lvl2 = deq.levels == 2

    def orbitals(p):
        Hm = np.zeros((nf, nf), dtype=complex)
        iu = np.triu_indices(nf, 1)
        Hm[iu] = p[: len(iu[0])] + 1j * p[len(iu[0]): 2 * len(iu[0])]
        Hm = Hm + Hm.conj().T + np.diag(p[2 * len(iu[0]):])
        return (scipy.linalg.expm(1j * Hm) @ V)[:, :n_occ]

    def resid(p):
        mat = slater_matter(m, ops, orbitals(p))
        rho = np.outer(mat, mat.conj())
        j = np.array([[np.trace(rho @ current_matter(m, ops, mu, x)).real for mu in m.mu_indices]
                      for x in range(m.n_sites)])
        return np.concatenate([(j - j0).ravel(), (deq.x_values(rho) - xv0)[lvl2]])

    n_par = nf * nf
    sol = scipy.optimize.least_squares(resid, np.zeros(n_par), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    worst = float(np.max(np.abs(sol.fun)))
    if worst > TOL_INIT:
        raise InitialMismatchError(f"no Slater determinant matches the target moments (residual {worst:.2e})")
    return slater_matter(m, ops, orbitals(sol.x))


# --------------------------------------------------------------------------
# order zero


def gauge_seed(model: Model, target: TargetRecord, shift: float = 0.0) -> np.ndarray:
    """Zero-component seed ``a_ext^0 + A_0`` at ``t0`` plus an optional constant."""
    s0 = model.mu_slot(0)
    seed = np.zeros((model.n_sites, model.n_mu))
    seed[:, s0] = target.a_ext[0][:, s0] + target.A[0][:, s0] + shift
    return seed


def aeff_order0(deq: DefiningEquation, target: TargetRecord, config_ks: InitialConfiguration,
                seed: np.ndarray | None = None, n_floor: float = N_FLOOR) -> tuple[np.ndarray, float]:
    """``a_eff(t0)`` from the defining equation; returns the field and the condition number."""
    ops = deq.ops
    rho = reduced_matter(config_ks.states, config_ks.weights, ops.dm, ops.dp)
    J = deq.jacobian(rho)
    rhs = target.T[0] - deq.free_rate(rho)
    seed = np.zeros((deq.model.n_sites, deq.model.n_mu)) if seed is None else seed
    a, _, cond = solve_channels(J, rhs, deq.from_grid(seed), n_floor)
    _check_floor(deq, J, n_floor)
    return deq.to_grid(a), cond


def _check_floor(deq: DefiningEquation, J: np.ndarray, n_floor: float) -> None:
    """Every spatial channel that enters the equation must keep a usable diagonal weight."""
    for c, (mu, y) in enumerate(deq.channels):
        if mu == 0 or np.max(np.abs(deq.K[:, c]), initial=0.0) < OP_TOL:
            continue
        if np.max(np.abs(J[:, c])) < n_floor:
            raise SingularInversionError(f"defining equation singular at site {y}, component {mu}")


# --------------------------------------------------------------------------
# fixed-point time marching


@dataclass(eq=False)
class EffectiveFields:
    times: np.ndarray
    a_eff: np.ndarray  # (T, n_sites, n_mu)
    j_eff: np.ndarray
    gauge_meta: dict
    iterations: np.ndarray  # per step
    residuals: np.ndarray  # final ||delta a|| per step
    theta_levels: np.ndarray  # damping halvings used per step
    null_dim: np.ndarray
    condition: np.ndarray


@dataclass(eq=False)
class InversionResult:
    fields: EffectiveFields
    ks_traj: StateTrajectory
    ks_obs: ConjugateTrajectory

    def reproduction_error(self, target: TargetRecord) -> dict:
        mu_idx = list(self.ks_obs.meta["mu_indices"])
        slots = [mu_idx.index(mu) for mu in self.ks_obs.quantized]
        dA = np.abs(self.ks_obs.A[..., slots] - target.A[..., slots]) if slots else np.zeros(1)
        return {
            "j": float(np.max(np.abs(self.ks_obs.j - target.j))),
            "A": float(np.max(dA, initial=0.0)),
            "A_full": float(np.max(np.abs(self.ks_obs.A - target.A))),
        }


def fixed_point_invert(deq: DefiningEquation, hs_ks: HamiltonianSet, target: TargetRecord,
                       config_ks: InitialConfiguration, *, seed_shift: float = 0.0, theta: float = 0.7,
                       tol_fp: float = TOL_FP, max_iter: int = 200, max_halvings: int = 5,
                       n_floor: float = N_FLOOR, feedback: tuple[float, float] = (0.0, 0.0),
                       predictor: str = "linear", check_initial: bool = True, tol_init: float = TOL_INIT,
                       ) -> InversionResult:
    """March the noninteracting system along the grid, solving for ``a_eff`` at every step.

    ``feedback = (kp, kd)`` adds ``kp (j - j') + kd (<X> - <X>')`` to level-2
    rows (``kp (j - j')`` to level-1 rows).  Both terms vanish on the exact
    solution and only damp discretisation drift.  ``predictor`` is ``"linear"``
    (extrapolate two steps) or ``"constant"``.
    """
    if hs_ks.interacting and np.any(hs_ks.H_int):
        raise ValueError("the Kohn-Sham Hamiltonian must be noninteracting")
    if predictor not in ("linear", "constant"):
        raise ValueError(f"unknown predictor {predictor!r}")
    m, ops = deq.model, deq.ops
    grid = target.grid
    dt, n = grid.dt, grid.n_steps
    if check_initial:
        match_initial_configuration(target, deq, hs_ks, config_ks, tol_init)
    j_eff = jeff_construct(target.j, target.j_ext)
    seed = gauge_seed(m, target, seed_shift)
    a0, cond0 = aeff_order0(deq, target, config_ks, seed, n_floor)
    kp, kd = feedback
    rows_j = deq.rows_from_grid(target.j)
    lvl2 = deq.levels == 2
    ch_a0 = [c for c, (mu, _) in enumerate(deq.channels) if mu == 0]
    ch_a1 = {y: c for c, (mu, y) in enumerate(deq.channels) if mu == 1}

    a_hist = np.zeros((n + 1, deq.n_channels))
    a_hist[0] = deq.from_grid(a0)
    states = np.empty((n + 1,) + config_ks.states.shape, dtype=complex)
    states[0] = config_ks.states
    iters, resid, halv, nulls = np.zeros(n, int), np.zeros(n), np.zeros(n, int), np.zeros(n + 1, int)
    conds = np.zeros(n + 1)
    conds[0] = cond0
    gauge = deq.from_grid(seed)
    static = hs_ks.static
    w = config_ks.weights

    def lorenz_step(g, a_prev, a_new):
        g = g.copy()
        if ch_a0 and ch_a1:
            a1p = np.array([a_prev[ch_a1[y]] for y in range(m.n_sites)])
            a1n = np.array([a_new[ch_a1[y]] for y in range(m.n_sites)])
            grad = m.grad @ (0.5 * (a1p + a1n))
            for c in ch_a0:
                g[c] += dt * grad[deq.channels[c][1]]
        return g

    for k in range(n):
        jm = 0.5 * (j_eff[k] + j_eff[k + 1])
        if predictor == "linear" and k >= 1:
            guess = 2 * a_hist[k] - a_hist[k - 1]
        else:
            guess = a_hist[k].copy()
        converged = False
        for level in range(max_halvings + 1):
            th = theta / 2**level
            a = guess.copy()
            for it in range(1, max_iter + 1):
                H = static + hs_ks.external(deq.to_grid(0.5 * (a_hist[k] + a)), jm)
                psi = scipy.linalg.expm(-1j * dt * H) @ states[k]
                rho = reduced_matter(psi, w, ops.dm, ops.dp)
                J = deq.jacobian(rho)
                rhs = target.T[k + 1] - deq.free_rate(rho)
                if kp or kd:
                    jp = deq.x_values(rho)  # <X>' for level-2 rows, <j>' for level-1 rows
                    cur = _row_currents(deq, rho)
                    rhs = rhs + kp * (rows_j[k + 1] - cur)
                    rhs[lvl2] += kd * (target.Xv[k + 1][lvl2] - jp[lvl2])
                g = lorenz_step(gauge, a_hist[k], a)
                a_new, nd, cond = solve_channels(J, rhs, g, n_floor)
                delta = float(np.max(np.abs(a_new - a)))
                a = a + th * (a_new - a)
                if delta <= tol_fp:
                    a = a_new
                    converged = True
                    break
            if converged:
                break
            log.info("step %d: fixed point not converged with theta=%.3f, halving", k, th)
        if not converged:
            raise ConvergenceError(f"fixed point failed at step {k} (t={grid.t0 + (k + 1) * dt:.4f}): "
                                   f"last |delta a| = {delta:.2e} after {max_halvings} halvings")
        # final state for the accepted field
        H = static + hs_ks.external(deq.to_grid(0.5 * (a_hist[k] + a)), jm)
        states[k + 1] = scipy.linalg.expm(-1j * dt * H) @ states[k]
        gauge = lorenz_step(gauge, a_hist[k], a)
        a_hist[k + 1] = a
        iters[k], resid[k], halv[k], nulls[k + 1], conds[k + 1] = it, delta, level, nd, cond
    a_grid = np.array([deq.to_grid(v) for v in a_hist])
    meta = {
        "a0_seed": seed[:, m.mu_slot(0)].tolist(),
        "seed_shift": seed_shift,
        "completion": "discrete Lorenz: d_t a_0 = grad a_1 (trapezoid), null-space projected",
        "pattern": {k: [list(v) for v in vals] for k, vals in deq.degenerate_pattern().items()},
    }
    fields = EffectiveFields(grid.times, a_grid, j_eff, meta, iters, resid, halv, nulls, conds)
    from .dynamics import leakage_of

    norms = np.linalg.norm(states, axis=1)
    ks_traj = StateTrajectory(grid, states, w, norms, leakage_of(hs_ks, states, w))
    sched = sampled_schedule(a_grid, j_eff)
    ks_obs = observables(hs_ks, ks_traj, sched, j_eff[0])
    return InversionResult(fields, ks_traj, ks_obs)


def _row_currents(deq: DefiningEquation, rho: np.ndarray) -> np.ndarray:
    m, ops = deq.model, deq.ops
    return np.array([np.trace(rho @ current_matter(m, ops, mu, x)).real for mu, x in deq.rows])


# --------------------------------------------------------------------------
# Taylor construction at t0


def _state_series(H_terms: list[np.ndarray], psi0: np.ndarray, order: int) -> list[np.ndarray]:
    """Taylor coefficients of ``psi(t0 + tau)`` for ``H(t0 + tau) = sum_p H_p tau^p``."""
    out = [psi0]
    for k in range(order):
        acc = np.zeros_like(psi0)
        for p in range(min(k, len(H_terms) - 1) + 1):
            acc = acc + H_terms[p] @ out[k - p]
        out.append(-1j / (k + 1) * acc)
    return out


def _expect_series(psi: list[np.ndarray], X: np.ndarray, weights: np.ndarray, order: int) -> np.ndarray:
    """Taylor coefficients (derivative / n!) of ``<X>`` up to ``order``."""
    out = np.zeros(order + 1)
    for n in range(order + 1):
        out[n] = sum(np.einsum("ik,ij,jk,k->", psi[p].conj(), X, psi[n - p], weights).real for p in range(n + 1))
    return out


@dataclass(eq=False)
class TaylorTable:
    """``a_coef[l] = a_eff^{(l)}(t0) / l!`` and ``j_coef[l]`` likewise, each ``(n_sites, n_mu)``."""

    a_coef: np.ndarray
    j_coef: np.ndarray
    jacobians: list[np.ndarray]  # per order, scaled to derivative units
    radius: float
    residual: np.ndarray  # per order, max mismatch of matched derivatives
    warnings: list[str] = field(default_factory=list)

    @property
    def l_max(self) -> int:
        return len(self.a_coef) - 1

    def derivative(self, l: int) -> np.ndarray:
        return math.factorial(l) * self.a_coef[l]

    def j_derivative(self, l: int) -> np.ndarray:
        return math.factorial(l) * self.j_coef[l]


def _drive_terms(model: Model, drive: ExternalDrive, t0: float, order: int):
    a, j = [], []
    for p in range(order + 1):
        ap, jp = evaluate_drive(model, drive, t0, p)
        a.append(ap / math.factorial(p))
        j.append(jp / math.factorial(p))
    return a, j


def taylor_construct(deq: DefiningEquation, hs_target: HamiltonianSet, hs_ks: HamiltonianSet,
                     drive: ExternalDrive, config: InitialConfiguration, config_ks: InitialConfiguration,
                     l_max: int = 2, seed: np.ndarray | None = None, n_floor: float = N_FLOOR,
                     horizon: float | None = None, l_cap: int = L_MAX_CAP) -> TaylorTable:
    """Order-by-order Taylor coefficients of ``a_eff`` and ``j_eff`` at the drive's ``t0``.

    Row ``r`` of level ``s_r`` is matched at Taylor order ``l + s_r`` of
    ``<j_r>`` when solving for ``a^{(l)}``; zero components follow from the
    discrete Lorenz condition ``l a0_l = grad a1_{l-1}``.
    """
    if l_max > l_cap:
        raise ValueError(f"l_max={l_max} exceeds the cap {l_cap}")
    m, ops = deq.model, deq.ops
    t0 = drive.t0
    top = l_max + int(deq.levels.max())
    a_drv, j_drv = _drive_terms(m, drive, t0, top)
    H_t = [hs_target.static + hs_target.external(a_drv[0], j_drv[0])]
    H_t += [hs_target.external(a_drv[p], j_drv[p]) for p in range(1, top + 1)]
    psi_t = _state_series(H_t, config.states, top)
    j_ops = {(mu, x): ops.matter(current_matter(m, ops, mu, x)) for mu in m.mu_indices for x in range(m.n_sites)}
    j_ser = {key: _expect_series(psi_t, op, config.weights, top) for key, op in j_ops.items()}
    j_coef = np.zeros((top + 1, m.n_sites, m.n_mu))
    for (mu, x), ser in j_ser.items():
        j_coef[:, x, m.mu_slot(mu)] = ser
    jeff_coef = j_coef + np.array(j_drv)
    rows_full = [j_ops[(mu, x)] for mu, x in deq.rows]
    target_rows = np.array([j_ser[(mu, x)] for mu, x in deq.rows])  # (n_rows, top+1)

    seed = np.zeros((m.n_sites, m.n_mu)) if seed is None else seed
    alphas: list[np.ndarray] = []
    jac, res = [], []

    def ks_rows(al_list):
        H = [hs_ks.static + hs_ks.external(deq.to_grid(al_list[0]), jeff_coef[0])]
        H += [hs_ks.external(deq.to_grid(al_list[p]) if p < len(al_list) else np.zeros_like(seed), jeff_coef[p])
              for p in range(1, top + 1)]
        psi = _state_series(H, config_ks.states, top)
        return np.array([_expect_series(psi, X, config_ks.weights, top) for X in rows_full])

    order_idx = deq.levels
    for l in range(l_max + 1):

        def mismatch(al, l=l):
            ser = ks_rows(alphas + [al])
            return np.array([target_rows[r, l + order_idx[r]] - ser[r, l + order_idx[r]] for r in range(deq.n_rows)])

        r0 = mismatch(np.zeros(deq.n_channels))
        Jl = np.zeros((deq.n_rows, deq.n_channels))
        for c in range(deq.n_channels):
            e = np.zeros(deq.n_channels)
            e[c] = 1.0
            Jl[:, c] = -(mismatch(e) - mismatch(-e)) / 2
        if l == 0:
            g = deq.from_grid(seed)
        else:
            g = np.zeros(deq.n_channels)
            prev = deq.to_grid(alphas[-1])
            g0 = m.grad @ prev[:, m.mu_slot(1)] / l if 1 in m.mu_indices else np.zeros(m.n_sites)
            gg = np.zeros((m.n_sites, m.n_mu))
            gg[:, m.mu_slot(0)] = g0
            g = deq.from_grid(gg)
        al, _, _ = solve_channels(Jl, r0, g, n_floor)
        for _ in range(3):  # Newton refinement for the weak nonlinearity at low orders
            rr = mismatch(al)
            if np.max(np.abs(rr)) < 1e-14:
                break
            step, _, _ = solve_channels(Jl, rr, np.zeros(deq.n_channels), n_floor)
            al = al + step
        alphas.append(al)
        # derivative units: d a^{(l)} -> d^{(l+s)} <j>
        scale = np.array([math.factorial(l + s) / math.factorial(l) for s in order_idx])
        jac.append(Jl * scale[:, None])
        res.append(float(np.max(np.abs(mismatch(al)))) * max(scale))

    a_coef = np.array([deq.to_grid(v) for v in alphas])
    radius = _radius_estimate(a_coef)
    notes = []
    if horizon is not None and radius < horizon:
        msg = f"Taylor coefficients grow faster than l! a^l with radius estimate {radius:.3g} < horizon {horizon:.3g}"
        warnings.warn(msg, TaylorDivergenceWarning, stacklevel=2)
        notes.append(msg)
    return TaylorTable(a_coef, jeff_coef[: l_max + 1], jac, radius, np.array(res), notes)


def _radius_estimate(coef: np.ndarray) -> float:
    """Root-test estimate ``1 / max_l |c_l|^{1/l}`` over ``l >= 1``."""
    vals = [np.max(np.abs(coef[l])) ** (1.0 / l) for l in range(1, len(coef)) if np.max(np.abs(coef[l])) > 0]
    return float(1.0 / max(vals)) if vals else math.inf


def fd_derivatives(a: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Value and one-sided second-order first derivative at the first grid point."""
    return a[0], (-3 * a[0] + 4 * a[1] - a[2]) / (2 * dt)
