"""Field operators on the joint fermion (x) photon Fock space.

The Fock space is ``matter (x) photons``.  Fermion modes are ordered by the
model's ``fermion_index`` and mapped to qubits with a Jordan-Wigner string;
state index ``n`` has mode ``f`` occupied iff bit ``F-1-f`` of ``n`` is set
(mode 0 is the leading tensor factor).  Photon oscillators follow the
model's ``oscillator_index``, each truncated to ``n_max + 1`` levels.

Everything here is dense.  Pure matter and pure photon operators are kept on
their own factor and embedded with :meth:`FockOperators.matter` /
:meth:`FockOperators.photon` only when a full-space matrix is needed.

Operators that generate time derivatives (``q_kin``, ``n``, ``q_int``) are
returned in Hermitian form, i.e. ``d_t j = q_kin + q_int + n a_ext`` rather
than ``i d_t j = ...``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property, reduce
from pathlib import Path

import numpy as np

from .model import Model

HERMITIAN_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    data: np.ndarray
    role: str
    indices: tuple[int, ...] = ()
    hermitian: bool = True

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] != self.data.shape[1]:
            raise ValueError(f"{self.role}: operator must be square, got {self.data.shape}")
        if self.hermitian:
            err = np.max(np.abs(self.data - self.data.conj().T), initial=0.0)
            if err > HERMITIAN_TOL * max(1.0, np.max(np.abs(self.data), initial=0.0)):
                raise ValueError(f"{self.role}{self.indices} flagged hermitian but deviates by {err:.2e}")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def _kron_all(mats):
    return reduce(np.kron, mats, np.eye(1, dtype=complex))


def comm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def anticomm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b + b @ a


class FockOperators:
    """Lazily built operator tables for one model."""

    def __init__(self, model: Model):
        self.model = model
        self.spec = model.spec
        self.n_f = model.spec.fermion_modes
        self.dm = model.spec.matter_dim
        self.dp = model.spec.photon_dim

    # -- embedding
    def matter(self, op: np.ndarray) -> np.ndarray:
        return np.kron(op, np.eye(self.dp, dtype=complex))

    def photon(self, op: np.ndarray) -> np.ndarray:
        return np.kron(np.eye(self.dm, dtype=complex), op)

    # -- fermions
    @cached_property
    def c(self) -> list[np.ndarray]:
        """Annihilators ``c_f`` on the matter factor."""
        low = np.array([[0, 1], [0, 0]], dtype=complex)
        z = np.diag([1.0, -1.0]).astype(complex)
        eye = np.eye(2, dtype=complex)
        return [_kron_all([z] * f + [low] + [eye] * (self.n_f - f - 1)) for f in range(self.n_f)]

    @cached_property
    def cdag(self) -> list[np.ndarray]:
        return [op.conj().T for op in self.c]

    def mode(self, x: int, a: int) -> int:
        return self.model.fermion_index[(x % self.model.n_sites, a)]

    def bilinear(self, x: int, y: int, mat: np.ndarray) -> np.ndarray:
        """``sum_ab c^dag_{x a} mat_ab c_{y b}`` on the matter factor."""
        out = np.zeros((self.dm, self.dm), dtype=complex)
        s = self.spec.spinor_dim
        for a in range(s):
            for b in range(s):
                if mat[a, b] != 0:
                    out += mat[a, b] * (self.cdag[self.mode(x, a)] @ self.c[self.mode(y, b)])
        return out

    @cached_property
    def number(self) -> np.ndarray:
        return sum(self.cdag[f] @ self.c[f] for f in range(self.n_f))

    # -- photons
    @cached_property
    def ladder(self) -> list[np.ndarray]:
        """Truncated annihilators ``a_o`` on the photon factor."""
        n_osc = self.spec.n_oscillators
        if n_osc == 0:
            return []
        levels = self.spec.n_max + 1
        a1 = np.diag(np.sqrt(np.arange(1, levels)), 1).astype(complex)
        eye = np.eye(levels, dtype=complex)
        return [_kron_all([eye] * o + [a1] + [eye] * (n_osc - o - 1)) for o in range(n_osc)]

    @cached_property
    def top_level_projector(self) -> np.ndarray:
        """Photon-factor projector onto states with any oscillator at ``n_max``."""
        n_osc = self.spec.n_oscillators
        if n_osc == 0:
            return np.zeros((1, 1))
        levels = self.spec.n_max + 1
        occ = np.indices([levels] * n_osc).reshape(n_osc, -1)
        return np.diag((occ == self.spec.n_max).any(axis=0).astype(float))

    def oscillator(self, m: int, mu: int) -> int:
        return self.model.oscillator_index[(m, mu)]


@dataclass(frozen=True)
class InitialConfiguration:
    """Ensemble ``rho_0 = sum_i p_i |Psi_i><Psi_i|``; ``states`` has shape ``(dim, n)``."""

    weights: np.ndarray
    states: np.ndarray
    label: str = "explicit"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        s = np.asarray(self.states, dtype=complex)
        if s.ndim == 1:
            s = s[:, None]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "states", s)
        if w.ndim != 1 or w.size != s.shape[1]:
            raise ValueError("one weight per state required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        gram = s.conj().T @ s
        if np.max(np.abs(gram - np.eye(w.size))) > 1e-12:
            raise ValueError("initial states must be orthonormal")

    @classmethod
    def pure(cls, state: np.ndarray, label: str = "pure") -> InitialConfiguration:
        state = np.asarray(state, dtype=complex)
        return cls(np.ones(1), state / np.linalg.norm(state), label)


# --------------------------------------------------------------------------
# field operators


def fermion_field_ops(model: Model, ops: FockOperators | None = None) -> tuple[dict, dict]:
    """``psi_a(x)`` and ``psibar_a(x)`` on the matter factor, keyed by ``(x, a)``."""
    ops = ops or FockOperators(model)
    scale = 1.0 / np.sqrt(model.dx)
    beta = model.gammas.beta
    s = model.spec.spinor_dim
    psi, psibar = {}, {}
    for x in range(model.n_sites):
        for a in range(s):
            psi[(x, a)] = scale * ops.c[ops.mode(x, a)]
        for b in range(s):
            psibar[(x, b)] = sum(
                scale * ops.cdag[ops.mode(x, a)] * beta[a, b] for a in range(s) if beta[a, b] != 0
            )
    return psi, psibar


def photon_field_ops(model: Model, ops: FockOperators | None = None) -> tuple[dict, dict]:
    """``A_mu(x)`` and ``Adot_mu(x)`` on the photon factor for quantised ``mu``.

    ``A(x) = sum_k u_k(x) (a_k + a_k^dag)/sqrt(2 w_k)`` and
    ``Adot(x) = -i sum_k u_k(x) sqrt(w_k/2) (a_k - a_k^dag)`` so that
    ``[Adot_mu(x), A_mu(y)] = -i sum_k u_k(x) u_k(y)`` (``= i g_mumu delta/dx``
    for a complete mode set) below the truncation level.
    """
    ops = ops or FockOperators(model)
    A, Adot = {}, {}
    u, w = model.mode_functions, model.mode_frequencies
    for mu in model.quantized:
        for x in range(model.n_sites):
            a_op = np.zeros((ops.dp, ops.dp), dtype=complex)
            d_op = np.zeros((ops.dp, ops.dp), dtype=complex)
            for m in range(model.spec.n_modes):
                lad = ops.ladder[ops.oscillator(m, mu)]
                a_op += u[m, x] * (lad + lad.conj().T) / np.sqrt(2 * w[m])
                d_op += -1j * u[m, x] * np.sqrt(w[m] / 2) * (lad - lad.conj().T)
            A[(x, mu)] = a_op
            Adot[(x, mu)] = d_op
    return A, Adot


def current_matter(model: Model, ops: FockOperators, mu: int, x: int) -> np.ndarray:
    """Symmetrised ``j^mu(x) = 1/2 [psibar, gamma^mu psi]`` on the matter factor."""
    m = model.gammas.current_matrix(mu)
    dm = ops.dm
    return (ops.bilinear(x, x, m) - 0.5 * np.trace(m) * np.eye(dm)) / model.dx


def current_operator(model: Model, mu: int, x: int, ops: FockOperators | None = None) -> OperatorMatrix:
    ops = ops or FockOperators(model)
    return OperatorMatrix(ops.matter(current_matter(model, ops, mu, x)), "current", (mu, x))


def free_vacuum(model: Model, ops: FockOperators | None = None) -> np.ndarray:
    """Matter-factor Dirac sea of the free lattice Hamiltonian (negative levels filled)."""
    from .hamiltonian import single_particle_dirac

    ops = ops or FockOperators(model)
    h = single_particle_dirac(model)
    w, v = np.linalg.eigh(h)
    neg = v[:, w < 0]
    if np.any(np.abs(w) < 1e-12):
        raise ValueError("free spectrum has zero modes; Dirac sea is ambiguous (use m0 != 0)")
    return slater_matter(model, ops, neg)


def current_normal_ordered(model: Model, mu: int, x: int, ops: FockOperators | None = None) -> np.ndarray:
    """``:psibar gamma^mu psi:`` as vacuum subtraction w.r.t. the free Dirac sea (matter factor)."""
    ops = ops or FockOperators(model)
    raw = ops.bilinear(x, x, model.gammas.current_matrix(mu)) / model.dx
    vac = free_vacuum(model, ops)
    return raw - np.vdot(vac, raw @ vac).real * np.eye(ops.dm)


def q_operators(model: Model, ops: FockOperators | None = None) -> dict:
    """Lattice transcription of ``q_kin^mu``, ``n^{mu nu}``, ``q_int^mu`` and ``p_mu``.

    Keys: ``("q_kin", mu, x)``, ``("n", mu, nu, x)`` (matter factor),
    ``("q_int", mu, x)`` (full space) and ``("p", mu, x)`` (photon factor).
    The right derivative acts on ``psi`` and the left one on ``psibar``, both
    as centred differences.
    """
    ops = ops or FockOperators(model)
    g = model.gammas.gamma
    beta = model.gammas.beta
    h = model.dx
    m0, e = model.spec.m0, model.spec.e
    n = model.n_sites
    out = {}
    for mu in model.mu_indices:
        right = beta @ g[mu] @ beta @ g[1]
        left = beta @ g[1] @ beta @ g[mu]
        mass = beta @ (g[mu] @ beta - beta @ g[mu])
        for x in range(n):
            kin = (-0.5j / h) * (ops.bilinear(x, x + 1, right) - ops.bilinear(x, x - 1, right))
            kin += (-0.5j / h) * (ops.bilinear(x + 1, x, left) - ops.bilinear(x - 1, x, left))
            kin += m0 * ops.bilinear(x, x, mass)
            out[("q_kin", mu, x)] = -1j * kin / h
        for nu in model.mu_indices:
            mat = beta @ (g[mu] @ beta @ g[nu] - g[nu] @ beta @ g[mu])
            for x in range(n):
                out[("n", mu, nu, x)] = -1j * e * ops.bilinear(x, x, mat) / h
    A, _ = photon_field_ops(model, ops)
    dim = ops.dm * ops.dp
    for mu in model.mu_indices:
        for x in range(n):
            qi = np.zeros((dim, dim), dtype=complex)
            for nu in model.quantized:
                qi += np.kron(out[("n", mu, nu, x)], A[(x, nu)])
            out[("q_int", mu, x)] = qi
    for mu in model.quantized:
        L = model.wave_operator(mu)
        for x in range(n):
            out[("p", mu, x)] = -sum(L[x, y] * A[(y, mu)] for y in range(n) if L[x, y] != 0)
    return out


def charge_operator(model: Model, ops: FockOperators | None = None) -> np.ndarray:
    """Global charge ``sum_x dx j^0(x)`` on the matter factor."""
    ops = ops or FockOperators(model)
    return sum(model.dx * current_matter(model, ops, 0, x) for x in range(model.n_sites))


def charge_conjugation(model: Model, ops: FockOperators | None = None) -> np.ndarray:
    """Particle-hole unitary with ``U c_{x,a} U^dag = sum_b V_ab c^dag_{x,b}``.

    ``V = alpha^1`` on every site, which maps the lattice Dirac Hamiltonian to
    itself and flips the sign of the symmetrised current.  Only supported for
    2-component spinors.
    """
    if model.spec.spinor_dim != 2:
        raise NotImplementedError("charge conjugation map implemented for spinor_dim=2")
    ops = ops or FockOperators(model)
    V = model.gammas.alpha(1)
    dm, nf = ops.dm, ops.n_f
    full = np.zeros(dm, dtype=complex)
    full[-1] = 1.0  # every mode occupied: annihilated by all c^dag
    # image of c^dag_f is sum_b conj(V_ab) c_{x b}
    images = []
    for f in range(nf):
        x, a = divmod(f, model.spec.spinor_dim)
        images.append(sum(np.conj(V[a, b]) * ops.c[ops.mode(x, b)] for b in range(model.spec.spinor_dim)))
    U = np.zeros((dm, dm), dtype=complex)
    for n in range(dm):
        vec = full.copy()
        # basis state n = prod_{f ascending, occupied} c^dag_f |0>; apply rightmost first
        occupied = [f for f in range(nf) if (n >> (nf - 1 - f)) & 1]
        for f in reversed(occupied):
            vec = images[f] @ vec
        U[:, n] = vec
    return U


# --------------------------------------------------------------------------
# named states


def slater_matter(model: Model, ops: FockOperators, orbitals: np.ndarray) -> np.ndarray:
    """Slater determinant of the columns of ``orbitals`` (unit-norm mode amplitudes)."""
    vac = np.zeros(ops.dm, dtype=complex)
    vac[0] = 1.0
    for k in range(orbitals.shape[1]):
        create = sum(orbitals[f, k] * ops.cdag[f] for f in range(ops.n_f) if orbitals[f, k] != 0)
        vac = create @ vac
    norm = np.linalg.norm(vac)
    if norm < 1e-12:
        raise ValueError("orbitals are linearly dependent")
    return vac / norm


def coherent_photons(model: Model, alphas) -> np.ndarray:
    """Truncated, renormalised product of coherent states, one amplitude per oscillator."""
    levels = model.spec.n_max + 1
    vecs = []
    alphas = np.atleast_1d(np.asarray(alphas, dtype=complex))
    if alphas.size != model.spec.n_oscillators:
        raise ValueError(f"need {model.spec.n_oscillators} coherent amplitudes, got {alphas.size}")
    for al in alphas:
        v = np.ones(levels, dtype=complex)
        for k in range(1, levels):
            v[k] = v[k - 1] * al / np.sqrt(k)
        vecs.append(v / np.linalg.norm(v))
    return _kron_all([v[:, None] for v in vecs])[:, 0] if vecs else np.ones(1, dtype=complex)


def product_state(matter: np.ndarray, photons: np.ndarray) -> np.ndarray:
    return np.kron(matter, photons)


# --------------------------------------------------------------------------
# binary dump

_OP_MAGIC = b"QEDKSOP\x00"


def dump_operator(path, op: OperatorMatrix) -> None:
    """Header: magic, u32 dim, u16 role length, role, u16 n_indices, i32 indices; then complex128 data."""
    role = op.role.encode()
    header = _OP_MAGIC + struct.pack("<IH", op.dim, len(role)) + role
    header += struct.pack(f"<H{len(op.indices)}i", len(op.indices), *op.indices)
    header += struct.pack("<?", op.hermitian)
    Path(path).write_bytes(header + np.ascontiguousarray(op.data, dtype="<c16").tobytes())


def load_operator(path) -> OperatorMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != _OP_MAGIC:
        raise ValueError("not an operator dump")
    dim, n_role = struct.unpack_from("<IH", raw, 8)
    pos = 14
    role = raw[pos : pos + n_role].decode()
    pos += n_role
    (n_idx,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    indices = struct.unpack_from(f"<{n_idx}i", raw, pos)
    pos += 4 * n_idx
    (herm,) = struct.unpack_from("<?", raw, pos)
    pos += 1
    data = np.frombuffer(raw, dtype="<c16", offset=pos).reshape(dim, dim).astype(complex)
    return OperatorMatrix(data, role, tuple(indices), herm)
