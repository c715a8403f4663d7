"""Hamiltonian parts ``H_M + H_E + H_int + H_ext(t)`` and the noninteracting variant."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .fock import FockOperators, OperatorMatrix, current_matter, photon_field_ops
from .model import ExternalDrive, Model, evaluate_drive


def single_particle_dirac(model: Model, a: np.ndarray | None = None) -> np.ndarray:
    """Lattice Dirac matrix ``-i alpha^1 grad + m0 beta (+ e gamma^0 gamma^mu a_mu)``.

    Index ``f = x * spinor_dim + a``.  ``a`` is an optional ``(n_sites, n_mu)``
    array of lower-index potentials coupling through ``e``.
    """
    g = model.gammas
    h = np.kron(model.grad, -1j * g.alpha(1)) + np.kron(np.eye(model.n_sites), model.spec.m0 * g.beta)
    if a is not None:
        e = model.spec.e
        for x in range(model.n_sites):
            block = sum(a[x, s] * g.current_matrix(mu) for s, mu in enumerate(model.mu_indices))
            sl = slice(x * model.spec.spinor_dim, (x + 1) * model.spec.spinor_dim)
            h[sl, sl] += e * block
    return h


def _second_quantise(ops: FockOperators, h: np.ndarray) -> np.ndarray:
    out = np.zeros((ops.dm, ops.dm), dtype=complex)
    for f in range(ops.n_f):
        for g in range(ops.n_f):
            if h[f, g] != 0:
                out += h[f, g] * (ops.cdag[f] @ ops.c[g])
    return out


def build_H_M_matter(model: Model, ops: FockOperators, normal_order: bool = True) -> np.ndarray:
    h = single_particle_dirac(model)
    hm = _second_quantise(ops, h)
    if normal_order:
        # Dirac-sea energy: every negative single-particle level filled
        w = np.linalg.eigvalsh(h)
        hm -= w[w < 0].sum() * np.eye(ops.dm)
    return hm


def build_H_E_photon(model: Model, ops: FockOperators) -> np.ndarray:
    hp = np.zeros((ops.dp, ops.dp), dtype=complex)
    for (m, mu), o in model.oscillator_index.items():
        lad = ops.ladder[o]
        w = model.mode_frequencies[m]
        hp += w * (lad.conj().T @ lad)
        if model.spec.keep_zero_point:
            hp += 0.5 * w * np.eye(ops.dp)
    return hp


def build_H_int_full(model: Model, ops: FockOperators, A: dict | None = None) -> np.ndarray:
    """``dx * e * sum_{x, mu} j^mu(x) A_mu(x)`` over quantised ``mu``."""
    if A is None:
        A, _ = photon_field_ops(model, ops)
    dim = ops.dm * ops.dp
    out = np.zeros((dim, dim), dtype=complex)
    scale = model.dx * model.spec.e
    for mu in model.quantized:
        for x in range(model.n_sites):
            out += scale * np.kron(current_matter(model, ops, mu, x), A[(x, mu)])
    return out


def build_H_M(model: Model, ops: FockOperators | None = None, normal_order: bool = True) -> OperatorMatrix:
    ops = ops or FockOperators(model)
    return OperatorMatrix(ops.matter(build_H_M_matter(model, ops, normal_order)), "H_M")


def build_H_E(model: Model, ops: FockOperators | None = None) -> OperatorMatrix:
    ops = ops or FockOperators(model)
    return OperatorMatrix(ops.photon(build_H_E_photon(model, ops)), "H_E")


def build_H_int(model: Model, ops: FockOperators | None = None) -> OperatorMatrix:
    ops = ops or FockOperators(model)
    return OperatorMatrix(build_H_int_full(model, ops), "H_int")


def a_channel_ops(model: Model, ops: FockOperators) -> dict[tuple[int, int], np.ndarray]:
    """Matter-factor generators multiplying ``a_mu(x)``: ``dx e j^mu(x)``."""
    scale = model.dx * model.spec.e
    return {
        (mu, x): scale * current_matter(model, ops, mu, x) for mu in model.mu_indices for x in range(model.n_sites)
    }


def j_channel_ops(model: Model, ops: FockOperators, A: dict | None = None) -> dict[tuple[int, int], np.ndarray]:
    """Photon-factor generators multiplying ``j^mu(x)``: ``dx e A_mu(x)``."""
    if A is None:
        A, _ = photon_field_ops(model, ops)
    scale = model.dx * model.spec.e
    return {(mu, x): scale * A[(x, mu)] for mu in model.quantized for x in range(model.n_sites)}


def external_matrix(model: Model, ops: FockOperators, a_ops: dict, j_ops: dict,
                    a: np.ndarray, j: np.ndarray) -> np.ndarray:
    hm = np.zeros((ops.dm, ops.dm), dtype=complex)
    for (mu, x), op in a_ops.items():
        val = a[x, model.mu_slot(mu)]
        if val != 0:
            hm += val * op
    hp = np.zeros((ops.dp, ops.dp), dtype=complex)
    for (mu, x), op in j_ops.items():
        val = j[x, model.mu_slot(mu)]
        if val != 0:
            hp += val * op
    return ops.matter(hm) + ops.photon(hp)


def build_H_ext(model: Model, drive: ExternalDrive, t: float, ops: FockOperators | None = None) -> OperatorMatrix:
    ops = ops or FockOperators(model)
    a, j = evaluate_drive(model, drive, t)
    full = external_matrix(model, ops, a_channel_ops(model, ops), j_channel_ops(model, ops), a, j)
    return OperatorMatrix(full, "H_ext")


@dataclass(eq=False)
class HamiltonianSet:
    model: Model
    ops: FockOperators
    H_M: np.ndarray  # matter factor
    H_E: np.ndarray  # photon factor
    H_int: np.ndarray  # full space, zero when noninteracting
    interacting: bool
    a_ops: dict = field(repr=False)
    j_ops: dict = field(repr=False)

    @cached_property
    def static(self) -> np.ndarray:
        """``H_M + H_E + H_int`` on the full space."""
        return self.ops.matter(self.H_M) + self.ops.photon(self.H_E) + self.H_int

    def external(self, a: np.ndarray, j: np.ndarray) -> np.ndarray:
        """``H_ext`` for drive values ``a`` (lower) and ``j`` (upper), each ``(n_sites, n_mu)``."""
        return external_matrix(self.model, self.ops, self.a_ops, self.j_ops, a, j)

    def total(self, a: np.ndarray, j: np.ndarray) -> np.ndarray:
        return self.static + self.external(a, j)

    def at(self, drive: ExternalDrive, t: float) -> np.ndarray:
        a, j = evaluate_drive(self.model, drive, t)
        return self.total(a, j)


def build_hamiltonians(model: Model, interacting: bool = True, ops: FockOperators | None = None,
                       normal_order: bool = True) -> HamiltonianSet:
    ops = ops or FockOperators(model)
    A, _ = photon_field_ops(model, ops)
    dim = ops.dm * ops.dp
    if interacting and model.quantized and model.spec.e != 0:
        h_int = build_H_int_full(model, ops, A)
    else:
        h_int = np.zeros((dim, dim), dtype=complex)
    return HamiltonianSet(
        model=model,
        ops=ops,
        H_M=build_H_M_matter(model, ops, normal_order),
        H_E=build_H_E_photon(model, ops),
        H_int=h_int,
        interacting=interacting,
        a_ops=a_channel_ops(model, ops),
        j_ops=j_channel_ops(model, ops, A),
    )


def field_energy_classical(model: Model, A: np.ndarray, A_dot: np.ndarray, mu: int) -> float:
    """``1/2 sum_k (c_dot_k^2 + omega_k^2 c_k^2)`` over the modes of component ``mu``."""
    L = model.wave_operator(mu)
    return 0.5 * float(model.dx * A_dot @ A_dot - A @ (L @ A))
