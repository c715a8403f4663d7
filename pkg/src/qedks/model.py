"""Finite regularised model: periodic 1D lattice, Dirac spinors, quantised photon modes.

Conventions used throughout the package (natural units, hbar = c = 1):

* Metric signature (+, -, -, -).  Potentials carry lower indices (``a_mu``,
  ``A_mu``), currents carry upper indices (``j^mu``).
* Fermion fields carry a factor ``1/sqrt(dx)`` so that
  ``{psi_a(x), psi^dag_b(y)} = delta_ab delta_xy / dx``.
* The spatial lattice is one dimensional and periodic; ``grad`` is the centred
  difference and ``lap`` the 3-point stencil.  Only ``gamma^1`` enters the
  kinetic term, also for 4-component spinors.
* Photon fields are expanded in real lattice Fourier modes ``u_k(x)``
  orthonormal under ``sum_x dx u_k(x) u_q(x) = delta_kq``.  The zero mode gets
  the small frequency ``omega_min``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

DEFAULT_MAX_DIM = 4096


class DimensionError(ValueError):
    """Fock space larger than the configured cap."""

    def __init__(self, dim: int, cap: int):
        super().__init__(f"Fock dimension {dim} exceeds cap {cap}")
        self.dim = dim
        self.cap = cap


@dataclass(frozen=True)
class ModelSpec:
    n_sites: int = 2
    lattice_spacing: float = 1.0
    spinor_dim: int = 2
    n_modes: int = 1
    n_max: int = 4
    polarizations: tuple[int, ...] = (1,)
    e: float = 0.2
    m0: float = 1.0
    omega_min: float = 1e-3
    # lattice mode indices (see ``lattice_modes``); None selects the softest
    # nonzero modes first and the zero mode last
    photon_modes: tuple[int, ...] | None = None
    keep_zero_point: bool = False
    max_dim: int = DEFAULT_MAX_DIM

    def __post_init__(self):
        if self.spinor_dim not in (2, 4):
            raise ValueError(f"spinor_dim must be 2 or 4, got {self.spinor_dim}")
        if self.n_sites < 1:
            raise ValueError("n_sites must be positive")
        if self.n_modes < 0 or self.n_modes > self.n_sites:
            raise ValueError(f"n_modes must be in [0, n_sites], got {self.n_modes}")
        if self.n_modes > 0 and self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.lattice_spacing <= 0:
            raise ValueError("lattice_spacing must be positive")
        active = (0, 1) if self.spinor_dim == 2 else (0, 1, 2, 3)
        for mu in self.polarizations:
            if mu not in active or mu == 0:
                raise ValueError(f"polarization {mu} is not a spatial index of the model")
        if len(set(self.polarizations)) != len(self.polarizations):
            raise ValueError("duplicate polarizations")
        if self.photon_modes is not None and len(self.photon_modes) != self.n_modes:
            raise ValueError("photon_modes must list exactly n_modes lattice modes")

    @property
    def fermion_modes(self) -> int:
        return self.n_sites * self.spinor_dim

    @property
    def n_oscillators(self) -> int:
        return self.n_modes * len(self.polarizations) if self.n_modes else 0

    @property
    def matter_dim(self) -> int:
        return 2 ** self.fermion_modes

    @property
    def photon_dim(self) -> int:
        return (self.n_max + 1) ** self.n_oscillators

    @property
    def fock_dim(self) -> int:
        return self.matter_dim * self.photon_dim


@dataclass(frozen=True)
class GammaSet:
    gamma: dict[int, np.ndarray]
    metric: dict[int, float]

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(sorted(self.gamma))

    @property
    def beta(self) -> np.ndarray:
        return self.gamma[0]

    def alpha(self, k: int) -> np.ndarray:
        return self.gamma[0] @ self.gamma[k]

    def current_matrix(self, mu: int) -> np.ndarray:
        """Spinor matrix ``gamma^0 gamma^mu`` sandwiched in ``psi^dag (.) psi``."""
        return self.gamma[0] @ self.gamma[mu]


_SIGMA = {
    1: np.array([[0, 1], [1, 0]], dtype=complex),
    2: np.array([[0, -1j], [1j, 0]], dtype=complex),
    3: np.array([[1, 0], [0, -1]], dtype=complex),
}


def gamma_matrices(spinor_dim: int) -> GammaSet:
    """Dirac representation; entries are exactly 0, +-1, +-i."""
    if spinor_dim == 2:
        g0 = np.array([[1, 0], [0, -1]], dtype=complex)
        g1 = np.array([[0, 1], [-1, 0]], dtype=complex)
        gamma = {0: g0, 1: g1}
    elif spinor_dim == 4:
        eye, zero = np.eye(2, dtype=complex), np.zeros((2, 2), dtype=complex)
        gamma = {0: np.block([[eye, zero], [zero, -eye]])}
        for k in (1, 2, 3):
            gamma[k] = np.block([[zero, _SIGMA[k]], [-_SIGMA[k], zero]])
    else:
        raise ValueError(f"unsupported spinor dimension {spinor_dim}")
    metric = {mu: (1.0 if mu == 0 else -1.0) for mu in gamma}
    return GammaSet(gamma=gamma, metric=metric)


def lattice_modes(n_sites: int, dx: float, omega_min: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Real orthonormal Fourier modes of the periodic lattice.

    Returns ``(u, omega, k)`` with ``u`` of shape ``(n_sites, n_sites)`` (row q
    is mode q), frequencies from the 3-point Laplacian and the integer
    wavenumber of each mode.  Ordering: zero mode, then (cos k, sin k) pairs,
    then the alternating mode for even ``n_sites``.
    """
    x = np.arange(n_sites)
    norm = 1.0 / math.sqrt(n_sites * dx)
    rows, ks = [np.full(n_sites, norm)], [0]
    for k in range(1, (n_sites - 1) // 2 + 1):
        phase = 2 * np.pi * k * x / n_sites
        rows.append(math.sqrt(2) * norm * np.cos(phase))
        rows.append(math.sqrt(2) * norm * np.sin(phase))
        ks += [k, k]
    if n_sites % 2 == 0 and n_sites > 1:
        rows.append(norm * (-1.0) ** x)
        ks.append(n_sites // 2)
    ks = np.array(ks)
    omega = 2.0 * np.abs(np.sin(np.pi * ks / n_sites)) / dx
    omega[ks == 0] = omega_min
    return np.array(rows), omega, ks


@dataclass(frozen=True, eq=False)
class Model:
    spec: ModelSpec
    gammas: GammaSet
    mu_indices: tuple[int, ...]
    # (site, spinor component) -> Jordan-Wigner mode index
    fermion_index: dict[tuple[int, int], int]
    # (photon mode slot, polarization) -> oscillator index
    oscillator_index: dict[tuple[int, int], int]
    mode_functions: np.ndarray  # (n_modes, n_sites)
    mode_frequencies: np.ndarray  # (n_modes,)
    mode_labels: tuple[int, ...]  # lattice mode index of each quantised mode
    all_modes: np.ndarray = field(repr=False)  # (n_sites, n_sites)
    all_frequencies: np.ndarray = field(repr=False)

    @property
    def dx(self) -> float:
        return self.spec.lattice_spacing

    @property
    def n_sites(self) -> int:
        return self.spec.n_sites

    @property
    def n_mu(self) -> int:
        return len(self.mu_indices)

    @property
    def dim(self) -> int:
        return self.spec.fock_dim

    @property
    def quantized(self) -> tuple[int, ...]:
        return self.spec.polarizations if self.spec.n_modes else ()

    def mu_slot(self, mu: int) -> int:
        return self.mu_indices.index(mu)

    @cached_property
    def grad(self) -> np.ndarray:
        """Centred periodic difference matrix."""
        n, h = self.n_sites, self.dx
        d = np.zeros((n, n))
        for x in range(n):
            d[x, (x + 1) % n] += 0.5 / h
            d[x, (x - 1) % n] -= 0.5 / h
        return d

    @cached_property
    def laplacian(self) -> np.ndarray:
        n, h = self.n_sites, self.dx
        lap = np.zeros((n, n))
        for x in range(n):
            lap[x, x] -= 2.0 / h**2
            lap[x, (x + 1) % n] += 1.0 / h**2
            lap[x, (x - 1) % n] += 1.0 / h**2
        return lap

    def wave_basis(self, mu: int) -> tuple[np.ndarray, np.ndarray]:
        """Mode functions and frequencies of the field component ``A_mu``.

        Quantised components live on the model's photon modes; the remaining
        components are classical fields on the complete lattice basis.
        """
        if mu in self.quantized:
            return self.mode_functions, self.mode_frequencies
        return self.all_modes, self.all_frequencies

    def wave_operator(self, mu: int) -> np.ndarray:
        """Lattice operator ``L`` with ``d_t^2 A_mu = L A_mu + sources``."""
        u, w = self.wave_basis(mu)
        return -self.dx * (u.T * w**2) @ u

    def projector(self, mu: int) -> np.ndarray:
        u, _ = self.wave_basis(mu)
        return self.dx * u.T @ u


def _default_mode_order(omega: np.ndarray, ks: np.ndarray) -> list[int]:
    nonzero = [q for q in range(len(ks)) if ks[q] != 0]
    nonzero.sort(key=lambda q: (omega[q], q))
    return nonzero + [q for q in range(len(ks)) if ks[q] == 0]


def build_model(spec: ModelSpec) -> Model:
    dim = spec.fock_dim
    if dim > spec.max_dim:
        raise DimensionError(dim, spec.max_dim)
    gammas = gamma_matrices(spec.spinor_dim)
    s = spec.spinor_dim
    fermion_index = {(x, a): x * s + a for x in range(spec.n_sites) for a in range(s)}
    u_all, w_all, ks = lattice_modes(spec.n_sites, spec.lattice_spacing, spec.omega_min)
    order = list(spec.photon_modes) if spec.photon_modes is not None else _default_mode_order(w_all, ks)
    labels = tuple(order[: spec.n_modes])
    for q in labels:
        if not 0 <= q < spec.n_sites:
            raise ValueError(f"lattice mode {q} out of range")
    oscillator_index = {}
    for m in range(spec.n_modes):
        for p, mu in enumerate(spec.polarizations):
            oscillator_index[(m, mu)] = m * len(spec.polarizations) + p
    return Model(
        spec=spec,
        gammas=gammas,
        mu_indices=gammas.indices,
        fermion_index=fermion_index,
        oscillator_index=oscillator_index,
        mode_functions=u_all[list(labels)] if labels else np.zeros((0, spec.n_sites)),
        mode_frequencies=w_all[list(labels)] if labels else np.zeros(0),
        mode_labels=labels,
        all_modes=u_all,
        all_frequencies=w_all,
    )


# --------------------------------------------------------------------------
# external drives


@dataclass(frozen=True)
class Series:
    """Finite analytic series in ``tau = t - t0``.

    ``poly[n]`` multiplies ``tau**n``; each ``trig`` entry ``(amp, omega, phase)``
    contributes ``amp * cos(omega * tau + phase)``.
    """

    poly: tuple[float, ...] = ()
    trig: tuple[tuple[float, float, float], ...] = ()

    def __call__(self, tau: float, order: int = 0) -> float:
        total = 0.0
        for n, c in enumerate(self.poly):
            if n >= order:
                total += c * math.perm(n, order) * tau ** (n - order)
        for amp, w, ph in self.trig:
            # d^k/dt^k cos(w t + ph) = w^k cos(w t + ph + k pi/2)
            total += amp * w**order * math.cos(w * tau + ph + order * math.pi / 2)
        return total

    def scaled(self, factor: float) -> Series:
        return Series(
            poly=tuple(factor * c for c in self.poly),
            trig=tuple((factor * a, w, ph) for a, w, ph in self.trig),
        )


@dataclass(frozen=True)
class ExternalDrive:
    """``a_ext[(site, mu)]`` (lower index) and ``j_ext[(site, mu)]`` (upper index)."""

    a_ext: dict[tuple[int, int], Series] = field(default_factory=dict)
    j_ext: dict[tuple[int, int], Series] = field(default_factory=dict)
    t0: float = 0.0

    def scaled(self, factor: float) -> ExternalDrive:
        return ExternalDrive(
            a_ext={k: s.scaled(factor) for k, s in self.a_ext.items()},
            j_ext=dict(self.j_ext),
            t0=self.t0,
        )

    @property
    def is_zero(self) -> bool:
        return not any(s.poly or s.trig for s in (*self.a_ext.values(), *self.j_ext.values()))


def evaluate_drive(model: Model, drive: ExternalDrive, t: float, order: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Values (or ``order``-th time derivatives) of the drive, each ``(n_sites, n_mu)``."""
    if t < drive.t0 - 1e-12:
        raise ValueError(f"t={t} precedes drive origin t0={drive.t0}")
    tau = t - drive.t0
    a = np.zeros((model.n_sites, model.n_mu))
    j = np.zeros((model.n_sites, model.n_mu))
    for target, table in ((a, drive.a_ext), (j, drive.j_ext)):
        for (x, mu), series in table.items():
            target[x, model.mu_slot(mu)] += series(tau, order)
    return a, j


def drive_residuals(model: Model, drive: ExternalDrive, times) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise Lorenz residual of ``a_ext`` and continuity residual of ``j_ext``.

    Lorenz: ``d_t a_0 - grad a_1``; continuity: ``d_t j^0 + grad j^1``.  Both
    use exact time derivatives of the series and the lattice ``grad`` along
    the single lattice direction.
    """
    lorenz, cont = [], []
    s0, s1 = model.mu_slot(0), model.mu_slot(1)
    for t in np.atleast_1d(times):
        a, j = evaluate_drive(model, drive, t)
        da, dj = evaluate_drive(model, drive, t, order=1)
        lorenz.append(da[:, s0] - model.grad @ a[:, s1])
        cont.append(dj[:, s0] + model.grad @ j[:, s1])
    return np.array(lorenz), np.array(cont)


def check_drive_admissible(model: Model, drive: ExternalDrive, times, tol_gauge: float = 1e-10) -> float:
    lorenz, cont = drive_residuals(model, drive, times)
    worst = float(max(np.max(np.abs(lorenz), initial=0.0), np.max(np.abs(cont), initial=0.0)))
    if worst > tol_gauge:
        raise ValueError(f"drive violates Lorenz/continuity condition: residual {worst:.3e} > {tol_gauge:.1e}")
    return worst
