"""Field-strength check against the Schwinger critical field."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..model import ExternalDrive, Model, evaluate_drive

log = logging.getLogger(__name__)

WARNING_TEXT = (
    "peak drive field reaches {ratio:.3g} of the Schwinger critical field E_cr = m0^2 / e "
    "(about 1e16 V/cm); beyond it the QED vacuum becomes unstable against pair creation, "
    "which this finite model cannot represent. Results outside that regime are formal."
)


@dataclass
class GuardResult:
    peak_field: float
    critical_field: float
    ratio: float
    threshold: float
    warning: str | None

    @property
    def passed(self) -> bool:
        return self.warning is None


def electric_field(model: Model, a: np.ndarray, da: np.ndarray) -> np.ndarray:
    """Lattice ``E = -grad a_0 + d_t a_1`` (lower-index potentials)."""
    s0, s1 = model.mu_slot(0), model.mu_slot(1)
    return -model.grad @ a[:, s0] + da[:, s1]


def schwinger_guard(model: Model, drive: ExternalDrive, times, threshold: float = 1.0) -> GuardResult:
    """Peak ``|E|`` over ``times`` relative to ``E_cr = m0^2 / e``; warns, never blocks."""
    peak = 0.0
    for t in np.atleast_1d(times):
        a, _ = evaluate_drive(model, drive, t)
        da, _ = evaluate_drive(model, drive, t, order=1)
        peak = max(peak, float(np.max(np.abs(electric_field(model, a, da)), initial=0.0)))
    e, m0 = abs(model.spec.e), model.spec.m0
    crit = m0 * m0 / e if e > 0 else np.inf
    ratio = peak / crit if np.isfinite(crit) and crit > 0 else (0.0 if peak == 0 else np.inf)
    msg = WARNING_TEXT.format(ratio=ratio) if ratio > threshold else None
    if msg:
        log.warning(msg)
    return GuardResult(peak, float(crit), float(ratio), threshold, msg)
