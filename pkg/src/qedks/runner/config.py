"""Scenario files (TOML).  The schema is documented in ``scenarios/README.md``."""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..dynamics import TimeGrid
from ..model import ExternalDrive, ModelSpec, Series

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TASKS = ("simulate", "invert", "ks", "taylor", "verify", "sweep")
INITIAL_KINDS = ("vacuum", "ground", "product", "explicit")
KS_INITIAL = ("same", "product_matched")
SWEEP_AXES = ("e", "dt", "dx", "n_max", "l_max")
SWEEP_METRICS = ("eom", "mean_field", "leakage", "taylor", "dispersion")

DEFAULT_TOLERANCES = {
    "tol_match": 1e-6,
    "tol_init": 1e-9,
    "tol_fp": 1e-10,
    "n_floor": 1e-8,
    "leak_max": 1e-6,
    "tol_gauge": 1e-10,
    "tol_unitarity": 1e-10,
    "tol_charge": 1e-10,
    "tol_eom": 1e-6,
    "tol_causal": 1e-8,
    "tol_energy": 1e-8,
    "critical_ratio": 1.0,
}
EPS = sys.float_info.epsilon


class SchemaError(ValueError):
    """Scenario violates the schema; ``errors`` lists ``(field, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{k}: {v}" for k, v in errors))


@dataclass
class Scenario:
    task: str
    model: ModelSpec
    drive: ExternalDrive
    grid: TimeGrid
    initial: dict
    tolerances: dict
    ks: dict = field(default_factory=dict)
    taylor: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)
    source: str | None = None

    def digest(self) -> str:
        return scenario_hash(self.raw)


def scenario_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _get(errors, table, key, kind, default=None, where=""):
    if key not in table:
        return default
    val = table[key]
    ok = {
        "int": isinstance(val, int) and not isinstance(val, bool),
        "float": isinstance(val, (int, float)) and not isinstance(val, bool),
        "bool": isinstance(val, bool),
        "str": isinstance(val, str),
        "list": isinstance(val, list),
        "table": isinstance(val, dict),
    }[kind]
    if not ok:
        errors.append((f"{where}{key}", f"expected {kind}, got {type(val).__name__}"))
        return default
    return float(val) if kind == "float" else val


def _parse_model(errors, tab) -> ModelSpec | None:
    known = {f.name for f in fields(ModelSpec)}
    for k in tab:
        if k not in known:
            errors.append((f"model.{k}", "unknown key"))
    kw = {}
    for name, kind in (("n_sites", "int"), ("lattice_spacing", "float"), ("spinor_dim", "int"),
                       ("n_modes", "int"), ("n_max", "int"), ("e", "float"), ("m0", "float"),
                       ("omega_min", "float"), ("keep_zero_point", "bool"), ("max_dim", "int")):
        v = _get(errors, tab, name, kind, where="model.")
        if v is not None:
            kw[name] = v
    for name in ("polarizations", "photon_modes"):
        v = _get(errors, tab, name, "list", where="model.")
        if v is not None:
            if not all(isinstance(i, int) for i in v):
                errors.append((f"model.{name}", "entries must be integers"))
            else:
                kw[name] = tuple(v)
    try:
        return ModelSpec(**kw)
    except (ValueError, TypeError) as exc:
        errors.append(("model", str(exc)))
        return None


def _parse_series(errors, entry, where) -> Series:
    poly = _get(errors, entry, "poly", "list", [], where)
    trig = _get(errors, entry, "trig", "list", [], where)
    if not all(isinstance(c, (int, float)) for c in poly):
        errors.append((f"{where}poly", "entries must be numbers"))
        poly = []
    clean = []
    for i, t in enumerate(trig):
        if not (isinstance(t, list) and len(t) == 3 and all(isinstance(c, (int, float)) for c in t)):
            errors.append((f"{where}trig[{i}]", "expected [amplitude, omega, phase]"))
        else:
            clean.append(tuple(float(c) for c in t))
    return Series(tuple(float(c) for c in poly), tuple(clean))


def _parse_drive(errors, tab, spec: ModelSpec | None) -> ExternalDrive:
    t0 = _get(errors, tab, "t0", "float", 0.0, "drive.")
    tables = {}
    for key in ("a", "j"):
        out = {}
        for i, entry in enumerate(_get(errors, tab, key, "list", [], "drive.")):
            where = f"drive.{key}[{i}]."
            if not isinstance(entry, dict):
                errors.append((where[:-1], "expected a table"))
                continue
            site = _get(errors, entry, "site", "int", None, where)
            mu = _get(errors, entry, "mu", "int", None, where)
            if site is None or mu is None:
                errors.append((where[:-1], "site and mu are required"))
                continue
            if spec is not None:
                if not 0 <= site < spec.n_sites:
                    errors.append((f"{where}site", f"outside 0..{spec.n_sites - 1}"))
                n_mu = 2 if spec.spinor_dim == 2 else 4
                if not 0 <= mu < n_mu:
                    errors.append((f"{where}mu", f"outside 0..{n_mu - 1}"))
            if (site, mu) in out:
                errors.append((where[:-1], "duplicate (site, mu)"))
            out[(site, mu)] = _parse_series(errors, entry, where)
        tables[key] = out
    return ExternalDrive(a_ext=tables["a"], j_ext=tables["j"], t0=t0)


def _parse_grid(errors, tab, t0) -> TimeGrid | None:
    dt = _get(errors, tab, "dt", "float", 1e-3, "grid.")
    n = _get(errors, tab, "n_steps", "int", None, "grid.")
    tf = _get(errors, tab, "t_final", "float", None, "grid.")
    start = _get(errors, tab, "t0", "float", t0, "grid.")
    if n is None:
        n = int(round(((tf if tf is not None else 2.0) - start) / dt)) if dt and dt > 0 else 0
    try:
        return TimeGrid(start, dt, n)
    except ValueError as exc:
        errors.append(("grid", str(exc)))
        return None


def _parse_tolerances(errors, tab) -> dict:
    tol = dict(DEFAULT_TOLERANCES)
    for k, v in tab.items():
        _set_tolerance(errors, tol, k, v, "tolerances.")
    return tol


def _set_tolerance(errors, tol, key, val, where=""):
    if key not in DEFAULT_TOLERANCES:
        errors.append((f"{where}{key}", "unknown tolerance"))
        return
    if isinstance(val, bool) or not isinstance(val, (int, float)) or not math.isfinite(val):
        errors.append((f"{where}{key}", "must be a finite number"))
        return
    if val < EPS:
        errors.append((f"{where}{key}", f"must be >= machine epsilon ({EPS:.2e})"))
        return
    tol[key] = float(val)


def apply_overrides(scn: Scenario, overrides: list[str]) -> None:
    """``key=val`` strings from the command line."""
    errors = []
    for item in overrides:
        if "=" not in item:
            errors.append((f"--tol-override {item}", "expected key=val"))
            continue
        k, v = item.split("=", 1)
        try:
            val = float(v)
        except ValueError:
            errors.append((f"--tol-override {k}", f"not a number: {v!r}"))
            continue
        _set_tolerance(errors, scn.tolerances, k.strip(), val, "--tol-override ")
    if errors:
        raise SchemaError(errors)
    tabs = dict(scn.raw.get("tolerances", {}))
    for item in overrides:
        k, v = item.split("=", 1)
        tabs[k.strip()] = float(v)
    scn.raw = dict(scn.raw, tolerances=tabs)


def _parse_initial(errors, tab, spec) -> dict:
    kind = _get(errors, tab, "kind", "str", "ground", "initial.")
    if kind not in INITIAL_KINDS:
        errors.append(("initial.kind", f"must be one of {INITIAL_KINDS}"))
    out = {"kind": kind}
    if kind == "product":
        orb = tab.get("orbitals", "dirac_sea")
        if orb != "dirac_sea" and not (isinstance(orb, list) and all(isinstance(b, list) and len(b) == 2 for b in orb)):
            errors.append(("initial.orbitals", 'expected "dirac_sea" or a list of [<sigma_x>, <sigma_y>] per site'))
        if isinstance(orb, list) and spec is not None:
            if spec.spinor_dim != 2 or len(orb) != spec.n_sites:
                errors.append(("initial.orbitals", "Bloch orbitals need spinor_dim=2 and one entry per site"))
            elif any(bx * bx + by * by > 1 for bx, by in orb):
                errors.append(("initial.orbitals", "Bloch vectors must lie inside the unit disc"))
        coh = tab.get("coherent", [])
        if not (isinstance(coh, list) and all(isinstance(c, list) and len(c) == 2 for c in coh)):
            errors.append(("initial.coherent", "expected list of [re, im] per oscillator"))
        elif spec is not None and coh and len(coh) != spec.n_oscillators:
            errors.append(("initial.coherent", f"need {spec.n_oscillators} amplitudes"))
        out.update(orbitals=orb, coherent=coh)
    elif kind == "explicit":
        path = _get(errors, tab, "path", "str", None, "initial.")
        if path is None:
            errors.append(("initial.path", "explicit initial configurations need an array file path"))
        out.update(path=path, weights=tab.get("weights"))
    return out


def _parse_ks(errors, tab) -> dict:
    out = {
        "initial": _get(errors, tab, "initial", "str", "same", "ks."),
        "theta": _get(errors, tab, "theta", "float", 0.7, "ks."),
        "max_iter": _get(errors, tab, "max_iter", "int", 200, "ks."),
        "predictor": _get(errors, tab, "predictor", "str", "linear", "ks."),
        "feedback": _get(errors, tab, "feedback", "list", [0.0, 0.0], "ks."),
        "seed_shift": _get(errors, tab, "seed_shift", "float", 0.0, "ks."),
        "mode": _get(errors, tab, "mode", "str", "mean_field", "ks."),
        "fields": _get(errors, tab, "fields", "str", None, "ks."),
        "compare_exact": _get(errors, tab, "compare_exact", "bool", True, "ks."),
    }
    if out["initial"] not in KS_INITIAL:
        errors.append(("ks.initial", f"must be one of {KS_INITIAL}"))
    if out["mode"] not in ("mean_field", "effective"):
        errors.append(("ks.mode", 'must be "mean_field" or "effective"'))
    if out["mode"] == "effective" and not out["fields"]:
        errors.append(("ks.fields", "effective mode needs the directory of an invert run"))
    if out["predictor"] not in ("linear", "constant"):
        errors.append(("ks.predictor", 'must be "linear" or "constant"'))
    if not (0 < out["theta"] <= 1):
        errors.append(("ks.theta", "must lie in (0, 1]"))
    fb = out["feedback"]
    if not (len(fb) == 2 and all(isinstance(v, (int, float)) for v in fb)):
        errors.append(("ks.feedback", "expected [kp, kd]"))
    return out


def _parse_taylor(errors, tab) -> dict:
    out = {"l_max": _get(errors, tab, "l_max", "int", 2, "taylor."),
           "compare": _get(errors, tab, "compare", "bool", True, "taylor.")}
    if not 0 <= out["l_max"] <= 4:
        errors.append(("taylor.l_max", "must lie in 0..4 (cap)"))
    return out


def _parse_sweep(errors, tab) -> dict:
    out = {
        "axis": _get(errors, tab, "axis", "str", None, "sweep."),
        "values": _get(errors, tab, "values", "list", [], "sweep."),
        "metric": _get(errors, tab, "metric", "str", "eom", "sweep."),
    }
    if out["axis"] not in SWEEP_AXES:
        errors.append(("sweep.axis", f"must be one of {SWEEP_AXES}"))
    if out["metric"] not in SWEEP_METRICS:
        errors.append(("sweep.metric", f"must be one of {SWEEP_METRICS}"))
    if not out["values"] or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in out["values"]):
        errors.append(("sweep.values", "need a non-empty list of numbers"))
    return out


KNOWN_TABLES = {"task", "model", "drive", "grid", "initial", "tolerances", "ks", "taylor", "sweep", "name"}


def parse_scenario(raw: dict, source: str | None = None) -> Scenario:
    errors: list[tuple[str, str]] = []
    for k in raw:
        if k not in KNOWN_TABLES:
            errors.append((k, "unknown top-level key"))
    task = raw.get("task")
    if task not in TASKS:
        errors.append(("task", f"must be one of {TASKS}"))
    spec = _parse_model(errors, raw.get("model", {}))
    drive = _parse_drive(errors, raw.get("drive", {}), spec)
    grid = _parse_grid(errors, raw.get("grid", {}), drive.t0)
    if grid is not None and abs(grid.t0 - drive.t0) > 1e-15 and grid.t0 < drive.t0:
        errors.append(("grid.t0", "grid starts before the drive origin"))
    initial = _parse_initial(errors, raw.get("initial", {}), spec)
    tol = _parse_tolerances(errors, raw.get("tolerances", {}))
    ks = _parse_ks(errors, raw.get("ks", {}))
    taylor = _parse_taylor(errors, raw.get("taylor", {}))
    sweep = _parse_sweep(errors, raw.get("sweep", {})) if task == "sweep" else {}
    if errors:
        raise SchemaError(errors)
    return Scenario(task, spec, drive, grid, initial, tol, ks, taylor, sweep, raw, source)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise SchemaError([("scenario", f"file not found: {path}")]) from None
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError([("scenario", f"TOML syntax error: {exc}")]) from None
    scn = parse_scenario(raw, str(path))
    if scn.initial.get("path") and not Path(scn.initial["path"]).is_absolute():
        scn.initial["path"] = str(path.parent / scn.initial["path"])
    if scn.ks.get("fields") and not Path(scn.ks["fields"]).is_absolute():
        scn.ks["fields"] = str(path.parent / scn.ks["fields"])
    return scn
