"""Experiment configuration: YAML schema, presets and validation.

A config is a YAML mapping.  Every key is optional when ``preset`` names one
of :data:`PRESETS`; explicit keys override the preset (nested mappings are
merged).  Continuum and split indices in config files are 1-based.

Schema::

    preset: example1            # example1 .. example5
    seed: 0
    mesh:
      fine_n: 100               # fine cells per side (h = 1/fine_n)
      coarse_n: [10, 20]        # one pipeline per coarse size
      layers: auto              # oversampling layers, auto = ceil(-2 ln H)
    field:
      kind: stripes             # constant | stripes | three_value_layered | lattice | inclusions | raster
      values: [1, 1.0e5, 1]
      params: {thickness: [2, 1, 2], axis: x2}
    contrast: 1.0e5             # replaces the largest field value (min value 1)
    contrast_sweep: [1.0e4, 1.0e5, 1.0e6, 1.0e7]
    continua:
      kind: bands               # bands | union | linear
      cuts: auto                # geometric midpoints between sorted distinct values
      unions: [[1, 3], [1, 2], [2, 3]]
      direction: x1             # for kind: linear
    boundary: natural           # cell-problem condition on the oversampled boundary
    split:
      method: spectral          # spectral | manual
      slow: [1]                 # manual: slow continua
      fallback: true
      policy: {kind: gap, gap_ratio: 100}
    time:
      T: 1.5e-4
      tau: 1.0e-7               # step at fine_n = tau_fine_n; scaled in proportion to h
      tau_fine_n: 400
      snapshots: 15
    schemes: [implicit, explicit, scheme1, scheme2]
    mass_form: constant
    source: gaussian            # gaussian | none
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .exceptions import ConfigurationError
from .geometry import default_layers
from .macrosystem import MASS_FORMS, SCHEMES
from .media import FIELD_KINDS, FieldSpec
from .split import POLICIES, SelectionPolicy
from .upscale import BOUNDARY_CONDITIONS

FULL_FINE_N = 400
DESK_FINE_N = 100
CONTINUA_KINDS = ("bands", "union", "linear")
SPLIT_METHODS = ("spectral", "manual")

_BASE = {
    "seed": 0,
    "mesh": {"fine_n": DESK_FINE_N, "coarse_n": [10, 20], "layers": "auto"},
    "contrast": None,
    "contrast_sweep": [],
    "continua": {"kind": "bands", "cuts": "auto"},
    "boundary": "natural",
    "split": {"method": "spectral", "fallback": True, "policy": {"kind": "gap", "gap_ratio": 100.0}},
    "time": {"T": 1.5e-4, "tau": 1e-7, "tau_fine_n": FULL_FINE_N, "snapshots": 15},
    "schemes": list(SCHEMES),
    "mass_form": "constant",
    "source": "gaussian",
}

SWEEP = [1e4, 1e5, 1e6, 1e7]

PRESETS: dict[str, dict] = {
    "example1": {
        "field": {"kind": "stripes", "values": [1.0, 1e5, 1.0], "params": {"thickness": [2, 1, 2], "axis": "x2"}},
        "contrast": 1e5,
        "contrast_sweep": SWEEP,
        "split": {"method": "manual", "slow": [1]},
        "time": {"T": 1.5e-4, "tau": 1e-7},
    },
    "example2": {
        "field": {"kind": "inclusions", "values": [1.0, 1e5], "params": {"density": 0.25, "size": [1, 4]}},
        "contrast": 1e5,
        "contrast_sweep": SWEEP,
        "split": {"method": "manual", "slow": [1]},
        "time": {"T": 1e-4, "tau": 1e-7},
    },
    "example3": {
        "field": {"kind": "three_value_layered", "values": [1.0, 1e2, 1e7], "params": {"thickness": [2, 2, 1], "axis": "x2"}},
        "time": {"T": 6e-4, "tau": 5e-7},
    },
    "example4": {
        "field": {"kind": "lattice", "values": [1.0, 1e7, 1e2], "params": {"period": 5, "patch": 2}},
        "continua": {"kind": "union", "unions": [[1, 3], [1, 2], [2, 3]]},
        "time": {"T": 1.5e-4, "tau": 5e-8},
    },
    "example5": {
        "field": {"kind": "stripes", "values": [1.0, 1e5, 1.0], "params": {"thickness": [2, 1, 2], "axis": "x2"}},
        "continua": {"kind": "linear", "direction": "x1"},
        "time": {"T": 1.5e-4, "tau": 1e-7},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated, fully resolved experiment description."""

    name: str
    seed: int
    fine_n: int
    coarse_sizes: list[int]
    layers: int | None  # None: automatic per H
    field: FieldSpec
    contrast: float | None
    contrast_sweep: list[float]
    continua: dict
    boundary: str
    split: dict
    T: float
    tau: float
    snapshots: int
    schemes: list[str]
    mass_form: str
    source: str
    raw: dict

    def layers_for(self, coarse_n: int) -> int:
        return default_layers(1.0 / coarse_n) if self.layers is None else self.layers

    def field_spec(self, contrast: float | None = None) -> FieldSpec:
        """Field recipe with the largest value replaced by ``contrast``."""
        contrast = self.contrast if contrast is None else contrast
        spec = copy.deepcopy(self.field)
        if contrast is not None and spec.kind != "raster":
            top = max(spec.values)
            spec.values = [float(contrast) if v == top else v for v in spec.values]
        return spec

    def policy(self) -> SelectionPolicy:
        p = dict(self.split.get("policy", {}))
        return SelectionPolicy(**p)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def _require(cond, where: str, msg: str):
    if not cond:
        raise ConfigurationError(f"{where}: {msg}")


def _positive_ints(x, where):
    xs = x if isinstance(x, list) else [x]
    _require(all(isinstance(v, int) and v > 0 for v in xs), where, f"expected positive integer(s), got {x!r}")
    return [int(v) for v in xs]


def resolve(data: dict | None, overrides: dict | None = None) -> ExperimentConfig:
    """Merge ``data`` over its preset and the defaults, then validate."""
    data = dict(data or {})
    name = data.pop("preset", None)
    if name is not None and name not in PRESETS:
        raise ConfigurationError(f"preset: unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    raw = _merge(_BASE, PRESETS.get(name, {}))
    raw = _merge(raw, data)
    if overrides:
        raw = _merge(raw, overrides)
    raw["preset"] = name
    known = set(_BASE) | {"field", "preset"}
    for k in raw:
        _require(k in known, k, "unknown key")
    _require("field" in raw, "field", "missing (no preset given)")

    mesh = raw["mesh"]
    fine_n = _positive_ints(mesh.get("fine_n"), "mesh.fine_n")[0]
    coarse = _positive_ints(mesh.get("coarse_n"), "mesh.coarse_n")
    for c in coarse:
        _require(fine_n % c == 0, "mesh.coarse_n", f"{c} does not divide fine_n={fine_n}")
    layers = mesh.get("layers", "auto")
    if layers != "auto":
        _require(isinstance(layers, int) and layers >= 0, "mesh.layers", f"expected 'auto' or integer >= 0, got {layers!r}")
    if fine_n > DESK_FINE_N:
        warnings.warn(f"fine_n={fine_n} exceeds desk scale ({DESK_FINE_N}); expect long runtimes", RuntimeWarning)

    f = raw["field"]
    _require(isinstance(f, dict) and f.get("kind") in FIELD_KINDS, "field.kind", f"expected one of {FIELD_KINDS}")
    try:
        field = FieldSpec(f["kind"], list(f.get("values", [1.0])), dict(f.get("params", {})), int(f.get("seed", raw["seed"])))
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"field: {err}") from err

    contrast = raw.get("contrast")
    if contrast is not None:
        _require(float(contrast) > 0, "contrast", "must be positive")
        contrast = float(contrast)
    sweep = [float(c) for c in raw.get("contrast_sweep") or []]
    _require(all(c > 0 for c in sweep), "contrast_sweep", "values must be positive")

    cont = raw["continua"]
    _require(cont.get("kind") in CONTINUA_KINDS, "continua.kind", f"expected one of {CONTINUA_KINDS}")
    if cont["kind"] == "union":
        u = cont.get("unions")
        _require(isinstance(u, list) and u and all(isinstance(x, list) and x for x in u), "continua.unions", "expected a list of index lists")
        _require(all(isinstance(i, int) and i >= 1 for x in u for i in x), "continua.unions", "indices are 1-based integers")
    if cont["kind"] == "linear":
        _require(cont.get("direction", "x1") in ("x1", "x2"), "continua.direction", "expected x1 or x2")
    cuts = cont.get("cuts", "auto")
    _require(cuts == "auto" or (isinstance(cuts, list) and all(float(c) > 0 for c in cuts)), "continua.cuts", "expected 'auto' or positive list")

    _require(raw["boundary"] in BOUNDARY_CONDITIONS, "boundary", f"expected one of {BOUNDARY_CONDITIONS}")
    split = raw["split"]
    _require(split.get("method") in SPLIT_METHODS, "split.method", f"expected one of {SPLIT_METHODS}")
    if split["method"] == "manual":
        slow = split.get("slow")
        _require(isinstance(slow, list) and all(isinstance(i, int) and i >= 1 for i in slow), "split.slow", "expected 1-based integer list")
    policy = split.get("policy", {})
    _require(policy.get("kind", "gap") in POLICIES, "split.policy.kind", f"expected one of {POLICIES}")
    try:
        SelectionPolicy(**policy)
    except (TypeError, ValueError, ConfigurationError) as err:
        raise ConfigurationError(f"split.policy: {err}") from err

    t = raw["time"]
    T, tau0 = float(t.get("T")), float(t.get("tau"))
    _require(T > 0 and tau0 > 0, "time", "T and tau must be positive")
    ref_n = _positive_ints(t.get("tau_fine_n", FULL_FINE_N), "time.tau_fine_n")[0]
    tau = tau0 * ref_n / fine_n
    snaps = int(t.get("snapshots", 15))
    _require(snaps >= 1, "time.snapshots", "must be >= 1")

    schemes = list(raw["schemes"])
    for s in schemes:
        _require(s in SCHEMES, "schemes", f"unknown scheme {s!r}; expected {SCHEMES}")
    _require(raw["mass_form"] in MASS_FORMS, "mass_form", f"expected one of {MASS_FORMS}")
    _require(raw["source"] in ("gaussian", "none"), "source", "expected 'gaussian' or 'none'")

    return ExperimentConfig(
        name=name or "custom",
        seed=int(raw["seed"]),
        fine_n=fine_n,
        coarse_sizes=coarse,
        layers=None if layers == "auto" else int(layers),
        field=field,
        contrast=contrast,
        contrast_sweep=sweep,
        continua=dict(cont),
        boundary=raw["boundary"],
        split=dict(split),
        T=T,
        tau=tau,
        snapshots=snaps,
        schemes=schemes,
        mass_form=raw["mass_form"],
        source=raw["source"],
        raw=raw,
    )


def load_config(path: str | Path | None = None, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a YAML config (or start from ``preset`` alone) and resolve it."""
    data: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            mark = getattr(err, "problem_mark", None)
            where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
            raise ConfigurationError(f"{path}: YAML syntax error at {where}: {getattr(err, 'problem', err)}") from err
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    if preset is not None:
        data.setdefault("preset", preset)
    return resolve(data, overrides)


def auto_cuts(values) -> list[float]:
    """Geometric midpoints between the sorted distinct field values."""
    u = sorted(set(float(v) for v in values))
    return [math.sqrt(a * b) for a, b in zip(u[:-1], u[1:])]


def json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
