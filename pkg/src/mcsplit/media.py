"""Coefficient fields and continuum (auxiliary function) definitions.

Both live on fine cells: a field is a ``(fine_n, fine_n)`` raster of positive
conductivities, a continuum set is an ``(N, n_cells)`` array of weights.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContinuumError
from .geometry import MeshHierarchy

FIELD_KINDS = ("constant", "stripes", "three_value_layered", "lattice", "inclusions", "raster")


@dataclass(frozen=True)
class CoefficientField:
    """Cell-wise conductivity ``kappa``; ``values[j, i]`` is cell ``(i, j)``."""

    values: np.ndarray = dc_field(repr=False)
    kappa_min: float = dc_field(init=False)
    kappa_max: float = dc_field(init=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ConfigurationError(f"field raster must be square, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values <= 0):
            raise ConfigurationError("field values must be finite and strictly positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kappa_min", float(values.min()))
        object.__setattr__(self, "kappa_max", float(values.max()))

    @property
    def fine_n(self) -> int:
        return self.values.shape[0]

    @property
    def cells(self) -> np.ndarray:
        """Flat per-cell view in cell-index order."""
        return self.values.ravel()

    @property
    def contrast(self) -> float:
        return self.kappa_max / self.kappa_min

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()


@dataclass
class FieldSpec:
    """Recipe for a coefficient field.

    ``kind`` is one of :data:`FIELD_KINDS`.  Geometry parameters by kind:

    stripes / three_value_layered
        ``thickness`` (cells per layer, one per value, repeated periodically),
        ``axis`` (``"x2"``: layers stacked along x2, i.e. horizontal stripes;
        ``"x1"``: vertical), ``offset`` (cells).
    lattice
        ``values = [background, lines, patches]``: one-cell lines of
        ``values[1]`` along both axes every ``period`` cells, and a
        ``patch x patch`` square of ``values[2]`` in the lower-left corner of
        every lattice cell (``patch`` defaults to ``period // 2``).
    inclusions
        ``density`` (target area fraction of ``values[1]``), ``size``
        (``[min, max]`` inclusion side in cells).  Every block is guaranteed to
        hold both values.
    raster
        ``path`` to a CSV or raw little-endian float64 file (``.npy`` also
        accepted) holding ``fine_n x fine_n`` values, row-major with rows
        along x2.
    """

    kind: str
    values: list[float] = dc_field(default_factory=lambda: [1.0])
    params: dict[str, Any] = dc_field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ConfigurationError(f"unknown field kind {self.kind!r}; expected one of {FIELD_KINDS}")
        self.values = [float(v) for v in self.values]
        if self.kind != "raster" and (not self.values or min(self.values) <= 0):
            raise ConfigurationError(f"field values must be strictly positive, got {self.values}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": list(self.values), "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "FieldSpec":
        return cls(data["kind"], list(data.get("values", [1.0])), dict(data.get("params", {})), int(data.get("seed", 0)))


def generate_field(spec: FieldSpec, mesh: MeshHierarchy) -> CoefficientField:
    """Build the coefficient raster described by ``spec`` on ``mesh``'s fine grid."""
    n = mesh.fine_n
    p = spec.params
    if spec.kind == "constant":
        return CoefficientField(np.full((n, n), spec.values[0]))
    if spec.kind in ("stripes", "three_value_layered"):
        if spec.kind == "three_value_layered" and len(spec.values) != 3:
            raise ConfigurationError("three_value_layered needs exactly three values")
        thickness = [int(t) for t in p.get("thickness", [1] * len(spec.values))]
        if len(thickness) != len(spec.values) or min(thickness) < 1:
            raise ConfigurationError("stripes need one positive thickness per value")
        pattern = np.repeat(np.asarray(spec.values), thickness)
        rows = pattern[(np.arange(n) + int(p.get("offset", 0))) % len(pattern)]
        axis = p.get("axis", "x2")
        if axis == "x2":
            raster = np.repeat(rows[:, None], n, axis=1)
        elif axis == "x1":
            raster = np.repeat(rows[None, :], n, axis=0)
        else:
            raise ConfigurationError(f"stripe axis must be 'x1' or 'x2', got {axis!r}")
        return CoefficientField(raster)
    if spec.kind == "lattice":
        if len(spec.values) != 3:
            raise ConfigurationError("lattice needs three values (background, lines, patches)")
        period = int(p.get("period", 5))
        patch = int(p.get("patch", period // 2))
        if period < 3 or not 1 <= patch <= period // 2:
            raise ConfigurationError("lattice needs period >= 3 and 1 <= patch <= period // 2")
        j, i = np.mgrid[0:n, 0:n] % period
        raster = np.full((n, n), spec.values[0])
        raster[(i < patch) & (j < patch)] = spec.values[2]
        raster[(i == period // 2) | (j == period // 2)] = spec.values[1]
        return CoefficientField(raster)
    if spec.kind == "inclusions":
        return CoefficientField(_inclusions(spec, mesh))
    return CoefficientField(read_raster(p["path"], n))


def _inclusions(spec: FieldSpec, mesh: MeshHierarchy) -> np.ndarray:
    if len(spec.values) != 2:
        raise ConfigurationError("inclusions need two values (background, inclusion)")
    n, r = mesh.fine_n, mesh.ratio
    density = float(spec.params.get("density", 0.2))
    smin, smax = (int(s) for s in spec.params.get("size", [1, max(1, r // 2)]))
    if not 0 < density < 1 or not 1 <= smin <= smax:
        raise ConfigurationError("inclusions need 0 < density < 1 and 1 <= size[0] <= size[1]")
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((n, n), dtype=bool)
    while mask.mean() < density:
        w, hgt = rng.integers(smin, smax + 1, size=2)
        i, j = rng.integers(0, n - w + 1), rng.integers(0, n - hgt + 1)
        mask[j : j + hgt, i : i + w] = True
    # every block must hold both phases
    for block in range(mesh.n_blocks):
        b = mesh.block_box(block)
        sub = mask[b.j0 : b.j1, b.i0 : b.i1]
        if not sub.any():
            i, j = rng.integers(0, r, size=2)
            sub[j, i] = True
        if sub.all():
            i, j = rng.integers(0, r, size=2)
            sub[j, i] = False
    return np.where(mask, spec.values[1], spec.values[0])


def read_raster(path: str | Path, fine_n: int) -> np.ndarray:
    """Read a ``fine_n x fine_n`` raster from CSV, ``.npy`` or raw float64."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    elif path.suffix.lower() == ".npy":
        data = np.load(path)
    else:
        data = np.fromfile(path, dtype="<f8")
        if data.size != fine_n * fine_n:
            raise ConfigurationError(f"raster {path} holds {data.size} values, expected {fine_n}x{fine_n}")
        data = data.reshape(fine_n, fine_n)
    if data.shape != (fine_n, fine_n):
        raise ConfigurationError(f"raster {path} has shape {data.shape}, expected ({fine_n}, {fine_n})")
    return data


@dataclass(frozen=True)
class ContinuumSet:
    """Auxiliary functions ``psi_i`` sampled at fine-cell centers.

    Attributes
    ----------
    weights : ndarray, shape (N, n_cells)
    block_masses : ndarray, shape (N, n_blocks)
        ``int_{K} psi_i`` by midpoint quadrature.
    characteristic : bool
        True when every ``psi_i`` is a 0/1 indicator.
    labels : tuple of str
    """

    weights: np.ndarray = dc_field(repr=False)
    block_masses: np.ndarray = dc_field(repr=False)
    characteristic: bool
    labels: tuple[str, ...]
    band_values: tuple[float, ...] | None = None

    @property
    def N(self) -> int:
        return self.weights.shape[0]

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.weights).tobytes()).hexdigest()

    @classmethod
    def from_weights(cls, weights, mesh: MeshHierarchy, labels=None, characteristic=None, band_values=None):
        """Validate ``weights`` against ``mesh`` and compute block masses.

        Raises
        ------
        ContinuumError
            If some continuum has zero mass in a block, or the restrictions
            to a block are linearly dependent.
        """
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        if weights.shape[1] != mesh.n_cells:
            raise ContinuumError(f"weights have {weights.shape[1]} cells, mesh has {mesh.n_cells}")
        N = weights.shape[0]
        masses = np.stack([np.bincount(mesh.cell_block, w, minlength=mesh.n_blocks) for w in weights]) * mesh.h**2
        tiny = 1e-12 * mesh.h**2
        for i, block in zip(*np.nonzero(np.abs(masses) <= tiny)):
            raise ContinuumError(f"continuum {i + 1} not represented in block {block}")
        order = np.argsort(mesh.cell_block, kind="stable")
        per_block = weights[:, order].reshape(N, mesh.n_blocks, -1)
        for block in range(mesh.n_blocks):
            if np.linalg.matrix_rank(per_block[:, block, :]) < N:
                raise ContinuumError(f"continua are linearly dependent in block {block}")
        if characteristic is None:
            characteristic = bool(np.all((weights == 0) | (weights == 1)))
        labels = tuple(labels) if labels is not None else tuple(f"psi{i + 1}" for i in range(N))
        weights.setflags(write=False)
        masses.setflags(write=False)
        return cls(weights, masses, bool(characteristic), labels, None if band_values is None else tuple(band_values))


def continua_by_threshold(field: CoefficientField, cuts: Sequence[float], mesh: MeshHierarchy) -> ContinuumSet:
    """Indicators of the value bands separated by ascending ``cuts``.

    Continuum 1 is the lowest band.  A cell whose value equals a cut goes to
    the band above it.
    """
    cuts = np.asarray(sorted(float(c) for c in cuts))
    band = np.searchsorted(cuts, field.cells, side="right")
    N = len(cuts) + 1
    values = []
    for k in range(N):
        sel = band == k
        if not sel.any():
            raise ContinuumError(f"cut list leaves band {k + 1} empty")
        values.append(float(np.median(field.cells[sel])))
    weights = np.stack([(band == k).astype(float) for k in range(N)])
    return ContinuumSet.from_weights(
        weights, mesh, labels=[f"band{k + 1}" for k in range(N)], characteristic=True, band_values=values
    )


def continua_union(base: ContinuumSet, unions: Sequence[Sequence[int]], mesh: MeshHierarchy) -> ContinuumSet:
    """New continua as sums of base continua (0-based indices in ``unions``)."""
    rows = []
    for u in unions:
        idx = sorted(set(int(i) for i in u))
        if not idx or idx[0] < 0 or idx[-1] >= base.N:
            raise ContinuumError(f"invalid union {list(u)} for {base.N} continua")
        rows.append(base.weights[idx].sum(axis=0))

    labels = ["+".join(base.labels[i] for i in sorted(set(u))) for u in unions]
    return ContinuumSet.from_weights(np.stack(rows), mesh, labels=labels)


def continua_with_linear(base: ContinuumSet, mesh: MeshHierarchy, direction: int = 0) -> ContinuumSet:
    """Append ``(x_dir - c_dir) psi_i`` for each base continuum.

    ``c_dir`` is the minimal ``dir`` coordinate of the block owning the cell;
    ``direction`` is 0 for x1 and 1 for x2.
    """
    if direction not in (0, 1):
        raise ConfigurationError(f"direction must be 0 or 1, got {direction}")
    if not base.characteristic:
        raise ContinuumError("linear auxiliaries need a characteristic base set")
    centers = mesh.cell_centers()[:, direction]
    bx_or_by = (mesh.cell_block % mesh.coarse_n) if direction == 0 else (mesh.cell_block // mesh.coarse_n)
    offset = centers - bx_or_by * mesh.H
    extra = base.weights * offset[None, :]
    axis = "x1" if direction == 0 else "x2"
    labels = list(base.labels) + [f"({axis}-c)*{lab}" for lab in base.labels]
    return ContinuumSet.from_weights(np.vstack([base.weights, extra]), mesh, labels=labels, characteristic=False)
