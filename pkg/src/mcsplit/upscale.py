"""Cell problems on oversampled regions and block-wise effective tensors.

For every coarse block ``K`` and continuum ``i`` we minimize the energy
``int_{K+} kappa |grad phi|^2`` on the oversampled region ``K+`` subject to
average constraints on every member block (natural boundary conditions on
``dK+``).  The constant basis ``phi_i`` averages to ``delta_ij`` on each
continuum ``j``; the linear basis ``phi_i^m`` averages to
``delta_ij (x_m - xt_m)``, with ``xt_m`` the ``psi_i``-weighted centroid of
``K`` so that the target-block moment vanishes.  All 3N problems of a block
share one KKT factorization.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np

from .assembly import (
    assemble_load,
    assemble_stiffness,
    gram_on_box,
    constraint_matrix,
    first_moments,
    weighted_centroid,
)
from .exceptions import ConfigurationError, SolverError
from .geometry import MeshHierarchy, oversample
from .linalg import SADDLE_RTOL, SaddleSolver
from .media import CoefficientField, ContinuumSet

logger = logging.getLogger(__name__)

CACHE_VERSION = 2
CONSTRAINT_RTOL = 1e-9
ASYMMETRY_RTOL = 1e-10
BOUNDARY_CONDITIONS = ("natural", "dirichlet")


@dataclass
class BlockBasis:
    """Multiscale basis of one block, restricted to the block's fine nodes.

    ``phi[:, i]`` is the constant basis of continuum ``i``; ``phim[:, i, m]``
    the linear basis in direction ``m``; ``centers[i, m]`` the constraint
    center ``xt_m``.  ``region_phi``/``region_phim`` hold the unrestricted
    solutions on ``K+`` when requested.
    """

    block: int
    phi: np.ndarray = dc_field(repr=False)
    phim: np.ndarray = dc_field(repr=False)
    centers: np.ndarray = dc_field(repr=False)
    constraint_residual: float = 0.0
    region_phi: np.ndarray | None = dc_field(default=None, repr=False)
    region_phim: np.ndarray | None = dc_field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.phi.shape[1]


@dataclass
class EffectiveTensors:
    """Block averages ``(1/|K|) int_K ...`` of basis products.

    A[k, m, l, n]   kappa grad phi_k^m . grad phi_l^n
    M[k, l]         phi_k phi_l
    C[k, l]         kappa grad phi_k . grad phi_l
    Bc[i, m, j]     kappa grad phi_j^m . grad phi_i   (diagnostic)
    f[j]            f phi_j
    Mc[k, l, n]     phi_k phi_l^n                    (full mass form only)
    Mg[k, m, l, n]  phi_k^m phi_l^n                  (full mass form only)
    """

    block: int
    A: np.ndarray
    M: np.ndarray
    C: np.ndarray
    Bc: np.ndarray
    f: np.ndarray
    Mc: np.ndarray
    Mg: np.ndarray

    ARRAYS = ("A", "M", "C", "Bc", "f", "Mc", "Mg")


def _sym4(A):
    return 0.5 * (A + A.transpose(2, 3, 0, 1))


def _check_asym(name, T, Tt):
    scale = max(np.abs(T).max(), np.finfo(float).tiny)
    asym = np.abs(T - Tt).max()
    if asym > ASYMMETRY_RTOL * scale:
        raise SolverError(f"{name} asymmetry {asym / scale:.2e} exceeds {ASYMMETRY_RTOL:.0e}")


def solve_block(
    mesh: MeshHierarchy,
    field: CoefficientField,
    continua: ContinuumSet,
    block: int,
    layers: int,
    keep_region: bool = False,
    directions: tuple[int, ...] = (0, 1),
    boundary: str = "natural",
) -> BlockBasis:
    """Solve all constant and linear cell problems of one block.

    ``boundary`` is ``"natural"`` (no essential condition on ``dK+``) or
    ``"dirichlet"`` (zero on all of ``dK+``).
    """
    if boundary not in BOUNDARY_CONDITIONS:
        raise ConfigurationError(f"boundary must be one of {BOUNDARY_CONDITIONS}, got {boundary!r}")
    region = oversample(mesh, block, layers)
    box = region.box
    N = continua.N
    A = assemble_stiffness(field, box)
    A = A / abs(A).max()
    B, masses = constraint_matrix(region, continua, mesh)
    Bs = (B.multiply(1.0 / masses[:, None])).tocsr()
    free = np.arange(box.n_nodes)
    if boundary == "dirichlet":
        iy, ix = np.divmod(free, box.nx + 1)
        free = free[(ix > 0) & (ix < box.nx) & (iy > 0) & (iy < box.ny)]
        A = A[free][:, free]
        Bs = Bs[:, free]
    try:
        solver = SaddleSolver(A, Bs)
    except SolverError as err:
        raise SolverError(f"block {block}: {err}", err.residual) from err

    n_rows = Bs.shape[0]
    rhs = np.zeros((n_rows, N * (1 + len(directions))))
    centers = np.zeros((N, 2))
    target_rows = np.arange(region.n_members) * N
    for i in range(N):
        rhs[target_rows + i, i] = 1.0
        for k, m in enumerate(directions):
            centers[i, m] = weighted_centroid(continua, mesh, block, i, m)
            mom = first_moments(region, continua, mesh, m, centers[i, m]) / masses
            rhs[target_rows + i, N * (1 + k) + i] = mom[target_rows + i]
    try:
        xf, _ = solver.solve(np.zeros((len(free), rhs.shape[1])), rhs)
    except SolverError as err:
        raise SolverError(f"block {block}: {err}", err.residual) from err
    x = np.zeros((box.n_nodes, rhs.shape[1]))
    x[free] = xf

    # constraint residuals, relative to the continuum mass (times H for moments)
    res = np.abs(Bs @ xf - rhs)
    res[:, N:] /= mesh.H
    worst = float(res.max())
    if worst > CONSTRAINT_RTOL:
        raise SolverError(f"block {block}: constraint residual {worst:.2e} exceeds {CONSTRAINT_RTOL:.0e}", worst)

    local = box.sub_box_nodes(mesh.block_box(block))
    phi = x[local, :N]
    phim = np.zeros((len(local), N, 2))
    for k, m in enumerate(directions):
        phim[:, :, m] = x[local, N * (1 + k) : N * (2 + k)]
    basis = BlockBasis(block, phi, phim, centers, worst)
    if keep_region:
        basis.region_phi = x[:, :N]
        rp = np.zeros((box.n_nodes, N, 2))
        for k, m in enumerate(directions):
            rp[:, :, m] = x[:, N * (1 + k) : N * (2 + k)]
        basis.region_phim = rp
    return basis


def solve_basis_constant(mesh, field, continua, block, layers) -> np.ndarray:
    """Constant-average basis ``phi_i`` on the target block, shape ``(n_K, N)``."""
    return solve_block(mesh, field, continua, block, layers, directions=()).phi


def solve_basis_linear(mesh, field, continua, block, layers, m: int) -> np.ndarray:
    """Linear-average basis ``phi_i^m`` on the target block, shape ``(n_K, N)``."""
    return solve_block(mesh, field, continua, block, layers, directions=(m,)).phim[:, :, m]


def effective_tensors(
    basis: BlockBasis,
    field: CoefficientField,
    mesh: MeshHierarchy,
    source: Callable | None = None,
) -> EffectiveTensors:
    """Block-averaged tensors of ``basis`` by exact Q1 quadrature on the block."""
    box = mesh.block_box(basis.block)
    area = mesh.H**2
    phi, phim = basis.phi, basis.phim
    N = basis.N
    X = np.hstack([phi, phim.reshape(len(phi), 2 * N)])  # linear columns k*2 + m
    GS = gram_on_box(field, box, mesh.h, X, "stiffness") / area
    GM = gram_on_box(field, box, mesh.h, X, "mass") / area

    C = GS[:N, :N]
    A = GS[N:, N:].reshape(N, 2, N, 2)
    Bc = GS[:N, N:].reshape(N, N, 2).transpose(0, 2, 1)
    M = GM[:N, :N]
    Mc = GM[:N, N:].reshape(N, N, 2)
    Mg = GM[N:, N:].reshape(N, 2, N, 2)

    _check_asym("C", C, C.T)
    _check_asym("M", M, M.T)
    _check_asym("A", A, A.transpose(2, 3, 0, 1))
    if source is None:
        f = np.zeros(N)
    else:
        f = phi.T @ assemble_load(source, box, mesh.h) / area
    return EffectiveTensors(
        basis.block, _sym4(A), 0.5 * (M + M.T), 0.5 * (C + C.T), Bc, f, Mc, _sym4(Mg)
    )


# ---------------------------------------------------------------------------
# batch driver and cache


def cache_key(mesh, field, continua, layers, source_tag: str, boundary: str = "natural") -> str:
    payload = {
        "boundary": boundary,
        "version": CACHE_VERSION,
        "field": field.digest(),
        "continua": continua.digest(),
        "fine_n": mesh.fine_n,
        "coarse_n": mesh.coarse_n,
        "layers": int(layers),
        "source": source_tag,
        "tolerances": [SADDLE_RTOL, CONSTRAINT_RTOL],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _block_path(cache_dir: Path, key: str, block: int) -> Path:
    return Path(cache_dir) / key[:16] / f"block_{block:05d}.npz"


def save_block(path: Path, key: str, basis: BlockBasis, tensors: EffectiveTensors):
    """Write one block's basis and tensors.

    File layout (``numpy.savez``): ``version`` (int), ``key`` (str),
    ``block`` (int), ``phi``, ``phim``, ``centers``, ``constraint_residual``,
    and one float64 array per tensor name in :attr:`EffectiveTensors.ARRAYS`.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            version=np.int64(CACHE_VERSION),
            key=np.array(key),
            block=np.int64(basis.block),
            phi=basis.phi,
            phim=basis.phim,
            centers=basis.centers,
            constraint_residual=np.float64(basis.constraint_residual),
            **{name: getattr(tensors, name) for name in EffectiveTensors.ARRAYS},
        )
    os.replace(tmp, path)


def load_block(path: Path, key: str):
    with np.load(path, allow_pickle=False) as data:
        if int(data["version"]) != CACHE_VERSION or str(data["key"]) != key:
            raise ValueError("cache entry does not match key or version")
        block = int(data["block"])
        basis = BlockBasis(block, data["phi"], data["phim"], data["centers"], float(data["constraint_residual"]))
        tensors = EffectiveTensors(block, *(data[name] for name in EffectiveTensors.ARRAYS))
    return basis, tensors


@dataclass
class UpscaleStats:
    solved: int = 0
    loaded: int = 0


def _compute(mesh, field, continua, block, layers, source, boundary="natural"):
    basis = solve_block(mesh, field, continua, block, layers, boundary=boundary)
    return basis, effective_tensors(basis, field, mesh, source)


def upscale_all(
    mesh: MeshHierarchy,
    field: CoefficientField,
    continua: ContinuumSet,
    layers: int,
    cache_dir: str | Path | None = None,
    source: Callable | None = None,
    source_tag: str | None = None,
    n_jobs: int = 1,
    stats: UpscaleStats | None = None,
    boundary: str = "natural",
):
    """Basis and tensors for every block, as ``{block: (BlockBasis, EffectiveTensors)}``.

    Blocks are independent; ``n_jobs > 1`` runs them in worker processes.
    With ``cache_dir`` each block is read from / written to one ``.npz`` file
    keyed by a hash of all inputs; unreadable entries are recomputed.
    """
    stats = stats if stats is not None else UpscaleStats()
    if source_tag is None:
        source_tag = "none" if source is None else getattr(source, "__name__", "custom")
    key = cache_key(mesh, field, continua, layers, source_tag, boundary) if cache_dir else None
    results = {}
    todo = []
    for block in range(mesh.n_blocks):
        if cache_dir:
            path = _block_path(Path(cache_dir), key, block)
            if path.exists():
                try:
                    results[block] = load_block(path, key)
                    stats.loaded += 1
                    continue
                except Exception as err:  # corrupted or stale entry
                    warnings.warn(f"cache entry {path} unreadable ({err}); recomputing", RuntimeWarning)
        todo.append(block)

    if n_jobs == 1 or len(todo) <= 1:
        computed = [_compute(mesh, field, continua, b, layers, source, boundary) for b in todo]
    else:
        from joblib import Parallel, delayed

        computed = Parallel(n_jobs=n_jobs)(delayed(_compute)(mesh, field, continua, b, layers, source, boundary) for b in todo)
    for block, (basis, tensors) in zip(todo, computed):
        results[block] = (basis, tensors)
        stats.solved += 1
        if cache_dir:
            save_block(_block_path(Path(cache_dir), key, block), key, basis, tensors)
    logger.info("upscaled %d blocks (%d solved, %d from cache)", mesh.n_blocks, len(todo), stats.loaded)
    return {b: results[b] for b in range(mesh.n_blocks)}


@dataclass
class TensorStack:
    """Per-block tensors stacked along a leading block axis."""

    A: np.ndarray
    M: np.ndarray
    C: np.ndarray
    Bc: np.ndarray
    f: np.ndarray
    Mc: np.ndarray
    Mg: np.ndarray

    @property
    def N(self) -> int:
        return self.M.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.M.shape[0]

    @classmethod
    def from_results(cls, results) -> "TensorStack":
        blocks = sorted(results)
        return cls(*(np.stack([getattr(results[b][1], name) for b in blocks]) for name in EffectiveTensors.ARRAYS))

    def save(self, path):
        np.savez(path, **{name: getattr(self, name) for name in EffectiveTensors.ARRAYS})

    @classmethod
    def load(cls, path) -> "TensorStack":
        with np.load(path) as data:
            return cls(*(data[name] for name in EffectiveTensors.ARRAYS))
