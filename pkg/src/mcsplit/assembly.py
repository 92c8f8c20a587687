"""Q1 finite element assembly on rectangular boxes of fine cells.

Element matrices are closed-form tensor products of the 1-D linear element;
the local corner order is ``a = ax + 2 * ay`` (see :meth:`CellBox.cell_nodes`).
No boundary conditions are applied here.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .geometry import CellBox, MeshHierarchy, OversampleRegion
from .media import CoefficientField, ContinuumSet

_K1 = np.array([[1.0, -1.0], [-1.0, 1.0]])  # times 1/h
_M1 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0  # times h
_D1 = np.array([[-0.5, -0.5], [0.5, 0.5]])  # int N_a' N_b, h-free


def element_stiffness() -> np.ndarray:
    """Unit-coefficient Q1 stiffness of a square cell (independent of its size in 2-D)."""
    return np.kron(_M1, _K1) + np.kron(_K1, _M1)


def element_mass(h: float) -> np.ndarray:
    return np.kron(_M1, _M1) * h * h


def element_factor(E: np.ndarray) -> np.ndarray:
    """Rows ``L`` with ``L^T L = E`` for a symmetric PSD element matrix ``E``."""
    w, Q = np.linalg.eigh(E)
    keep = w > 1e-12 * w.max()
    return np.sqrt(w[keep])[:, None] * Q[:, keep].T


def gram_on_box(field, box: CellBox, h: float, X: np.ndarray, kind: str = "stiffness") -> np.ndarray:
    """``X^T E X`` for the box stiffness (``kappa``-weighted) or mass matrix.

    Computed as ``W^T W`` with cell-wise factors so the result is symmetric
    to the last bit and free of the cancellation in ``X^T (E X)`` at high
    contrast.
    """
    if kind == "stiffness":
        L = element_factor(element_stiffness())
        weight = np.sqrt(_box_kappa(field, box))
    else:
        L = element_factor(element_mass(h))
        weight = np.ones(box.n_cells)
    local = X[box.cell_nodes()]  # (n_cells, 4, k)
    W = np.einsum("ra,cak->crk", L, local) * weight[:, None, None]
    W = W.reshape(-1, X.shape[1])
    return W.T @ W


def element_directional_stiffness() -> np.ndarray:
    """``S[m, n, a, b] = int dN_a/dx_m dN_b/dx_n`` on a square cell, shape (2, 2, 4, 4)."""
    S = np.empty((2, 2, 4, 4))
    S[0, 0] = np.kron(_M1, _K1)
    S[1, 1] = np.kron(_K1, _M1)
    S[0, 1] = np.kron(_D1.T, _D1)
    S[1, 0] = S[0, 1].T
    return S


def element_gradient_mass(h: float) -> np.ndarray:
    """``G[m, a, b] = int dN_a/dx_m N_b`` on a square cell of side ``h``, shape (2, 4, 4)."""
    G = np.empty((2, 4, 4))
    G[0] = np.kron(_M1, _D1) * h
    G[1] = np.kron(_D1, _M1) * h
    return G


def _scatter(box: CellBox, local: np.ndarray) -> sp.csr_matrix:
    """Sum per-cell ``(n_cells, 4, 4)`` element matrices into a box matrix."""
    nodes = box.cell_nodes()
    rows = np.broadcast_to(nodes[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(nodes[:, None, :], local.shape).ravel()
    n = box.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _box_kappa(field: CoefficientField | np.ndarray, box: CellBox) -> np.ndarray:
    values = field.values if isinstance(field, CoefficientField) else np.asarray(field, dtype=float)
    return values[box.j0 : box.j1, box.i0 : box.i1].ravel()


def assemble_stiffness(field: CoefficientField | np.ndarray, box: CellBox) -> sp.csr_matrix:
    """``a(u, v) = int kappa grad u . grad v`` over ``box`` (natural boundary)."""
    kappa = _box_kappa(field, box)
    return _scatter(box, kappa[:, None, None] * element_stiffness()[None])


def assemble_mass(box: CellBox, h: float) -> sp.csr_matrix:
    """Consistent (unlumped) Q1 mass matrix of ``box``."""
    return _scatter(box, np.broadcast_to(element_mass(h), (box.n_cells, 4, 4)))


_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)


def assemble_load(source: Callable[[np.ndarray, np.ndarray], np.ndarray], box: CellBox, h: float) -> np.ndarray:
    """``(f, N_a)`` by 2x2 Gauss quadrature per cell.

    ``source(x1, x2)`` must accept arrays and broadcast.
    """
    jj, ii = np.meshgrid(np.arange(box.j0, box.j1), np.arange(box.i0, box.i1), indexing="ij")
    xc, yc = (ii.ravel() + 0.5) * h, (jj.ravel() + 0.5) * h
    local = np.zeros((box.n_cells, 4))
    for gy in _GAUSS:
        for gx in _GAUSS:
            fx = np.asarray(source(xc + 0.5 * h * gx, yc + 0.5 * h * gy), dtype=float)
            fx = np.broadcast_to(fx, xc.shape)
            sx, sy = 0.5 * (1 + gx), 0.5 * (1 + gy)
            shape = np.array([(1 - sx) * (1 - sy), sx * (1 - sy), (1 - sx) * sy, sx * sy])
            local += fx[:, None] * shape[None, :] * (h * h / 4.0)
    out = np.zeros(box.n_nodes)
    np.add.at(out, box.cell_nodes().ravel(), local.ravel())
    return out


def gaussian_source(x1, x2):
    """Gaussian bump ``10 exp(-40 |x - (0.5, 0.5)|^2)``."""
    return 10.0 * np.exp(-40.0 * ((x1 - 0.5) ** 2 + (x2 - 0.5) ** 2))


@dataclass(frozen=True)
class ConstraintBlock:
    """Constraint rows ``B x = g`` of a cell problem.

    Row ``p * N + j`` pairs member block ``region.members[p]`` with continuum ``j``.
    """

    B: sp.csr_matrix
    g: np.ndarray
    masses: np.ndarray  # int_{K^p} psi_j, same row order


def constraint_matrix(region: OversampleRegion, continua: ContinuumSet, mesh: MeshHierarchy):
    """Midpoint-rule functionals ``v -> int_{K^p} psi_j v`` on the region's nodes.

    Returns ``(B, masses)``.
    """
    box, N, h = region.box, continua.N, mesh.h
    cell_ids = box.cell_ids(mesh.fine_n)
    nodes = box.cell_nodes()
    member_pos = {b: p for p, b in enumerate(region.members)}
    cell_member = np.array([member_pos[b] for b in mesh.cell_block[cell_ids]])
    psi = continua.weights[:, cell_ids]  # (N, n_cells)
    rows = (cell_member[None, :] * N + np.arange(N)[:, None])  # (N, n_cells)
    vals = psi * (h * h / 4.0)
    R = np.broadcast_to(rows[:, :, None], (N, len(cell_ids), 4)).ravel()
    C = np.broadcast_to(nodes[None, :, :], (N, len(cell_ids), 4)).ravel()
    V = np.broadcast_to(vals[:, :, None], (N, len(cell_ids), 4)).ravel()
    B = sp.csr_matrix((V, (R, C)), shape=(region.n_members * N, box.n_nodes))
    masses = continua.block_masses[:, list(region.members)].T.ravel()
    return B, masses


def first_moments(region: OversampleRegion, continua: ContinuumSet, mesh: MeshHierarchy, direction: int, center: float):
    """``int_{K^p} (x_m - center) psi_j`` for all rows ``(p, j)`` (midpoint rule)."""
    N, h = continua.N, mesh.h
    out = np.empty((region.n_members, N))
    for p, block in enumerate(region.members):
        cells = mesh.block_cells(block)
        x = mesh.cell_centers(mesh.block_box(block))[:, direction]
        out[p] = continua.weights[:, cells] @ (x - center) * h * h
    return out.ravel()


def weighted_centroid(continua: ContinuumSet, mesh: MeshHierarchy, block: int, i: int, direction: int) -> float:
    """``psi_i``-weighted mean of ``x_direction`` over a block (0-based ``i``)."""
    cells = mesh.block_cells(block)
    x = mesh.cell_centers(mesh.block_box(block))[:, direction]
    w = continua.weights[i, cells]
    return float(w @ x / w.sum())


def constraint_rows(
    region: OversampleRegion,
    continua: ContinuumSet,
    mesh: MeshHierarchy,
    target_i: int,
    mode: str = "constant",
    direction: int = 0,
    center: float | None = None,
) -> ConstraintBlock:
    """Constraint rows and right-hand side for target continuum ``target_i`` (0-based).

    ``mode="constant"``: ``g = delta_ij int psi_j``.  ``mode="linear"``:
    ``g = delta_ij int (x_m - center) psi_j``; ``center`` defaults to the
    ``psi_i``-weighted centroid of the target block.
    """
    B, masses = constraint_matrix(region, continua, mesh)
    N = continua.N
    delta = np.tile(np.arange(N) == target_i, region.n_members)
    if mode == "constant":
        g = np.where(delta, masses, 0.0)
    elif mode == "linear":
        if center is None:
            center = weighted_centroid(continua, mesh, region.target, target_i, direction)
        g = np.where(delta, first_moments(region, continua, mesh, direction, center), 0.0)
    else:
        raise ValueError(f"mode must be 'constant' or 'linear', got {mode!r}")
    return ConstraintBlock(B, g, masses)
