"""Back-projection of split variables, per-continuum error curves and
fine-scale reconstruction."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError
from .geometry import MeshHierarchy
from .macrosystem import coarse_nodes
from .media import ContinuumSet


def project_back(states, v_hat) -> np.ndarray:
    """Continuum variables ``U`` from split variables ``U_hat = v_hat U``.

    ``states`` has shape ``(..., N * n)`` with continuum-major stacking.
    """
    v_hat = np.asarray(v_hat, dtype=float)
    N = v_hat.shape[0]
    states = np.asarray(states, dtype=float)
    if states.shape[-1] % N:
        raise ConfigurationError(f"state length {states.shape[-1]} is not a multiple of N={N}")
    lead = states.shape[:-1]
    X = states.reshape(lead + (N, -1))
    out = np.linalg.solve(v_hat, np.moveaxis(X, -2, 0).reshape(N, -1))
    return np.moveaxis(out.reshape((N,) + lead + (X.shape[-1],)), 0, -2).reshape(states.shape)


def mix(states, v) -> np.ndarray:
    """Split variables ``U_hat = v_hat U`` from continuum variables ``U``."""
    v = np.asarray(v, dtype=float)
    N = v.shape[0]
    states = np.asarray(states, dtype=float)
    X = states.reshape(states.shape[:-1] + (N, -1))
    # U = v^T U_hat  =>  U_hat = (v^T)^{-1} U
    return np.einsum("ij,...jn->...in", np.linalg.inv(v.T), X).reshape(states.shape)


def full_coarse_field(U, coarse_n: int) -> np.ndarray:
    """Interior coarse values ``(N, n_int)`` to all coarse nodes ``(N, (coarse_n+1)^2)``."""
    _, interior = coarse_nodes(coarse_n)
    U = np.asarray(U, dtype=float).reshape(-1, (coarse_n - 1) ** 2)
    out = np.zeros((U.shape[0], len(interior)))
    inside = interior >= 0
    out[:, inside] = U[:, interior[inside]]
    return out


def macro_block_averages(U, coarse_n: int) -> np.ndarray:
    """``(1/|K|) int_K U_i`` for each continuum and block, shape ``(N, n_blocks)``."""
    corners, _ = coarse_nodes(coarse_n)
    return full_coarse_field(U, coarse_n)[:, corners].mean(axis=2)


def reference_block_averages(u, continua: ContinuumSet, mesh: MeshHierarchy) -> np.ndarray:
    """``int_K u psi_i / int_K psi_i`` for a fine nodal field ``u`` (all nodes)."""
    cell_nodes = mesh.domain_box.cell_nodes()
    cell_avg = np.asarray(u)[cell_nodes].mean(axis=1)
    out = np.empty((continua.N, mesh.n_blocks))
    for i in range(continua.N):
        num = np.bincount(mesh.cell_block, continua.weights[i] * cell_avg, minlength=mesh.n_blocks)
        out[i] = num * mesh.h**2 / continua.block_masses[i]
    return out


@dataclass
class ErrorSeries:
    """``errors[k, i]`` is ``e^(i)`` at ``times[k]`` (NaN where undefined)."""

    times: np.ndarray
    errors: np.ndarray
    labels: tuple[str, ...] = ()

    def final(self) -> np.ndarray:
        return self.errors[-1]

    def to_csv(self, path):
        path = Path(path)
        N = self.errors.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"e{i + 1}" for i in range(N)])
            for t, row in zip(self.times, self.errors):
                w.writerow([repr(float(t))] + ["" if np.isnan(x) else repr(float(x)) for x in row])


def relative_errors(times, macro_states, reference, continua: ContinuumSet, mesh: MeshHierarchy) -> ErrorSeries:
    """Relative block-average errors per continuum.

    ``macro_states[k]`` holds continuum (not split) coarse variables at
    ``times[k]``; ``reference`` is a :class:`~mcsplit.reference.FineTrajectory`
    with snapshots at the same times.
    """
    times = np.asarray(times, dtype=float)
    errs = np.full((len(times), continua.N), np.nan)
    for k, t in enumerate(times):
        ref = reference_block_averages(reference.at(t), continua, mesh)
        mac = macro_block_averages(macro_states[k], mesh.coarse_n)
        den = np.sum(ref**2, axis=1)
        num = np.sum((mac - ref) ** 2, axis=1)
        ok = den > 0
        errs[k, ok] = np.sqrt(num[ok] / den[ok])
    return ErrorSeries(times, errs, continua.labels)


def _center_values(U_full, corners, H):
    Uc = U_full[:, corners]  # (N, nb, 4)
    val = Uc.mean(axis=2)
    gx = ((Uc[..., 1] - Uc[..., 0]) + (Uc[..., 3] - Uc[..., 2])) / (2 * H)
    gy = ((Uc[..., 2] - Uc[..., 0]) + (Uc[..., 3] - Uc[..., 1])) / (2 * H)
    return val, np.stack([gx, gy], axis=-1)


def downscale(U, bases, mesh: MeshHierarchy, evaluation: str = "center") -> np.ndarray:
    """Fine nodal field ``sum_i phi_i U_i + phi_i^m d_m U_i`` assembled block by block.

    ``U`` holds continuum coarse variables ``(N * n_int)``; ``bases`` maps
    block id to :class:`~mcsplit.upscale.BlockBasis`.  With
    ``evaluation="center"`` ``U_i`` and its gradient are taken at the block
    center; ``"pointwise"`` evaluates the bilinear field at each fine node.
    Nodes shared by neighbouring blocks receive the mean of the block values.
    """
    if evaluation not in ("center", "pointwise"):
        raise ConfigurationError(f"evaluation must be 'center' or 'pointwise', got {evaluation!r}")
    cn, H = mesh.coarse_n, mesh.H
    corners, _ = coarse_nodes(cn)
    U_full = full_coarse_field(U, cn)
    val, grad = _center_values(U_full, corners, H)
    n_all = (mesh.fine_n + 1) ** 2
    acc = np.zeros(n_all)
    cnt = np.zeros(n_all)
    for b in range(mesh.n_blocks):
        basis = bases[b]
        box = mesh.block_box(b)
        nodes = box.node_ids(mesh.fine_n)
        if evaluation == "center":
            u = basis.phi @ val[:, b] + np.einsum("kim,im->k", basis.phim, grad[:, b])
        else:
            xy = mesh.node_coordinates(box)
            s = (xy - mesh.block_origin(b)) / H  # local coordinates in [0, 1]
            Uc = U_full[:, corners[b]]  # (N, 4)
            sx, sy = s[:, 0], s[:, 1]
            shape = np.stack([(1 - sx) * (1 - sy), sx * (1 - sy), (1 - sx) * sy, sx * sy], axis=1)
            dx = np.stack([-(1 - sy), 1 - sy, -sy, sy], axis=1) / H
            dy = np.stack([-(1 - sx), -sx, 1 - sx, sx], axis=1) / H
            uv = shape @ Uc.T  # (n_nodes, N)
            g = np.stack([dx @ Uc.T, dy @ Uc.T], axis=-1)
            u = np.sum(basis.phi * uv, axis=1) + np.einsum("kim,kim->k", basis.phim, g)
        np.add.at(acc, nodes, u)
        np.add.at(cnt, nodes, 1.0)
    return acc / np.maximum(cnt, 1.0)
