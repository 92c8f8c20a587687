"""Fine-grid reference solution: backward Euler with zero Dirichlet data."""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import assemble_load, assemble_mass, assemble_stiffness
from .exceptions import ConfigurationError, SolverError
from .geometry import MeshHierarchy
from .media import CoefficientField

STEP_RTOL = 1e-10


@dataclass
class FineTrajectory:
    """Snapshots of the fine solution (all nodes, boundary included) at ``times``."""

    tau: float
    times: np.ndarray
    snapshots: np.ndarray = dc_field(repr=False)  # (n_times, (fine_n + 1)^2)
    max_residual: float = 0.0

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(abs(t), self.tau):
            raise KeyError(f"no snapshot at t={t}")
        return self.snapshots[k]


def interior_nodes(fine_n: int) -> np.ndarray:
    nn = fine_n + 1
    iy, ix = np.divmod(np.arange(nn * nn), nn)
    return np.nonzero((ix > 0) & (ix < fine_n) & (iy > 0) & (iy < fine_n))[0]


def fine_system(mesh: MeshHierarchy, field: CoefficientField, source: Callable | None):
    """Stiffness, mass and load restricted to interior fine nodes."""
    box = mesh.domain_box
    inner = interior_nodes(mesh.fine_n)
    K = assemble_stiffness(field, box)[inner][:, inner].tocsc()
    M = assemble_mass(box, mesh.h)[inner][:, inner].tocsc()
    F = np.zeros(len(inner)) if source is None else assemble_load(source, box, mesh.h)[inner]
    return K, M, F, inner


def solve_reference(
    mesh: MeshHierarchy,
    field: CoefficientField,
    source: Callable | None,
    tau: float,
    T: float,
    snapshot_steps: Sequence[int] | None = None,
    u0=None,
) -> FineTrajectory:
    """Backward Euler ``(M/tau + K) u^{n+1} = F + M u^n / tau`` up to ``T``.

    ``snapshot_steps`` lists the step indices to keep (0 is the initial
    state); by default only the last step is kept.  Each step's residual is
    checked against ``1e-10`` relative.
    """
    if not tau > 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    nsteps = max(1, int(np.ceil(T / tau - 1e-9)))
    keep = {nsteps} if snapshot_steps is None else set(int(s) for s in snapshot_steps)
    if any(s < 0 or s > nsteps for s in keep):
        raise ConfigurationError(f"snapshot steps must lie in [0, {nsteps}]")
    K, M, F, inner = fine_system(mesh, field, source)
    L = (M / tau + K).tocsc()
    lu = spla.splu(L)
    u = np.zeros(len(inner)) if u0 is None else np.asarray(u0, dtype=float)[inner]
    n_all = (mesh.fine_n + 1) ** 2
    times, snaps = [], []

    def store(n, u):
        full = np.zeros(n_all)
        full[inner] = u
        times.append(n * tau)
        snaps.append(full)

    if 0 in keep:
        store(0, u)
    worst = 0.0
    for n in range(1, nsteps + 1):
        rhs = F + M @ u / tau
        u = lu.solve(rhs)
        rn = np.linalg.norm(rhs)
        if rn > 0:
            res = np.linalg.norm(L @ u - rhs) / rn
            worst = max(worst, res)
            if res > STEP_RTOL:
                raise SolverError(f"reference step {n}: residual {res:.2e} exceeds {STEP_RTOL:.0e}", res)
        if n in keep:
            store(n, u)
    return FineTrajectory(tau, np.array(times), np.array(snaps), worst)


def stationary_reference(mesh: MeshHierarchy, field: CoefficientField, source: Callable) -> np.ndarray:
    """Solve ``K u = F`` with zero Dirichlet data (full nodal vector)."""
    K, _, F, inner = fine_system(mesh, field, source)
    out = np.zeros((mesh.fine_n + 1) ** 2)
    out[inner] = spla.spsolve(K, F)
    return out
