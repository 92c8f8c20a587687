"""Structured two-level meshes on the unit square.

Fine cells are indexed ``c = j * fine_n + i`` with ``i`` the x1 index and
``j`` the x2 index, so a raster ``values[j, i]`` flattens in C order onto the
cell numbering.  Coarse blocks use the same convention with ``coarse_n``.
Nodes of a rectangular cell box are numbered x1-fastest as well.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError

DIM = 2


@dataclass(frozen=True)
class CellBox:
    """Axis-aligned rectangle of fine cells ``[i0, i1) x [j0, j1)``."""

    i0: int
    i1: int
    j0: int
    j1: int

    @property
    def nx(self) -> int:
        return self.i1 - self.i0

    @property
    def ny(self) -> int:
        return self.j1 - self.j0

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    def cell_ids(self, fine_n: int) -> np.ndarray:
        """Global cell indices of the box, in local (x1-fastest) order."""
        jj, ii = np.meshgrid(np.arange(self.j0, self.j1), np.arange(self.i0, self.i1), indexing="ij")
        return (jj * fine_n + ii).ravel()

    def node_ids(self, fine_n: int) -> np.ndarray:
        """Global node indices (on the ``(fine_n+1)^2`` grid) in local order."""
        jj, ii = np.meshgrid(np.arange(self.j0, self.j1 + 1), np.arange(self.i0, self.i1 + 1), indexing="ij")
        return (jj * (fine_n + 1) + ii).ravel()

    def cell_nodes(self) -> np.ndarray:
        """Local node indices of every cell, shape ``(n_cells, 4)``.

        Corner order is (0,0), (1,0), (0,1), (1,1), i.e. ``a = ax + 2 * ay``.
        """
        jj, ii = np.meshgrid(np.arange(self.ny), np.arange(self.nx), indexing="ij")
        base = (jj * (self.nx + 1) + ii).ravel()
        stride = self.nx + 1
        return np.stack([base, base + 1, base + stride, base + stride + 1], axis=1)

    def sub_box_nodes(self, other: "CellBox") -> np.ndarray:
        """Local node indices (in this box) of the nodes of a contained box."""
        if not (self.i0 <= other.i0 and other.i1 <= self.i1 and self.j0 <= other.j0 and other.j1 <= self.j1):
            raise ValueError("box is not contained in this box")
        jj, ii = np.meshgrid(
            np.arange(other.j0 - self.j0, other.j1 - self.j0 + 1),
            np.arange(other.i0 - self.i0, other.i1 - self.i0 + 1),
            indexing="ij",
        )
        return (jj * (self.nx + 1) + ii).ravel()


@dataclass(frozen=True)
class MeshHierarchy:
    """Fine grid of ``fine_n^2`` square cells nested in ``coarse_n^2`` blocks."""

    fine_n: int
    coarse_n: int
    cell_block: np.ndarray = field(repr=False, compare=False)

    @property
    def H(self) -> float:
        return 1.0 / self.coarse_n

    @property
    def h(self) -> float:
        return 1.0 / self.fine_n

    @property
    def ratio(self) -> int:
        """Fine cells per block side."""
        return self.fine_n // self.coarse_n

    @property
    def n_cells(self) -> int:
        return self.fine_n**2

    @property
    def n_blocks(self) -> int:
        return self.coarse_n**2

    @property
    def domain_box(self) -> CellBox:
        return CellBox(0, self.fine_n, 0, self.fine_n)

    def block_index(self, block: int) -> tuple[int, int]:
        if not 0 <= block < self.n_blocks:
            raise ConfigurationError(f"invalid block id {block} (mesh has {self.n_blocks} blocks)")
        by, bx = divmod(int(block), self.coarse_n)
        return bx, by

    def block_box(self, block: int) -> CellBox:
        bx, by = self.block_index(block)
        r = self.ratio
        return CellBox(bx * r, (bx + 1) * r, by * r, (by + 1) * r)

    def block_cells(self, block: int) -> np.ndarray:
        return self.block_box(block).cell_ids(self.fine_n)

    def block_origin(self, block: int) -> np.ndarray:
        """Lower-left corner (minimal coordinates) of a block."""
        bx, by = self.block_index(block)
        return np.array([bx * self.H, by * self.H])

    def cell_centers(self, box: CellBox | None = None) -> np.ndarray:
        """Cell-center coordinates, shape ``(n_cells, 2)``."""
        box = box or self.domain_box
        jj, ii = np.meshgrid(np.arange(box.j0, box.j1), np.arange(box.i0, box.i1), indexing="ij")
        return np.stack([(ii.ravel() + 0.5) * self.h, (jj.ravel() + 0.5) * self.h], axis=1)

    def node_coordinates(self, box: CellBox | None = None) -> np.ndarray:
        """Node coordinates of a box (default: whole domain), shape ``(n_nodes, 2)``."""
        box = box or self.domain_box
        jj, ii = np.meshgrid(np.arange(box.j0, box.j1 + 1), np.arange(box.i0, box.i1 + 1), indexing="ij")
        return np.stack([ii.ravel() * self.h, jj.ravel() * self.h], axis=1)

    def block_areas(self) -> np.ndarray:
        return np.bincount(self.cell_block, minlength=self.n_blocks) * self.h**2


def build_hierarchy(fine_n: int, coarse_n: int) -> MeshHierarchy:
    """Build the fine/coarse hierarchy on the unit square.

    Raises
    ------
    ConfigurationError
        If ``coarse_n < 2`` or ``coarse_n`` does not divide ``fine_n``.
    """
    fine_n, coarse_n = int(fine_n), int(coarse_n)
    if coarse_n < 2 or fine_n < 1:
        raise ConfigurationError(f"need coarse_n >= 2 and fine_n >= 1, got fine_n={fine_n}, coarse_n={coarse_n}")
    if fine_n % coarse_n:
        raise ConfigurationError(f"coarse_n={coarse_n} does not divide fine_n={fine_n}")
    r = fine_n // coarse_n
    jj, ii = np.meshgrid(np.arange(fine_n), np.arange(fine_n), indexing="ij")
    cell_block = ((jj // r) * coarse_n + ii // r).ravel()
    cell_block.setflags(write=False)
    return MeshHierarchy(fine_n, coarse_n, cell_block)


def default_layers(H: float) -> int:
    """Oversampling layers ``ceil(-2 ln H)``."""
    if not 0.0 < H < 1.0:
        raise ConfigurationError(f"H must lie in (0, 1), got {H}")
    # guard against ln rounding just above an integer, e.g. H = exp(-k/2)
    return int(math.ceil(-2.0 * math.log(H) - 1e-12))


@dataclass(frozen=True)
class OversampleRegion:
    """Target block plus its clipped ``layers``-block neighbourhood."""

    target: int
    layers: int
    members: tuple[int, ...]
    block_bounds: tuple[int, int, int, int]  # bx0, bx1, by0, by1 (exclusive ends)
    box: CellBox

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def target_position(self) -> int:
        return self.members.index(self.target)


def oversample(mesh: MeshHierarchy, block: int, layers: int) -> OversampleRegion:
    """All blocks within Chebyshev distance ``layers`` of ``block``, clipped to the domain."""
    if layers < 0:
        raise ConfigurationError(f"layers must be >= 0, got {layers}")
    bx, by = mesh.block_index(block)
    n = mesh.coarse_n
    bx0, bx1 = max(bx - layers, 0), min(bx + layers + 1, n)
    by0, by1 = max(by - layers, 0), min(by + layers + 1, n)
    members = tuple(int(y * n + x) for y in range(by0, by1) for x in range(bx0, bx1))
    r = mesh.ratio
    box = CellBox(bx0 * r, bx1 * r, by0 * r, by1 * r)
    return OversampleRegion(int(block), int(layers), members, (bx0, bx1, by0, by1), box)
