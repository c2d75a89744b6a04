"""Structured Q1 mesh of the unit square and degree-of-freedom layouts.

Nodes are numbered lexicographically, row by row: node ``k = j * (n + 1) + i``
sits at ``(i * h, j * h)``. Element ``e = j * n + i`` has its four corners
listed counterclockwise starting from the lower-left one. Vector unknowns are
interleaved per node, so component ``c`` of node ``k`` lives at ``2 * k + c``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"divisions per side must be a positive integer, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n


@dataclass(frozen=True, eq=False)
class Mesh:
    n: int
    node_coords: np.ndarray
    elements: np.ndarray
    boundary_nodes: np.ndarray

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def num_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_nodes, dtype=bool)
        mask[self.boundary_nodes] = True
        return mask

    def node_index(self, i: int, j: int) -> int:
        return j * (self.n + 1) + i

    def nodal_values(self, func) -> np.ndarray:
        """Interpolate ``func(x1, x2)`` at the mesh nodes."""
        return np.asarray(func(self.node_coords[:, 0], self.node_coords[:, 1]), dtype=float)

    def as_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a nodal array to ``(n+1, n+1, ...)`` indexed ``[j, i]``."""
        return values.reshape((self.n + 1, self.n + 1) + values.shape[1:])


@dataclass(frozen=True, eq=False)
class DofMap:
    num_nodes: int
    dirichlet_mask: np.ndarray = field(repr=False)

    @property
    def num_scalar(self) -> int:
        return self.num_nodes

    @property
    def num_vector(self) -> int:
        return 2 * self.num_nodes

    def vector_dofs(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes)
        return np.stack([2 * nodes, 2 * nodes + 1], axis=-1)

    @staticmethod
    def vector_node(dof):
        return np.asarray(dof) // 2

    @cached_property
    def free_vector_dofs(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet_mask)


def build_mesh(spec: GridSpec | int) -> Mesh:
    if not isinstance(spec, GridSpec):
        spec = GridSpec(spec)
    n = spec.n
    h = spec.h
    ticks = np.arange(n + 1) * h
    ticks[-1] = 1.0
    x1, x2 = np.meshgrid(ticks, ticks, indexing="xy")
    coords = np.column_stack([x1.ravel(), x2.ravel()])

    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    base = (j * (n + 1) + i).ravel()
    elements = np.column_stack([base, base + 1, base + n + 2, base + n + 1]).astype(np.int64)

    on_edge = (
        np.isclose(coords[:, 0], 0.0)
        | np.isclose(coords[:, 0], 1.0)
        | np.isclose(coords[:, 1], 0.0)
        | np.isclose(coords[:, 1], 1.0)
    )
    boundary = np.flatnonzero(on_edge)
    for arr in (coords, elements, boundary):
        arr.setflags(write=False)
    return Mesh(n=n, node_coords=coords, elements=elements, boundary_nodes=boundary)


def build_dofmap(mesh: Mesh) -> DofMap:
    mask = np.repeat(mesh.boundary_mask, 2)
    mask.setflags(write=False)
    return DofMap(num_nodes=mesh.num_nodes, dirichlet_mask=mask)


def nested_dissection_order(mesh: Mesh, leaf_size: int = 16) -> np.ndarray:
    """Fill-reducing node ordering by recursive bisection of the node lattice.

    Each box of nodes is split by its middle grid line; both halves are
    ordered first and the separator line last.
    """
    m = mesh.n + 1
    out: list[int] = []

    def visit(i0, i1, j0, j1):
        if i1 <= i0 or j1 <= j0:
            return
        if (i1 - i0) * (j1 - j0) <= leaf_size:
            out.extend(j * m + i for j in range(j0, j1) for i in range(i0, i1))
        elif i1 - i0 >= j1 - j0:
            c = (i0 + i1) // 2
            visit(i0, c, j0, j1)
            visit(c + 1, i1, j0, j1)
            out.extend(j * m + c for j in range(j0, j1))
        else:
            c = (j0 + j1) // 2
            visit(i0, i1, j0, c)
            visit(i0, i1, c + 1, j1)
            out.extend(c * m + i for i in range(i0, i1))

    visit(0, m, 0, m)
    return np.asarray(out, dtype=np.int64)
