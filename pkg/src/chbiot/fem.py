"""Bilinear (Q1) reference element and 2x2 Gauss quadrature on the structured mesh.

All elements are congruent squares of side h, so basis gradients and
quadrature weights are the same for every element and are tabulated once.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

from chbiot import kernels
from chbiot.grid import Mesh
from chbiot.sparse_linalg import SparsityPattern

_G = 0.5 / np.sqrt(3.0)
# reference coordinates in [0, 1]^2, listed like the element corners
GAUSS_POINTS = np.array([[0.5 - _G, 0.5 - _G], [0.5 + _G, 0.5 - _G], [0.5 + _G, 0.5 + _G], [0.5 - _G, 0.5 + _G]])
CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def reference_basis(points):
    """Values and reference-coordinate gradients of the four Q1 shape functions."""
    s = points[:, 0:1]
    t = points[:, 1:2]
    cs = CORNERS[:, 0][None, :]
    ct = CORNERS[:, 1][None, :]
    fs = np.where(cs == 1.0, s, 1.0 - s)
    ft = np.where(ct == 1.0, t, 1.0 - t)
    ds = np.where(cs == 1.0, 1.0, -1.0)
    dt = np.where(ct == 1.0, 1.0, -1.0)
    return fs * ft, ds * ft, fs * dt


class Q1Space:
    """Quadrature tables, gather/scatter helpers and sparsity patterns for one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.conn = np.ascontiguousarray(mesh.elements)
        h = mesh.h
        self.h = h
        N, dNs, dNt = reference_basis(GAUSS_POINTS)
        self.N = np.ascontiguousarray(N)
        self.dNx = np.ascontiguousarray(dNs / h)
        self.dNy = np.ascontiguousarray(dNt / h)
        self.weight = h * h / 4.0
        self.nq = 4
        self.center_N, cs, ct = reference_basis(np.array([[0.5, 0.5]]))
        self.center_dNx = cs / h
        self.center_dNy = ct / h

    @property
    def num_nodes(self) -> int:
        return self.mesh.num_nodes

    # -- evaluation at quadrature points -------------------------------------------

    def values(self, f):
        return kernels.gather_quadrature(np.ascontiguousarray(f, dtype=float), self.conn, self.N)

    def gradients(self, f):
        f = np.ascontiguousarray(f, dtype=float)
        gx = kernels.gather_quadrature(f, self.conn, self.dNx)
        gy = kernels.gather_quadrature(f, self.conn, self.dNy)
        return np.stack([gx, gy], axis=-1)

    def strain(self, u):
        """Symmetric gradient of an interleaved vector field, component form (ne, nq, 3)."""
        u = np.asarray(u, dtype=float).reshape(-1, 2)
        ux = np.ascontiguousarray(u[:, 0])
        uy = np.ascontiguousarray(u[:, 1])
        g = kernels.gather_quadrature
        exx = g(ux, self.conn, self.dNx)
        eyy = g(uy, self.conn, self.dNy)
        exy = 0.5 * (g(ux, self.conn, self.dNy) + g(uy, self.conn, self.dNx))
        return np.stack([exx, eyy, exy], axis=-1)

    def divergence(self, u):
        e = self.strain(u)
        return e[..., 0] + e[..., 1]

    def integrate(self, f_q) -> float:
        """Quadrature of a field given at the quadrature points."""
        return float(self.weight * np.sum(f_q))

    # -- load vectors ----------------------------------------------------------------

    def load(self, f_q):
        """Nodal vector of ``int f zeta_a`` for f given at quadrature points."""
        return kernels.element_load(self.weight * np.ascontiguousarray(f_q, dtype=float), self.N, self.conn, self.num_nodes)

    def stress_load(self, sigma_q):
        """Interleaved vector of ``int sigma : eps(zeta_a)``; sigma in component form."""
        w = self.weight
        n = self.num_nodes
        sxx = w * sigma_q[..., 0]
        syy = w * sigma_q[..., 1]
        sxy = w * sigma_q[..., 2]
        el = kernels.element_load
        fx = el(np.ascontiguousarray(sxx), self.dNx, self.conn, n) + el(np.ascontiguousarray(sxy), self.dNy, self.conn, n)
        fy = el(np.ascontiguousarray(sxy), self.dNx, self.conn, n) + el(np.ascontiguousarray(syy), self.dNy, self.conn, n)
        return np.column_stack([fx, fy]).ravel()

    def divergence_load(self, f_q):
        """Interleaved vector of ``int f div(zeta_a)``."""
        w = self.weight * np.ascontiguousarray(f_q, dtype=float)
        n = self.num_nodes
        fx = kernels.element_load(w, self.dNx, self.conn, n)
        fy = kernels.element_load(w, self.dNy, self.conn, n)
        return np.column_stack([fx, fy]).ravel()

    def vector_load(self, f_q):
        """Interleaved vector of ``int f . zeta_a`` with f of shape (ne, nq, 2)."""
        fx = self.load(f_q[..., 0])
        fy = self.load(f_q[..., 1])
        return np.column_stack([fx, fy]).ravel()

    # -- reference tables for matrix assembly ------------------------------------------
    # each table has shape (nq, rows * cols) and already includes the quadrature weight

    @cached_property
    def mass_table(self):
        return self.weight * np.einsum("qa,qb->qab", self.N, self.N).reshape(self.nq, -1)

    @cached_property
    def stiffness_table(self):
        t = np.einsum("qa,qb->qab", self.dNx, self.dNx) + np.einsum("qa,qb->qab", self.dNy, self.dNy)
        return self.weight * t.reshape(self.nq, -1)

    @cached_property
    def _vector_strain_basis(self):
        # strain (component form) and divergence of each of the 8 local vector dofs
        eps = np.zeros((self.nq, 8, 3))
        eps[:, 0::2, 0] = self.dNx
        eps[:, 1::2, 1] = self.dNy
        eps[:, 0::2, 2] = 0.5 * self.dNy
        eps[:, 1::2, 2] = 0.5 * self.dNx
        div = eps[..., 0] + eps[..., 1]
        return eps, div

    @cached_property
    def lambda_table(self):
        _, div = self._vector_strain_basis
        return self.weight * np.einsum("qi,qj->qij", div, div).reshape(self.nq, -1)

    @cached_property
    def strain_table(self):
        """Weighted ``eps(phi_i) : eps(phi_j)`` per quadrature point."""
        eps, _ = self._vector_strain_basis
        t = (
            np.einsum("qi,qj->qij", eps[..., 0], eps[..., 0])
            + np.einsum("qi,qj->qij", eps[..., 1], eps[..., 1])
            + 2.0 * np.einsum("qi,qj->qij", eps[..., 2], eps[..., 2])
        )
        return self.weight * t.reshape(self.nq, -1)

    @cached_property
    def div_scalar_table(self):
        """Weighted ``div(phi_i) N_b`` (vector rows, scalar columns)."""
        _, div = self._vector_strain_basis
        return self.weight * np.einsum("qi,qb->qib", div, self.N).reshape(self.nq, -1)

    # -- global index maps and patterns ------------------------------------------------

    @cached_property
    def vector_conn(self):
        c = self.conn
        out = np.empty((c.shape[0], 8), dtype=np.int64)
        out[:, 0::2] = 2 * c
        out[:, 1::2] = 2 * c + 1
        return out

    @staticmethod
    def pattern_indices(row_conn, col_conn, row_offset=0, col_offset=0):
        """Global (row, col) of every entry of the flattened element matrices."""
        rows = np.repeat(row_conn, col_conn.shape[1], axis=1) + row_offset
        cols = np.tile(col_conn, (1, row_conn.shape[1])) + col_offset
        return rows.ravel(), cols.ravel()

    @classmethod
    def _pattern(cls, row_conn, col_conn, shape):
        return SparsityPattern(*cls.pattern_indices(row_conn, col_conn), shape)

    @cached_property
    def scalar_pattern(self):
        n = self.num_nodes
        return self._pattern(self.conn, self.conn, (n, n))

    @cached_property
    def vector_pattern(self):
        n = 2 * self.num_nodes
        return self._pattern(self.vector_conn, self.vector_conn, (n, n))

    @cached_property
    def vector_scalar_pattern(self):
        return self._pattern(self.vector_conn, self.conn, (2 * self.num_nodes, self.num_nodes))

    @cached_property
    def scalar_vector_pattern(self):
        return self._pattern(self.conn, self.vector_conn, (self.num_nodes, 2 * self.num_nodes))

    def local_matrices(self, weights_q, table):
        """Element matrices ``sum_q weights[e, q] table[q]`` flattened per element."""
        weights_q = np.ascontiguousarray(np.broadcast_to(weights_q, (self.conn.shape[0], self.nq)), dtype=float)
        return kernels.element_integrals(weights_q, np.ascontiguousarray(table))


_SPACES: dict[int, Q1Space] = {}


def space_for(mesh: Mesh) -> Q1Space:
    """Shared ``Q1Space`` per mesh object (tables and patterns are immutable)."""
    key = id(mesh)
    sp = _SPACES.get(key)
    if sp is None or sp.mesh is not mesh:
        sp = Q1Space(mesh)
        _SPACES[key] = sp
    return sp
