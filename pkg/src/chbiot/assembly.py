"""Sparse operators and load vectors of the weak Cahn-Hilliard-Biot system.

Coefficients depending on the phase field are evaluated from its Q1
interpolant at the 2x2 Gauss points, the same points the energy uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from chbiot.fem import Q1Space, space_for
from chbiot.grid import Mesh
from chbiot.material import MaterialTable, isotropic_apply
from chbiot.sparse_linalg import SparseMatrix


def _space(mesh_or_space) -> Q1Space:
    return mesh_or_space if isinstance(mesh_or_space, Q1Space) else space_for(mesh_or_space)


def _weights_at_quadrature(space: Q1Space, w):
    """Accept a constant, a nodal field, a (ne, nq) array or a callable of nothing."""
    if np.isscalar(w):
        return np.full((space.conn.shape[0], space.nq), float(w))
    w = np.asarray(w, dtype=float)
    if w.shape == (space.num_nodes,):
        return space.values(w)
    if w.shape == (space.conn.shape[0], space.nq):
        return w
    raise ValueError(f"cannot interpret coefficient of shape {w.shape}")


def assemble_scalar_mass(mesh: Mesh | Q1Space, weight=1.0) -> SparseMatrix:
    sp = _space(mesh)
    w = _weights_at_quadrature(sp, weight)
    return sp.scalar_pattern.assemble(sp.local_matrices(w, sp.mass_table))


def assemble_weighted_stiffness(mesh: Mesh | Q1Space, weight=1.0) -> SparseMatrix:
    """Matrix of ``(w grad u, grad v)``; ``weight`` may be constant, nodal or per quadrature point."""
    sp = _space(mesh)
    w = _weights_at_quadrature(sp, weight)
    return sp.scalar_pattern.assemble(sp.local_matrices(w, sp.stiffness_table))


def assemble_divergence(mesh: Mesh | Q1Space, weight=1.0) -> SparseMatrix:
    """Rectangular block ``B[v, q] = (w q, div v)``: vector rows, scalar columns."""
    sp = _space(mesh)
    w = _weights_at_quadrature(sp, weight)
    return sp.vector_scalar_pattern.assemble(sp.local_matrices(w, sp.div_scalar_table))


def assemble_elastic_operator(mesh: Mesh | Q1Space, lam, G, scale=1.0) -> SparseMatrix:
    """Matrix of ``(lam div u, div v) + (2 G eps(u), eps(v))`` times ``scale``."""
    sp = _space(mesh)
    lam_q = _weights_at_quadrature(sp, lam)
    G_q = _weights_at_quadrature(sp, G)
    local = sp.local_matrices(scale * lam_q, sp.lambda_table) + sp.local_matrices(2.0 * scale * G_q, sp.strain_table)
    return sp.vector_pattern.assemble(local)


@dataclass
class ElasticitySystem:
    matrix: SparseMatrix
    load: np.ndarray


def assemble_elasticity(mesh: Mesh | Q1Space, phi, dt: float, material: MaterialTable, u_old=None) -> ElasticitySystem:
    """Backward-Euler viscoelastic plus phase-dependent elastic operator and its load.

    operator: (1/dt) (Cv eps(u), eps(v)) + (C(phi) eps(u), eps(v))
    load:     (C(phi) T(phi), eps(v)) + (1/dt) (Cv eps(u_old), eps(v)) + (S_u, v)

    Dirichlet constraints are not applied here.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    sp = _space(mesh)
    phi_q = sp.values(phi)
    lam, G = material.lame(phi_q)
    cv = material.Cv_scale / dt
    # Cv acts as cv * identity on symmetric tensors: (cv eps(u), eps(v)) = strain_table weighted by cv
    local = (
        sp.local_matrices(lam, sp.lambda_table)
        + sp.local_matrices(2.0 * G + cv, sp.strain_table)
    )
    A = sp.vector_pattern.assemble(local)

    sigma_T = isotropic_apply(lam, G, material.eigenstrain(phi_q))
    load = sp.stress_load(sigma_T)
    if u_old is not None and cv != 0.0:
        load += sp.stress_load(cv * sp.strain(u_old))
    if any(material.source_u):
        f = np.broadcast_to(np.asarray(material.source_u), phi_q.shape + (2,))
        load += sp.vector_load(f)
    return ElasticitySystem(A, load)


@dataclass
class CouplingBlocks:
    B: SparseMatrix  # (alpha(phi) q, div v), shape (2N, N)
    D: SparseMatrix  # (M(phi) theta, zeta), shape (N, N)
    C: SparseMatrix  # (M(phi) alpha(phi) div u, zeta), shape (N, 2N)


def assemble_coupling(mesh: Mesh | Q1Space, phi, material: MaterialTable) -> CouplingBlocks:
    sp = _space(mesh)
    phi_q = sp.values(phi)
    alpha = material.alpha(phi_q)
    M = material.M(phi_q)
    B = assemble_divergence(sp, alpha)
    D = assemble_scalar_mass(sp, M)
    C = assemble_divergence(sp, M * alpha).transpose()
    return CouplingBlocks(B, D, C)


def block_matrix(blocks, row_sizes, col_sizes) -> SparseMatrix:
    """Stack a nested list of ``SparseMatrix`` (or ``None``) into one CSR matrix."""
    from chbiot.sparse_linalg import assemble_from_triplets

    row_off = np.concatenate([[0], np.cumsum(row_sizes)])
    col_off = np.concatenate([[0], np.cumsum(col_sizes)])
    rows, cols, vals = [], [], []
    for i, brow in enumerate(blocks):
        for j, blk in enumerate(brow):
            if blk is None:
                continue
            if blk.shape != (row_sizes[i], col_sizes[j]):
                raise ValueError(f"block ({i}, {j}) has shape {blk.shape}")
            r, c, v = blk.triplets()
            rows.append(r + row_off[i])
            cols.append(c + col_off[j])
            vals.append(v)
    return assemble_from_triplets(
        np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), (row_off[-1], col_off[-1])
    )
