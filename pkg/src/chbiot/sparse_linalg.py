"""Compressed-row sparse matrices and Jacobi-preconditioned Krylov solvers."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from chbiot import kernels

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """Raised when an iterative solve stalls, breaks down or runs out of iterations."""

    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-10
    atol: float = 1e-14
    max_iterations: int | None = None
    jacobi: bool = True

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("solver tolerances must be positive")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")

    def iteration_cap(self, dim: int) -> int:
        return self.max_iterations if self.max_iterations is not None else max(10 * dim, 20)


@dataclass
class SolveInfo:
    iterations: int
    residual: float
    preconditioned_residual: float
    target: float


class SparseMatrix:
    """Real matrix in compressed-row storage with sorted, unique column indices."""

    __slots__ = ("shape", "indptr", "indices", "data")

    def __init__(self, indptr, indices, data, shape):
        self.shape = (int(shape[0]), int(shape[1]))
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if self.indptr.shape[0] != self.shape[0] + 1:
            raise ValueError("indptr length does not match the row count")

    @property
    def nnz(self) -> int:
        return self.data.shape[0]

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))

    def matvec(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.shape != (self.shape[1],):
            raise ValueError(f"vector of shape {x.shape} does not match matrix {self.shape}")
        return kernels.csr_matvec(self.indptr, self.indices, self.data, x)

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal(self) -> np.ndarray:
        rows = self.row_ids()
        on_diag = rows == self.indices
        diag = np.zeros(min(self.shape))
        diag[rows[on_diag]] = self.data[on_diag]
        return diag

    def transpose(self) -> "SparseMatrix":
        return assemble_from_triplets(self.indices, self.row_ids(), self.data, self.shape[::-1])

    @property
    def T(self) -> "SparseMatrix":
        return self.transpose()

    def scale_rows(self, factors) -> "SparseMatrix":
        factors = np.asarray(factors, dtype=float)
        return SparseMatrix(self.indptr, self.indices, self.data * factors[self.row_ids()], self.shape)

    def copy(self) -> "SparseMatrix":
        return SparseMatrix(self.indptr.copy(), self.indices.copy(), self.data.copy(), self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.row_ids(), self.indices), self.data)
        return out

    def triplets(self):
        return self.row_ids(), self.indices.copy(), self.data.copy()

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"

    @classmethod
    def from_dense(cls, dense, drop_zeros=True) -> "SparseMatrix":
        dense = np.asarray(dense, dtype=float)
        rows, cols = np.nonzero(dense) if drop_zeros else np.indices(dense.shape).reshape(2, -1)
        return assemble_from_triplets(rows, cols, dense[rows, cols], dense.shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls(np.arange(n + 1), np.arange(n), np.ones(n), (n, n))


class SparsityPattern:
    """Maps a fixed list of (row, col) triplet positions onto CSR slots.

    Finite-element assembly produces the same triplet layout on every call, so
    the sort and duplicate detection are paid once; afterwards assembling is a
    single scatter-add of the values.
    """

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        nrows, ncols = int(shape[0]), int(shape[1])
        if rows.shape != cols.shape:
            raise ValueError("row and column index arrays differ in length")
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= nrows or cols.max() >= ncols):
            raise IndexError(f"triplet index outside matrix shape {shape}")
        keys = rows * ncols + cols
        unique, slot = np.unique(keys, return_inverse=True)
        self.shape = (nrows, ncols)
        self.slot = slot.astype(np.int64)
        self.indices = unique % ncols
        self.indptr = np.zeros(nrows + 1, dtype=np.int64)
        np.cumsum(np.bincount(unique // ncols, minlength=nrows), out=self.indptr[1:])

    @property
    def nnz(self) -> int:
        return self.indices.shape[0]

    def assemble(self, values) -> SparseMatrix:
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        if values.shape != self.slot.shape:
            raise ValueError("value count does not match the pattern")
        data = kernels.scatter_add(self.slot, values, self.nnz)
        return SparseMatrix(self.indptr, self.indices, data, self.shape)


def assemble_from_triplets(rows, cols, values, shape) -> SparseMatrix:
    """Sum duplicate (row, col) contributions into a CSR matrix."""
    return SparsityPattern(rows, cols, shape).assemble(values)


def eliminate_dofs(A: SparseMatrix, b, mask, values=None):
    """Symmetric elimination of constrained unknowns.

    Rows and columns flagged in ``mask`` are zeroed, their diagonal set to one
    and the right-hand side lifted so that the solution takes ``values`` there.
    """
    mask = np.asarray(mask, dtype=bool)
    g = np.zeros(A.shape[1]) if values is None else np.where(mask, values, 0.0)
    b = np.asarray(b, dtype=float) - A.matvec(g) if np.any(g) else np.array(b, dtype=float)
    rows = A.row_ids()
    hit = mask[rows] | mask[A.indices]
    data = np.where(hit, 0.0, A.data)
    diag = hit & (rows == A.indices) & mask[rows]
    data[diag] = 1.0
    if np.count_nonzero(diag) != np.count_nonzero(mask):
        raise ValueError("constrained rows lack a stored diagonal entry")
    b[mask] = g[mask]
    return SparseMatrix(A.indptr, A.indices, data, A.shape), b


def _jacobi(A: SparseMatrix, enabled: bool) -> np.ndarray:
    n = A.shape[0]
    if not enabled:
        return np.ones(n)
    d = A.diagonal()
    inv = np.ones(n)
    nz = d != 0.0
    inv[nz] = 1.0 / d[nz]
    return inv


def _check_system(A: SparseMatrix, b):
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    b = np.asarray(b, dtype=float)
    if b.shape != (A.shape[0],):
        raise ValueError("right-hand side does not match the matrix")
    return b


def solve_spd(A: SparseMatrix, b, cfg: SolverConfig = SolverConfig(), x0=None, preconditioner=None):
    """Preconditioned conjugate gradients; returns ``(x, SolveInfo)``.

    Stops once both the preconditioned residual and the true residual meet
    ``max(rtol * ||.||, atol)`` relative to the (preconditioned) right-hand side.
    """
    b = _check_system(A, b)
    n = b.shape[0]
    if preconditioner is None:
        inv_diag = _jacobi(A, cfg.jacobi)

        def preconditioner(v):
            return inv_diag * v

    target = max(cfg.rtol * np.linalg.norm(b), cfg.atol)
    ptarget = max(cfg.rtol * np.linalg.norm(preconditioner(b)), cfg.atol)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A.matvec(x)
    z = preconditioner(r)
    p = z.copy()
    rz = r @ z
    cap = cfg.iteration_cap(n)
    it = 0
    while True:
        res = np.linalg.norm(r)
        pres = np.linalg.norm(z)
        if pres <= ptarget and res <= target:
            return x, SolveInfo(it, res, pres, target)
        if it >= cap:
            raise SolverFailure("conjugate gradients did not converge", res, it)
        Ap = A.matvec(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            raise SolverFailure("matrix is not positive definite along a search direction", res, it)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = preconditioner(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
        if it % 50 == 0:
            # guard against drift of the recursive residual
            r = b - A.matvec(x)
            z = preconditioner(r)
            rz = r @ z


def solve_general(A: SparseMatrix, b, cfg: SolverConfig = SolverConfig(), x0=None, preconditioner=None):
    """Right-preconditioned BiCGStab; returns ``(x, SolveInfo)``.

    ``preconditioner`` is any callable applying an approximate inverse of
    ``A``; by default the Jacobi (inverse diagonal) scaling is used.
    Convergence is tested on the true residual ``||b - A x||``.
    """
    b = _check_system(A, b)
    n = b.shape[0]
    if preconditioner is None:
        inv_diag = _jacobi(A, cfg.jacobi)

        def preconditioner(v):
            return inv_diag * v

    target = max(cfg.rtol * np.linalg.norm(b), cfg.atol)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    cap = cfg.iteration_cap(n)
    it = 0
    restarts = 0
    r = b - A.matvec(x)
    res = np.linalg.norm(r)
    while res > target:
        if it >= cap:
            raise SolverFailure("BiCGStab did not converge", res, it)
        r_hat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros(n)
        p = np.zeros(n)
        x_start = x.copy()
        while it < cap:
            rho_new = r_hat @ r
            if rho_new == 0.0:
                break
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            p_hat = preconditioner(p)
            v = A.matvec(p_hat)
            denom = r_hat @ v
            if denom == 0.0:
                break
            alpha = rho / denom
            s = r - alpha * v
            it += 1
            if np.linalg.norm(s) <= target:
                x += alpha * p_hat
                break
            s_hat = preconditioner(s)
            t = A.matvec(s_hat)
            tt = t @ t
            if tt == 0.0:
                x += alpha * p_hat
                break
            omega = (t @ s) / tt
            x += alpha * p_hat + omega * s_hat
            r = s - omega * t
            if omega == 0.0 or not np.isfinite(omega) or np.linalg.norm(r) <= target:
                break
        # restart from the true residual after convergence of the recursion or breakdown
        if not np.all(np.isfinite(x)):
            x = x_start
        r = b - A.matvec(x)
        new_res = np.linalg.norm(r)
        if new_res > target:
            restarts += 1
            if restarts > 50 or not np.isfinite(new_res):
                raise SolverFailure("BiCGStab broke down repeatedly", new_res, it)
        res = new_res
    pres = float(np.linalg.norm(preconditioner(r)))
    return x, SolveInfo(it, float(res), pres, target)


class LUPreconditioner:
    """Sparse LU factorization of a fixed matrix, used as a Krylov preconditioner.

    The factorization is computed by SuperLU on the symmetrically permuted
    matrix ``A[order][:, order]`` without further column reordering, so a
    fill-reducing ``order`` (e.g. nested dissection) should be supplied.
    """

    def __init__(self, A: SparseMatrix, order=None, pivot_threshold=0.0):
        from scipy.sparse import csr_matrix
        from scipy.sparse.linalg import splu

        n = A.shape[0]
        self.order = np.arange(n) if order is None else np.asarray(order, dtype=np.int64)
        S = csr_matrix((A.data, A.indices, A.indptr), shape=A.shape)
        S = S[self.order][:, self.order].tocsc()
        try:
            self._lu = splu(S, permc_spec="NATURAL", diag_pivot_thresh=pivot_threshold)
        except RuntimeError:
            # zero pivot without row exchanges: fall back to partial pivoting
            self._lu = splu(S, permc_spec="NATURAL", diag_pivot_thresh=1.0)
        self.shape = A.shape

    def __call__(self, v):
        y = self._lu.solve(np.asarray(v, dtype=float)[self.order])
        out = np.empty_like(y)
        out[self.order] = y
        return out
