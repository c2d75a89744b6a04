"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin with the same signature. The active pair is
picked once at import time from ``CHBIOT_BACKEND`` (``numba`` or ``numpy``);
numba is the default when it imports cleanly. Both variants stay importable as
``<name>_numba`` / ``<name>_numpy`` so they can be compared directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_requested = os.environ.get("CHBIOT_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"CHBIOT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
HAVE_NUMBA = numba is not None
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def _njit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, nogil=True)(func)


# -- CSR matrix-vector product -------------------------------------------------


def csr_matvec_numpy(indptr, indices, data, x):
    nrows = indptr.shape[0] - 1
    rows = np.repeat(np.arange(nrows), np.diff(indptr))
    return np.bincount(rows, weights=data * x[indices], minlength=nrows)


@_njit
def csr_matvec_numba(indptr, indices, data, x):
    nrows = indptr.shape[0] - 1
    y = np.zeros(nrows)
    for i in range(nrows):
        acc = 0.0
        for k in range(indptr[i], indptr[i + 1]):
            acc += data[k] * x[indices[k]]
        y[i] = acc
    return y


# -- scatter of triplet values into a fixed sparsity pattern -------------------


def scatter_add_numpy(slot, values, nnz):
    return np.bincount(slot, weights=values, minlength=nnz)


@_njit
def scatter_add_numba(slot, values, nnz):
    out = np.zeros(nnz)
    for k in range(slot.shape[0]):
        out[slot[k]] += values[k]
    return out


# -- Q1 element integrals --------------------------------------------------------


def element_integrals_numpy(weights, table):
    """Contract per-element quadrature weights with a reference table.

    ``weights`` has shape (ne, nq); ``table`` has shape (nq, m) and already
    carries the quadrature weight and basis products. Returns (ne, m).
    """
    return weights @ table


@_njit
def element_integrals_numba(weights, table):
    ne, nq = weights.shape
    m = table.shape[1]
    out = np.zeros((ne, m))
    for e in range(ne):
        for q in range(nq):
            w = weights[e, q]
            if w == 0.0:
                continue
            for k in range(m):
                out[e, k] += w * table[q, k]
    return out


def gather_quadrature_numpy(values, conn, basis):
    """Evaluate a nodal field at every quadrature point: (ne, nq)."""
    return values[conn] @ basis.T


@_njit
def gather_quadrature_numba(values, conn, basis):
    ne = conn.shape[0]
    nq, nb = basis.shape
    out = np.zeros((ne, nq))
    for e in range(ne):
        for q in range(nq):
            acc = 0.0
            for a in range(nb):
                acc += basis[q, a] * values[conn[e, a]]
            out[e, q] = acc
    return out


def element_load_numpy(weights, basis, conn, nnodes):
    """Assemble sum_q weights[e, q] * basis[q, a] into a nodal vector."""
    local = weights @ basis
    return np.bincount(conn.ravel(), weights=local.ravel(), minlength=nnodes)


@_njit
def element_load_numba(weights, basis, conn, nnodes):
    out = np.zeros(nnodes)
    ne, nq = weights.shape
    nb = basis.shape[1]
    for e in range(ne):
        for a in range(nb):
            acc = 0.0
            for q in range(nq):
                acc += weights[e, q] * basis[q, a]
            out[conn[e, a]] += acc
    return out


_KERNELS = ("csr_matvec", "scatter_add", "element_integrals", "gather_quadrature", "element_load")

for _name in _KERNELS:
    globals()[_name] = globals()[f"{_name}_{BACKEND}"]

__all__ = ["BACKEND", "HAVE_NUMBA", *_KERNELS]
