"""Time the numba kernels against their numpy fallbacks on a mesh-sized workload.

    python benchmarks/bench_kernels.py --n 256 --repeat 20
"""

import argparse
import timeit

import numpy as np

from chbiot import kernels
from chbiot.fem import space_for
from chbiot.grid import build_mesh


def workloads(n, seed=0):
    rng = np.random.default_rng(seed)
    sp = space_for(build_mesh(n))
    ne, N = sp.conn.shape[0], sp.num_nodes
    weights = rng.random((ne, sp.nq))
    values = rng.random(N)
    K = sp.scalar_pattern.assemble(sp.local_matrices(weights, sp.stiffness_table))
    slot = sp.scalar_pattern.slot
    local = rng.random(slot.shape[0])
    return {
        "csr_matvec": (K.indptr, K.indices, K.data, values),
        "scatter_add": (slot, local, sp.scalar_pattern.nnz),
        "element_integrals": (weights, sp.stiffness_table),
        "gather_quadrature": (values, sp.conn, sp.N),
        "element_load": (weights, sp.N, sp.conn, N),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"n = {args.n}, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, call_args in workloads(args.n).items():
        fast = getattr(kernels, f"{name}_numba")
        slow = getattr(kernels, f"{name}_numpy")
        np.testing.assert_allclose(fast(*call_args), slow(*call_args), rtol=1e-10, atol=1e-12)  # also compiles
        t_np = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        print(f"{name:<20}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.1f}")


if __name__ == "__main__":
    main()
