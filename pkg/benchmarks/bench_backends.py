"""Compare the compiled transport kernel with the pure-Python fallback.

Both backends consume identical random streams, so the benchmark also checks
that their weights agree bit for bit.

    python3 benchmarks/bench_backends.py [--h 0.05] [--n 2000]
"""

import argparse
import time

import numpy as np

from saimc import _backend
from saimc.adjoint import solve_adjoint
from saimc.scene import build_scene
from saimc.transport import Chain, ChainParams, make_kernel, simulate_weights


def bench(scene, adj, chain, params, backend, n, seed):
    kern = make_kernel(scene, adj if chain.needs_adjoint else None, params, backend)
    start = time.perf_counter()
    res = simulate_weights(scene, chain, n, seed, adj if chain.needs_adjoint else None, params, kernel=kern)
    return time.perf_counter() - start, res


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h", type=float, default=0.05)
    ap.add_argument("--mfp", type=float, default=4.0)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    if "compiled" not in _backend.available:
        print("compiled backend not built; only the Python fallback is available")
        return 1
    scene = build_scene("cos3", h=args.h, mfp=args.mfp)
    adj = solve_adjoint(scene)
    cases = [(Chain.ANALOG, ChainParams()), (Chain.SURVIVAL, ChainParams()), (Chain.SAI, ChainParams()),
             (Chain.HEURISTIC, ChainParams(q_v=0.25)), (Chain.REGULARIZED, ChainParams(q_s=0.9, q_v=0.25))]
    print(f"cos3 h={args.h} mfp={args.mfp} Diam, {scene.mesh.n_segments} segments, N={args.n}")
    print(f"{'chain':<12}{'python us/path':>16}{'compiled us/path':>18}{'ratio':>8}  identical")
    for chain, params in cases:
        t_py, r_py = bench(scene, adj, chain, params, "python", args.n, args.seed)
        t_c, r_c = bench(scene, adj, chain, params, "compiled", args.n, args.seed)
        same = np.array_equal(r_py.weights, r_c.weights) and np.array_equal(r_py.status, r_c.status)
        print(f"{chain.label:<12}{1e6 * t_py / args.n:>16.1f}{1e6 * t_c / args.n:>18.2f}"
              f"{t_py / t_c:>8.0f}  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
