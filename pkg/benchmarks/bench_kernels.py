"""Time the compiled kernels against the pure-Python fallback.

Run with ``python3 benchmarks/bench_kernels.py [--steps N] [--nodes N]``.
"""
import argparse
import time

import numpy as np
from scipy.special import gammaln

from rklimit import _pykernels

try:
    from rklimit import _ckernels
except ImportError:
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=20_000, help="Metropolis steps per timing")
    parser.add_argument("--nodes", type=int, default=20_000, help="grid nodes for the likelihood sweep")
    parser.add_argument("--bins", type=int, default=60)
    parser.add_argument("--repeat", type=int, default=3)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    n = rng.poisson(10.0, args.bins).astype(np.int64)
    b = np.full(args.bins, 10.0)
    s = rng.uniform(5e-4, 1e-3, args.bins)
    lfs = float(gammaln(n + 1.0).sum())
    y = np.geomspace(1e-18, 1e4, args.nodes)
    steps = rng.normal(0.0, 0.5, args.steps)
    r = rng.random(args.steps)
    targs = (n, b, s, lfs, 0, -41.4, 46.1, -3.0)
    lp0 = _pykernels.log_target(6.0, *targs)

    backends = [("python", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    rows = []
    for name, impl in backends:
        t_grid = best_of(lambda: impl.loglike_grid(y, n, b, s, lfs), args.repeat)
        t_mh = best_of(lambda: impl.mh_run(6.0, lp0, steps, r, *targs), args.repeat)
        rows.append((name, t_grid, t_mh))

    print(f"{'backend':<8} {'loglike_grid [s]':>17} {'mh_run [s]':>12} {'steps/s':>12}")
    for name, t_grid, t_mh in rows:
        print(f"{name:<8} {t_grid:>17.4f} {t_mh:>12.4f} {args.steps / t_mh:>12.3g}")
    if len(rows) == 2:
        print(f"speed-up: grid x{rows[0][1] / rows[1][1]:.0f}, mh x{rows[0][2] / rows[1][2]:.0f}")


if __name__ == "__main__":
    main()
