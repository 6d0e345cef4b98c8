"""Time the hot kernels on the active backend.

    python benchmarks/bench_kernels.py            # numba
    COIN_NO_NUMBA=1 python benchmarks/bench_kernels.py   # numpy fallback
"""

import argparse
import timeit

import numpy as np

from coin import kernels


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    sizes = rng.choice([8.0, 16.0, 32.0], 200) * rng.uniform(0.2, 1.0, 200)
    caps = np.full(20, 32.0)
    vm_pm = rng.integers(-1, 20, 2000)
    load = rng.uniform(0, 8, 2000)
    d, T = 2, 100
    A = np.array([[0.9, 0.05], [0.0, 0.8]])
    drift = rng.normal(size=(T, d))
    h = np.array([1.0, 0.5])
    chol = np.linalg.cholesky(np.array([[0.1, 0.02], [0.02, 0.05]]))
    noise = rng.standard_normal((10_000, T, d))

    cases = {
        "best_fit_decreasing (200 items, 20 bins)": lambda: kernels.best_fit_decreasing(sizes, caps),
        "pm_usage (2000 vms, 20 pms)": lambda: kernels.pm_usage(vm_pm, load, 20),
        "mean_cost_paths (10000 paths, T=100)": lambda: kernels.mean_cost_paths(A, drift, h, chol, np.zeros(d), noise),
    }
    print(f"backend: {'numba' if kernels.USE_NUMBA else 'numpy'}")
    for name, fn in cases.items():
        fn()  # compile / warm caches
        n, total = timeit.Timer(fn).autorange()
        best = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
        print(f"{name:45s} {best * 1e6:12.1f} us")


if __name__ == "__main__":
    main()
