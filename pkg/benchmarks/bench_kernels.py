"""Time the compiled kernels against the numpy fallback on representative sizes.

Run with ``python3 benchmarks/bench_kernels.py [--repeat 5]``. Results are checked
for bitwise equality before timing.
"""
import argparse
import timeit

import numpy as np

from ppdelab.kernels import backend
from ppdelab.lattice import ControlGrid
from ppdelab.pathspace import backward_features


def reduce_case(rng, R=200_000):
    tab = ControlGrid.symmetric(1.0, 0.125, 3, 2).increment_table()
    I = len(tab.increments)
    child = rng.standard_normal((R, I))
    stop = rng.standard_normal(R)
    forced = (rng.random(R) < 0.05).astype(np.uint8)
    return (child, tab.ctrl_idx.astype(np.int64), tab.ctrl_prob, tab.ctrl_cnt.astype(np.int64), stop, forced,
            True, 1)


def envelope_case(rng, n_eval=400, n_search=4000, N=8):
    dt = 1.0 / N
    def stack(n):
        t = rng.integers(0, N + 1, size=n)
        paths = np.cumsum(rng.choice([-1.0, 0.0, 1.0], size=(n, N + 1, 1)) * np.sqrt(dt), axis=1)
        paths[:, 0] = 0.0
        return np.ascontiguousarray(backward_features(t, paths)), (t * dt).astype(float)
    A, ta = stack(n_eval)
    B, tb = stack(n_search)
    vals = rng.standard_normal(n_search)
    return A, ta, B, tb, vals, 10.0, dt, 1.0, 1


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    cases = {"reduce_level": reduce_case(rng), "envelope": envelope_case(rng)}
    try:
        cy = backend("cython")
    except ImportError:
        print("compiled backend not built; only the fallback is available")
        return
    py = backend("python")
    print(f"{'kernel':<14}{'python [s]':>12}{'cython [s]':>12}{'speedup':>10}")
    for name, case in cases.items():
        a = getattr(py, name)(*case)
        b = getattr(cy, name)(*case)
        for x, y in zip(a, b):
            assert np.array_equal(x, y), f"{name}: backends disagree"
        tp = min(timeit.repeat(lambda: getattr(py, name)(*case), number=1, repeat=args.repeat))
        tc = min(timeit.repeat(lambda: getattr(cy, name)(*case), number=1, repeat=args.repeat))
        print(f"{name:<14}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}")


if __name__ == "__main__":
    main()
