"""Time the compiled kernels against their pure-numpy counterparts.

Both backends are called in the same process through the ``use_numba``
switch, on identical inputs, and their outputs are checked for agreement
before timings are reported. The numba variants are warmed up first so that
compilation is not counted.

Usage::

    python benchmarks/bench_kernels.py [--n 500] [--p 10] [--repeat 3]
"""
import argparse
import time

import numpy as np

from calibra import trees
from calibra.matching import nn_match


def _best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def forest_case(n, p, n_trees):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((n, p))
    y = X[:, 0] + np.sin(X[:, 1]) + rng.standard_normal(n)
    idx = rng.integers(0, n, size=(n_trees, n))
    seeds = rng.integers(0, 2 ** 62, size=n_trees).astype(np.uint64)

    def run(use_numba):
        f = trees.build_forest(X, y, idx, seeds, mtry=max(1, p // 3), use_numba=use_numba)
        return trees.predict_trees(f, X, use_numba=use_numba)

    return run


def boost_case(n, p, rounds):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((n, p))
    y = (X[:, 0] - X[:, 1] + rng.standard_normal(n) > 0).astype(float)

    def run(use_numba):
        return trees.boost(X, y, loss=trees.LOGISTIC, n_rounds=rounds, X_val=X, y_val=y,
                           use_numba=use_numba)[1]

    return run


def match_case(n, ratio):
    rng = np.random.default_rng(2)
    ms, av = rng.standard_normal(n), rng.standard_normal(n * ratio * 5)

    def run(use_numba):
        return nn_match(ms, av, ratio, seed=0, use_numba=use_numba).pairs

    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500)
    ap.add_argument("--p", type=int, default=10)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    cases = [
        ("random forest, 200 trees", forest_case(args.n, args.p, 200)),
        ("logistic boosting, 300 rounds", boost_case(args.n, args.p, 300)),
        ("nearest-neighbour matching 1:2", match_case(args.n, 2)),
    ]
    print(f"n={args.n} p={args.p}, best of {args.repeat}")
    print(f"{'kernel':<34}{'numba (s)':>11}{'numpy (s)':>11}{'speed-up':>10}")
    for name, run in cases:
        run(True)  # compile
        t_nb, out_nb = _best_of(lambda: run(True), args.repeat)
        t_np, out_np = _best_of(lambda: run(False), args.repeat)
        # fitted trees agree exactly; summed losses may differ by rounding
        if not np.allclose(out_nb, out_np, rtol=1e-12, atol=1e-14):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<34}{t_nb:>11.3f}{t_np:>11.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
