"""Compare the compiled and pure-numpy kernel backends.

Run with ``python3 benchmarks/bench_backends.py``. Each kernel is timed on
inputs shaped like a city-scale dataset and the outputs of both backends
are checked for exact equality.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from evpoi import _core_py, backend
from evpoi.baselines import fit_forest


def cases(rng):
    S = rng.uniform(0, 8, size=(300, 2))
    P = rng.uniform(0, 8, size=(1500, 2))
    X = rng.normal(size=(240, 12))
    y = rng.normal(size=240)
    feats = np.arange(12, dtype=np.int64)
    return {
        "pairwise_distances 300x1500": lambda core: core.pairwise_distances(S, P),
        "min_distances 300x1500": lambda core: core.min_distances(S, P),
        "count_within 300x1500": lambda core: core.count_within(S, P, 0.5),
        "best_split 240x12": lambda core: core.best_split(X, y, feats, 5),
    }, (X, y)


def time_forest(which: str, X, y, repeat: int) -> float:
    backend.use(which)
    return min(timeit.repeat(lambda: fit_forest(X, y, n_trees=50, seed=0), number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "compiled" not in backend.available():
        print("compiled backend not built; only the numpy backend is available")
        return
    from evpoi import _core

    table, (X, y) = cases(np.random.default_rng(0))
    print(f"{'kernel':<30} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}  identical")
    for name, fn in table.items():
        same = all(np.array_equal(np.asarray(a), np.asarray(b))
                   for a, b in zip(np.atleast_1d(fn(_core_py)), np.atleast_1d(fn(_core))))
        t_py = min(timeit.repeat(lambda: fn(_core_py), number=10, repeat=args.repeat)) / 10
        t_c = min(timeit.repeat(lambda: fn(_core), number=10, repeat=args.repeat)) / 10
        print(f"{name:<30} {t_py * 1e3:10.3f} {t_c * 1e3:12.3f} {t_py / t_c:8.1f}  {same}")
    t_py = time_forest("python", X, y, args.repeat)
    t_c = time_forest("compiled", X, y, args.repeat)
    print(f"{'forest (50 trees)':<30} {t_py * 1e3:10.3f} {t_c * 1e3:12.3f} {t_py / t_c:8.1f}")


if __name__ == "__main__":
    main()
