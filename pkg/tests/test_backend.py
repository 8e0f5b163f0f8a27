import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evpoi import _core_py, backend

compiled = pytest.mark.skipif("compiled" not in backend.available(), reason="extension not built")


def brute_force_split(X, y, min_leaf):
    """Exhaustive search over every feature and every threshold between distinct values."""
    best = (-1, 0.0, np.inf)
    n = len(y)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for a, b in zip(vals[:-1], vals[1:]):
            t = 0.5 * (a + b)
            left = X[:, f] <= t
            nl = int(left.sum())
            if nl < min_leaf or n - nl < min_leaf:
                continue
            sse = np.sum((y[left] - y[left].mean()) ** 2) + np.sum((y[~left] - y[~left].mean()) ** 2)
            if sse < best[2] - 1e-12:
                best = (f, t, sse)
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(6, 40), st.integers(1, 4))
def test_best_split_matches_brute_force(seed, n, min_leaf):
    rng = np.random.default_rng(seed)
    X = np.round(rng.normal(size=(n, 3)), 1)
    y = rng.normal(size=n)
    f, t, _ = backend.core.best_split(X, y, np.arange(3, dtype=np.int64), min_leaf)
    bf, bt, bsse = brute_force_split(X, y, min_leaf)
    if bf < 0:
        assert f == -1
        return
    left = X[:, f] <= t
    sse = np.sum((y[left] - y[left].mean()) ** 2) + np.sum((y[~left] - y[~left].mean()) ** 2)
    assert sse == pytest.approx(bsse, rel=1e-9, abs=1e-12)


def test_best_split_no_valid_split():
    X = np.ones((5, 1))
    f, _, _ = _core_py.best_split(X, np.arange(5.0), np.array([0], dtype=np.int64), 1)
    assert f == -1


def test_min_distances_and_counts():
    S = np.array([[0.0, 0.0], [1.0, 1.0]])
    P = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert np.allclose(_core_py.min_distances(S, P), [1.0, 1.0])
    assert list(_core_py.count_within(S, P, 1.0)) == [0, 0]  # strict inequality
    assert list(_core_py.count_within(S, P, 1.5)) == [1, 2]
    assert np.all(np.isinf(_core_py.min_distances(S, np.zeros((0, 2)))))


@compiled
def test_backends_bit_identical():
    from evpoi import _core

    rng = np.random.default_rng(0)
    S = rng.uniform(0, 3, (50, 2))
    P = rng.uniform(0, 3, (70, 2))
    for name in ("pairwise_distances", "min_distances"):
        assert np.array_equal(getattr(_core, name)(S, P), getattr(_core_py, name)(S, P))
    assert np.array_equal(_core.count_within(S, P, 0.4), _core_py.count_within(S, P, 0.4))
    X = np.round(rng.normal(size=(60, 5)), 2)
    y = rng.normal(size=60)
    feats = np.array([0, 2, 4], dtype=np.int64)
    for ml in (1, 3, 5):
        assert _core.best_split(X, y, feats, ml) == _core_py.best_split(X, y, feats, ml)


@compiled
def test_use_switches_backend():
    try:
        backend.use("python")
        assert backend.core is _core_py and backend.name == "python"
    finally:
        backend.use("compiled")
    with pytest.raises(ValueError):
        backend.use("fortran")
