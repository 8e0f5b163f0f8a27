"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and bit-identical results.
"""

import numpy as np


def pairwise_distances(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1])


def min_distances(S, P):
    if P.shape[0] == 0:
        return np.full(S.shape[0], np.inf)
    return pairwise_distances(S, P).min(axis=1)


def count_within(S, P, radius):
    if P.shape[0] == 0:
        return np.zeros(S.shape[0], dtype=np.int64)
    return (pairwise_distances(S, P) < radius).sum(axis=1).astype(np.int64)


def best_split(X, y, features, min_leaf):
    """Best axis-aligned split of ``(X, y)`` over the candidate ``features``.

    Returns ``(feature, threshold, score)`` where ``score`` is
    ``sum_left**2 / n_left + sum_right**2 / n_right`` (larger is better, so
    maximizing it minimizes the summed squared error). ``feature`` is -1 when
    no split leaves ``min_leaf`` rows on both sides.
    """
    n = X.shape[0]
    best_f, best_t, best_s = -1, 0.0, -np.inf
    total = np.cumsum(y)[-1] if n else 0.0
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        cs = np.cumsum(y[order])
        nl = np.arange(1, n, dtype=np.float64)
        left = cs[:-1]
        right = total - left
        score = left * left / nl + right * right / (n - nl)
        ok = (xs[1:] > xs[:-1])
        ok[: max(min_leaf - 1, 0)] = False
        if min_leaf > 1:
            ok[n - min_leaf:] = False
        if not ok.any():
            continue
        cand = np.where(ok, score, -np.inf)
        i = int(np.argmax(cand))
        if cand[i] > best_s:
            best_f, best_s = int(f), float(cand[i])
            best_t = 0.5 * (xs[i] + xs[i + 1])
    return best_f, best_t, best_s
