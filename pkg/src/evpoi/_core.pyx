# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_core_py`` for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def pairwise_distances(const double[:, ::1] A, const double[:, ::1] B):
    cdef Py_ssize_t na = A.shape[0], nb = B.shape[0], i, j
    cdef double dx, dy
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] D = out
    with nogil:
        for i in range(na):
            for j in range(nb):
                dx = A[i, 0] - B[j, 0]
                dy = A[i, 1] - B[j, 1]
                D[i, j] = sqrt(dx * dx + dy * dy)
    return out


def min_distances(const double[:, ::1] S, const double[:, ::1] P):
    cdef Py_ssize_t ns = S.shape[0], np_ = P.shape[0], i, j
    cdef double dx, dy, d, best
    out = np.empty(ns, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(ns):
            best = INFINITY
            for j in range(np_):
                dx = S[i, 0] - P[j, 0]
                dy = S[i, 1] - P[j, 1]
                d = sqrt(dx * dx + dy * dy)
                if d < best:
                    best = d
            o[i] = best
    return out


def count_within(const double[:, ::1] S, const double[:, ::1] P, double radius):
    cdef Py_ssize_t ns = S.shape[0], np_ = P.shape[0], i, j
    cdef double dx, dy
    cdef long long c
    out = np.empty(ns, dtype=np.int64)
    cdef long long[::1] o = out
    with nogil:
        for i in range(ns):
            c = 0
            for j in range(np_):
                dx = S[i, 0] - P[j, 0]
                dy = S[i, 1] - P[j, 1]
                if sqrt(dx * dx + dy * dy) < radius:
                    c += 1
            o[i] = c
    return out


def best_split(const double[:, :] X, const double[::1] y, features, Py_ssize_t min_leaf):
    cdef Py_ssize_t n = X.shape[0], i, k
    cdef double total = 0.0, left, right, nl, score, best_s = -INFINITY, best_t = 0.0
    cdef long best_f = -1
    cdef cnp.intp_t[::1] order
    cdef double[::1] xs = np.empty(n, dtype=np.float64)
    cdef double[::1] ys = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t lo = min_leaf - 1 if min_leaf > 1 else 0
    cdef Py_ssize_t hi = n - min_leaf if min_leaf > 1 else n - 1
    for i in range(n):
        total += y[i]
    for f in features:
        k = f
        order = np.argsort(np.asarray(X[:, k]), kind="stable")
        for i in range(n):
            xs[i] = X[order[i], k]
            ys[i] = y[order[i]]
        left = 0.0
        for i in range(n - 1):
            left += ys[i]
            if i < lo or i >= hi or not (xs[i + 1] > xs[i]):
                continue
            nl = <double>(i + 1)
            right = total - left
            score = left * left / nl + right * right / (<double>n - nl)
            if score > best_s:
                best_s = score
                best_f = k
                best_t = 0.5 * (xs[i] + xs[i + 1])
    return int(best_f), float(best_t), float(best_s)
