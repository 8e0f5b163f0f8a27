"""Bagged regression trees with kriging of the out-of-bag residuals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import backend
from .kriging import ResidualGP


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. Rows with ``x <= threshold`` go left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = X[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.value[node]


def grow_tree(X, y, rng: np.random.Generator, max_depth: int = 8, min_leaf: int = 5,
              max_features: int | None = None) -> Tree:
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    p = X.shape[1]
    k = p if max_features is None else min(p, max_features)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(np.mean(y[rows])))
        return len(feature) - 1

    root = new_node(np.arange(len(y)))
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= max_depth or len(rows) < 2 * min_leaf:
            continue
        yr = y[rows]
        if np.all(yr == yr[0]):
            continue
        feats = np.sort(rng.choice(p, size=k, replace=False)) if k < p else np.arange(p)
        f, t, _ = backend.core.best_split(X[rows], yr, feats.astype(np.int64), min_leaf)
        if f < 0:
            continue
        mask = X[rows, f] <= t
        lrows, rrows = rows[mask], rows[~mask]
        feature[node], threshold[node] = int(f), float(t)
        left[node] = new_node(lrows)
        right[node] = new_node(rrows)
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], rrows, depth + 1))
        stack.append((left[node], lrows, depth + 1))
    return Tree(np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
                np.array(right, dtype=np.int64), np.array(value))


@dataclass
class Forest:
    trees: list[Tree]
    oob_prediction: np.ndarray

    def predict(self, X) -> np.ndarray:
        return np.mean([t.predict(X) for t in self.trees], axis=0)


def fit_forest(X, y, n_trees: int = 200, max_depth: int = 8, min_leaf: int = 5,
               max_features: int | str | None = "sqrt", bootstrap: bool = True, seed: int = 0) -> Forest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if max_features == "sqrt":
        max_features = max(1, math.ceil(math.sqrt(p)))
    children = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    oob_sum = np.zeros(n)
    oob_count = np.zeros(n)
    for ss in children:
        rng = np.random.default_rng(ss)
        rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
        tree = grow_tree(X[rows], y[rows], rng, max_depth, min_leaf, max_features)
        trees.append(tree)
        out = np.ones(n, dtype=bool)
        out[rows] = False
        if out.any():
            oob_sum[out] += tree.predict(X[out])
            oob_count[out] += 1
    forest = Forest(trees, np.zeros(n))
    full = forest.predict(X)
    # rows that were never out of bag fall back to the in-sample forest prediction
    forest.oob_prediction = np.where(oob_count > 0, oob_sum / np.maximum(oob_count, 1), full)
    return forest


@dataclass
class RfKriging:
    forest: Forest
    gp: ResidualGP

    def predict(self, X, locations) -> tuple[np.ndarray, np.ndarray]:
        return predict_rf_kriging(self, X, locations)


def fit_rf_kriging(X, locations, y, seed: int = 0, n_trees: int = 200, max_depth: int = 8,
                   min_leaf: int = 5, **gp_options) -> RfKriging:
    forest = fit_forest(X, y, n_trees, max_depth, min_leaf, seed=seed)
    resid = np.asarray(y, dtype=float) - forest.oob_prediction
    return RfKriging(forest, ResidualGP.fit(locations, resid, **gp_options))


def predict_rf_kriging(model: RfKriging, X, locations) -> tuple[np.ndarray, np.ndarray]:
    m, v = model.gp.predict(locations)
    return model.forest.predict(X) + m, v + model.gp.noise_variance
