"""Shared helpers for the baseline regressors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateDataError


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X) -> "Scaler":
        X = np.asarray(X, dtype=float)
        sd = X.std(axis=0, ddof=0) if len(X) else np.ones(X.shape[1])
        return cls(X.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.sd


def with_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.hstack([np.ones((X.shape[0], 1)), X])


def ols_coefficients(X, y) -> np.ndarray:
    """Least-squares coefficients of ``y`` on ``[1, X]`` (minimum-norm if rank deficient)."""
    beta, *_ = np.linalg.lstsq(with_intercept(X), np.asarray(y, dtype=float), rcond=None)
    return beta


def kfold(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Index arrays of ``k`` shuffled folds; raises when a fold would be empty."""
    if k < 2 or n < 2 * k:
        raise DegenerateDataError(f"cannot form {k} folds with two or more rows each from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def rmse(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean(d * d)))
