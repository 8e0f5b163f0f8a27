"""Geographically weighted regression with a Gaussian distance kernel."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import NumericalError, ParameterError
from ..geodata import pairwise_distances
from .common import Scaler, rmse, with_intercept

RIDGE = 1e-6
DEFAULT_BANDWIDTHS = (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0, math.inf)


@dataclass
class GwrModel:
    scaler: Scaler
    X: np.ndarray  # standardized training design with intercept
    y: np.ndarray
    locations: np.ndarray
    bandwidth: float
    loo_residuals: np.ndarray
    cv_scores: dict | None = None


def _weights(d: np.ndarray, bw: float) -> np.ndarray:
    if math.isinf(bw):
        return np.ones_like(d)
    return np.exp(-(d * d) / (2.0 * bw * bw))


def _local_fit(X, y, w, where: str) -> np.ndarray:
    XtW = X.T * w
    A = XtW @ X + RIDGE * np.eye(X.shape[1])
    try:
        beta = np.linalg.solve(A, XtW @ y)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"singular local GWR system at {where}") from exc
    if not np.all(np.isfinite(beta)):
        raise NumericalError(f"singular local GWR system at {where}")
    return beta


def _loo_residuals(X, y, D, bw) -> np.ndarray:
    pred = np.empty(len(y))
    for i in range(len(y)):
        w = _weights(D[i], bw)
        w[i] = 0.0
        pred[i] = X[i] @ _local_fit(X, y, w, f"training row {i}")
    return y - pred


def fit_gwr(X, locations, y, bandwidth="auto", candidates=DEFAULT_BANDWIDTHS) -> GwrModel:
    """Store the training data; ``bandwidth="auto"`` picks it by leave-one-out CV RMSE.

    The leave-one-out residuals at the chosen bandwidth are kept for the
    predictive variance.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    scaler = Scaler.fit(X)
    Xd = with_intercept(scaler.transform(X))
    D = pairwise_distances(locs, locs)
    scores = None
    if bandwidth == "auto":
        resid = {bw: _loo_residuals(Xd, y, D, bw) for bw in candidates}
        scores = {bw: rmse(r, 0.0) for bw, r in resid.items()}
        # first minimum in candidate order, so ties go to the narrower bandwidth
        bandwidth = min(scores, key=lambda b: (scores[b], list(candidates).index(b)))
        loo = resid[bandwidth]
    else:
        bandwidth = float(bandwidth)
        if not bandwidth > 0:
            raise ParameterError("bandwidth must be positive")
        loo = _loo_residuals(Xd, y, D, bandwidth) if len(y) > Xd.shape[1] + 1 else np.zeros(len(y))
    return GwrModel(scaler, Xd, y, locs, float(bandwidth), loo, scores)


def predict_gwr(model: GwrModel, X, locations) -> tuple[np.ndarray, np.ndarray]:
    """Local weighted-least-squares predictions.

    The variance at a query is the locally weighted mean of the squared
    leave-one-out training residuals.
    """
    Xq = with_intercept(model.scaler.transform(np.asarray(X, dtype=float)))
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    D = pairwise_distances(locs, model.locations)
    mean = np.empty(len(Xq))
    var = np.empty(len(Xq))
    for i in range(len(Xq)):
        w = _weights(D[i], model.bandwidth)
        beta = _local_fit(model.X, model.y, w, f"query ({locs[i, 0]:.4f}, {locs[i, 1]:.4f}) km")
        mean[i] = Xq[i] @ beta
        e = model.loo_residuals
        var[i] = float(np.sum(w * e * e) / max(np.sum(w), 1e-300))
    return mean, np.maximum(var, 1e-6)
