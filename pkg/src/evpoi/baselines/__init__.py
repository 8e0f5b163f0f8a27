"""Comparison models built on engineered POI features.

Every baseline is fitted on standardized training arrays and returns a
predictive mean and variance, so the evaluation code can score all models
alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ParameterError
from .common import kfold, ols_coefficients, rmse, with_intercept
from .features import (DEFAULT_RADIUS_GRID, FEATURE_MODES, SENTINEL_KM, FeatureConfig, density_features,
                       design, distance_features, feature_names)
from .forest import Forest, Tree, fit_forest, fit_rf_kriging, grow_tree, predict_rf_kriging
from .gwr import fit_gwr, predict_gwr
from .kriging import ResidualGP, fit_linear_kriging, predict_linear_kriging
from .nn import fit_nn_baseline, predict_nn_baseline

BASELINE_KINDS = ("gwr", "linear_kriging", "rf_kriging", "nn")
LABELS = {"gwr": "GWR", "linear_kriging": "Linear kriging", "rf_kriging": "RF kriging",
          "nn": "Neural network"}


@dataclass
class BaselineModel:
    kind: str
    features: FeatureConfig
    poi_types: tuple[str, ...]
    fitted: object
    seed: int = 0
    options: dict = field(default_factory=dict)

    def design(self, data) -> np.ndarray:
        return design(data.covariates, data.locations,
                      {t: data.poi_locations[t] for t in self.poi_types}, self.features)

    def predict(self, data) -> tuple[np.ndarray, np.ndarray]:
        X = self.design(data)
        if self.kind == "gwr":
            return predict_gwr(self.fitted, X, data.locations)
        return self.fitted.predict(X, data.locations)


def _fit(kind: str, X, locations, y, seed: int, options: dict):
    if kind == "gwr":
        return fit_gwr(X, locations, y, **options)
    if kind == "linear_kriging":
        return fit_linear_kriging(X, locations, y, **options)
    if kind == "rf_kriging":
        return fit_rf_kriging(X, locations, y, seed=seed, **options)
    if kind == "nn":
        return fit_nn_baseline(X, locations, y, seed=seed, **options)
    raise ParameterError(f"unknown baseline {kind!r}; expected one of {BASELINE_KINDS}")


def fit_baseline(kind: str, data, features: FeatureConfig | None = None, seed: int = 0,
                 **options) -> BaselineModel:
    """Fit one baseline on an :class:`evpoi.svi.SviData`-like training set."""
    features = features or FeatureConfig()
    model = BaselineModel(kind, features, tuple(data.poi_locations), None, seed, dict(options))
    X = model.design(data)
    model.fitted = _fit(kind, X, data.locations, data.y, seed, options)
    return model


def _cv_rmse(kind: str, X, locations, y, folds, seed: int, options: dict) -> float:
    if kind == "ols":
        errs = []
        for f in folds:
            tr = np.setdiff1d(np.arange(len(y)), f)
            beta = ols_coefficients(X[tr], y[tr])
            errs.append(with_intercept(X[f]) @ beta - y[f])
        return rmse(np.concatenate(errs), 0.0)
    sq = []
    for f in folds:
        tr = np.setdiff1d(np.arange(len(y)), f)
        fitted = _fit(kind, X[tr], locations[tr], y[tr], seed, options)
        pred = (predict_gwr(fitted, X[f], locations[f])[0] if kind == "gwr"
                else fitted.predict(X[f], locations[f])[0])
        sq.append(pred - y[f])
    return rmse(np.concatenate(sq), 0.0)


def tune_dmax(data, grid=DEFAULT_RADIUS_GRID, kind: str = "ols", seed: int = 0, folds: int = 5,
              **options) -> dict[str, float]:
    """Density radius per POI type by 5-fold cross-validated RMSE.

    Types are tuned one at a time: the design holds the covariates and that
    type's counts only. ``kind="ols"`` scores candidates with a linear model,
    which is far cheaper than refitting the full baseline per candidate; any
    baseline kind can be requested instead. Ties go to the smaller radius.
    """
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ParameterError("empty radius grid")
    y = np.asarray(data.y, dtype=float)
    locs = np.asarray(data.locations, dtype=float)
    fold_idx = kfold(len(y), folds, seed)
    out = {}
    for t, P in data.poi_locations.items():
        if len(grid) == 1:
            out[t] = grid[0]
            continue
        best_r, best_s = grid[0], np.inf
        for r in grid:
            X = np.hstack([np.asarray(data.covariates, dtype=float),
                           density_features(locs, {t: P}, {t: r}).astype(float)])
            s = _cv_rmse(kind, X, locs, y, fold_idx, seed, options)
            if s < best_s - 1e-12:
                best_r, best_s = r, s
        out[t] = best_r
    return out


__all__ = [
    "BASELINE_KINDS", "LABELS", "BaselineModel", "FeatureConfig", "FEATURE_MODES", "SENTINEL_KM",
    "DEFAULT_RADIUS_GRID", "distance_features", "density_features", "design", "feature_names",
    "fit_baseline", "tune_dmax", "fit_gwr", "predict_gwr", "fit_linear_kriging",
    "predict_linear_kriging", "ResidualGP", "fit_rf_kriging", "predict_rf_kriging", "fit_forest",
    "grow_tree", "Forest", "Tree", "fit_nn_baseline", "predict_nn_baseline",
]
