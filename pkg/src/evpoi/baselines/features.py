"""Engineered POI features: nearest distance and neighbourhood counts per type."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import backend
from ..errors import DegenerateDataError, ParameterError

SENTINEL_KM = 50.0
FEATURE_MODES = ("none", "distance", "density", "both")
DEFAULT_RADIUS_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass(frozen=True)
class FeatureConfig:
    """Which engineered features to append to the covariates.

    ``radii`` maps POI type to the density radius in km; types without an
    entry use ``default_radius``.
    """

    mode: str = "both"
    radii: dict = field(default_factory=dict)
    default_radius: float = 0.5
    grid: tuple[float, ...] = DEFAULT_RADIUS_GRID

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ParameterError(f"feature mode must be one of {FEATURE_MODES}, got {self.mode!r}")
        if any(not r > 0 for r in self.radii.values()) or not self.default_radius > 0:
            raise ParameterError("density radii must be positive")
        if not self.grid or any(not r > 0 for r in self.grid):
            raise ParameterError("radius grid must be non-empty and positive")

    def radius(self, poi_type: str) -> float:
        return float(self.radii.get(poi_type, self.default_radius))


def _points(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=float).reshape(-1, 2))


def distance_features(locations, poi_locations: dict) -> tuple[np.ndarray, list[str]]:
    """Nearest-POI distance per type, shape ``(N, n_types)``.

    Types without any POI get the 50 km sentinel and are returned in the
    second element.
    """
    if not poi_locations or all(len(v) == 0 for v in poi_locations.values()):
        raise DegenerateDataError("no POIs of any type")
    S = _points(locations)
    cols, flagged = [], []
    for t, P in poi_locations.items():
        P = _points(P)
        if len(P) == 0:
            flagged.append(t)
            cols.append(np.full(len(S), SENTINEL_KM))
        else:
            cols.append(backend.core.min_distances(S, P))
    return np.column_stack(cols) if cols else np.zeros((len(S), 0)), flagged


def density_features(locations, poi_locations: dict, radii) -> np.ndarray:
    """Count of POIs strictly closer than the type's radius, shape ``(N, n_types)``."""
    S = _points(locations)
    if not isinstance(radii, dict):
        radii = {t: float(radii) for t in poi_locations}
    cols = []
    for t, P in poi_locations.items():
        r = float(radii[t])
        if not r > 0:
            raise ParameterError(f"radius for {t!r} must be positive")
        cols.append(backend.core.count_within(S, _points(P), r))
    return np.column_stack(cols) if cols else np.zeros((len(S), 0), dtype=np.int64)


def design(covariates, locations, poi_locations: dict, config: FeatureConfig) -> np.ndarray:
    """Covariates followed by the engineered columns the mode asks for."""
    X = [np.asarray(covariates, dtype=float).reshape(len(_points(locations)), -1)]
    if config.mode in ("distance", "both"):
        X.append(distance_features(locations, poi_locations)[0])
    if config.mode in ("density", "both"):
        radii = {t: config.radius(t) for t in poi_locations}
        X.append(density_features(locations, poi_locations, radii).astype(float))
    return np.hstack(X)


def feature_names(covariate_names, poi_types, mode: str) -> list[str]:
    names = list(covariate_names)
    if mode in ("distance", "both"):
        names += [f"dist_{t}" for t in poi_types]
    if mode in ("density", "both"):
        names += [f"count_{t}" for t in poi_types]
    return names
