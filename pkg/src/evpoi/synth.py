"""Synthetic datasets drawn from the POI process, with full ground truth."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParameterError
from .geodata import (COVARIATE_NAMES, DEFAULT_POI_TYPES, STATION_COLUMNS, Dataset, Poi, Station,
                      inverse_project, pairwise_distances)
from .kernels import matern32, point_kernel

AMSTERDAM = (4.9041, 52.3676)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic city; distances in km.

    The defaults mirror the cut-off distances reported for Amsterdam with an
    education effect that dominates the other POI types.
    """

    n_stations: int = 300
    poi_types: tuple[str, ...] = DEFAULT_POI_TYPES
    poi_counts: tuple[int, ...] = (120, 120, 60, 90)
    theta: tuple[float, ...] = (0.30, 0.28, 0.64, 0.35)
    alpha_sd: tuple[float, ...] = (1.5, 1.5, 2.5, 1.5)
    kernel_family: str = "relu"
    matern_variance: float = 0.1
    matern_lengthscale: float = 1.5
    noise_sd: float = 0.1
    charger_weights: tuple[float, ...] = (0.3, 0.2, -0.2, 0.3)
    bbox: tuple[float, float, float, float] = (0.0, 0.0, 4.0, 4.0)
    reference: tuple[float, float] = AMSTERDAM
    seed: int = 0

    def __post_init__(self):
        n = len(self.poi_types)
        if not (len(self.poi_counts) == len(self.theta) == len(self.alpha_sd) == n):
            raise ParameterError("poi_counts, theta and alpha_sd need one entry per POI type")
        if len(self.charger_weights) != len(COVARIATE_NAMES):
            raise ParameterError(f"need {len(COVARIATE_NAMES)} charger weights")
        if any(t <= 0 for t in self.theta) or any(a < 0 for a in self.alpha_sd):
            raise ParameterError("theta must be positive and alpha_sd non-negative")
        if self.matern_variance < 0 or self.matern_lengthscale <= 0 or self.noise_sd < 0:
            raise ParameterError("invalid Matérn or noise parameters")
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise ParameterError("degenerate bbox")
        if self.n_stations < 5:
            raise ParameterError("need at least 5 stations")

    def replace(self, **kw) -> "SynthConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class GroundTruth:
    """Everything that generated the data, on the raw and standardized scales."""

    config: SynthConfig
    alphas: dict[str, np.ndarray]
    components: dict[str, np.ndarray]  # "g", "h0", each type, "noise" at the stations (raw scale)
    y_raw: np.ndarray
    scale: float  # utilization = 0.5 + scale * y_raw
    standardized_sd: float = field(default=1.0)

    def standardized(self, name: str) -> np.ndarray:
        """A raw-scale component expressed in standardized-target units."""
        return self.components[name] / self.standardized_sd


def synth_generate(config: SynthConfig) -> tuple[Dataset, GroundTruth]:
    rng = np.random.default_rng(config.seed)
    x0, y0, x1, y1 = config.bbox
    n = config.n_stations
    S = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    pois = []
    comps: dict[str, np.ndarray] = {}
    alphas: dict[str, np.ndarray] = {}
    for typ, count, theta, a_sd in zip(config.poi_types, config.poi_counts,
                                       config.theta, config.alpha_sd):
        W = np.column_stack([rng.uniform(x0, x1, count), rng.uniform(y0, y1, count)])
        alpha = rng.normal(0.0, 1.0, count) * a_sd
        phi = point_kernel(config.kernel_family, pairwise_distances(S, W), theta)
        comps[typ] = phi @ alpha
        alphas[typ] = alpha
        pois.extend(Poi(f"{typ[:3].lower()}{j:04d}", (float(w[0]), float(w[1])), typ)
                    for j, w in enumerate(W))

    if config.matern_variance > 0:
        K = matern32(pairwise_distances(S, S), config.matern_variance, config.matern_lengthscale)
        L = np.linalg.cholesky(K + 1e-8 * np.eye(n))
        comps["h0"] = L @ rng.normal(size=n)
    else:
        comps["h0"] = np.zeros(n)
        rng.normal(size=n)  # keep the stream aligned across configs

    X = rng.normal(size=(n, len(COVARIATE_NAMES)))
    X[:, 3] = (X[:, 3] > 0).astype(float)  # major-road indicator is binary
    comps["g"] = X @ np.asarray(config.charger_weights)
    comps["noise"] = rng.normal(0.0, 1.0, n) * config.noise_sd

    y_raw = sum(comps.values())
    peak = float(np.max(np.abs(y_raw)))
    scale = 0.45 / peak if peak > 0 else 1.0
    util = 0.5 + scale * y_raw
    stations = tuple(Station(f"st{i:04d}", (float(S[i, 0]), float(S[i, 1])), float(util[i]),
                             tuple(float(v) for v in X[i])) for i in range(n))
    ds = Dataset(stations, tuple(pois), config.reference, tuple(config.poi_types))
    truth = GroundTruth(config, alphas, comps, y_raw, scale,
                        standardized_sd=float(np.std(y_raw, ddof=1)))
    return ds, truth


def truth_json(truth: GroundTruth) -> str:
    doc = {
        "config": {k: list(v) if isinstance(v, tuple) else v
                   for k, v in dataclasses.asdict(truth.config).items()},
        "alphas": {k: v.tolist() for k, v in truth.alphas.items()},
        "components": {k: v.tolist() for k, v in truth.components.items()},
        "y_raw": truth.y_raw.tolist(),
        "scale": truth.scale,
        "standardized_sd": truth.standardized_sd,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def write_raw_inputs(ds: Dataset, stations_path, pois_path) -> None:
    """Station and POI CSVs in lon/lat that the ingest command reads back.

    Synthetic covariates are standard normal, so the income column holds
    ``exp(log_income)`` to survive the log transform on ingest.
    """
    ll = inverse_project(ds.locations, ds.reference)
    lines = [",".join(STATION_COLUMNS)]
    for s, (lon, lat) in zip(ds.stations, ll):
        pop, log_inc, car, road = s.covariates
        lines.append(",".join([s.id, repr(float(lon)), repr(float(lat)), repr(s.utilization), repr(pop),
                               repr(math.exp(log_inc)), repr(car), str(int(road))]))
    Path(stations_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    pl = inverse_project(np.array([p.location for p in ds.pois]).reshape(-1, 2), ds.reference)
    rows = ["id,lon,lat,type"] + [f"{p.id},{float(a)!r},{float(b)!r},{p.poi_type}"
                                  for p, (a, b) in zip(ds.pois, pl)]
    Path(pois_path).write_text("\n".join(rows) + "\n", encoding="utf-8")
