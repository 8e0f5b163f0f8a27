"""Interpretability outputs of a fitted POI model.

Per-POI scaling factors are recovered by Gaussian conditioning: the factors
of one type and that type's inducing outputs are jointly Gaussian under the
prior, so ``p(alpha | u)`` is available in closed form and is averaged over
``q(u)``. This is a derived estimator, not something the model optimizes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import ParameterError, StateError
from .geodata import inverse_project
from .gpmodel import HETEROGENEITY, FittedModel
from .kernels import jittered_cholesky


@dataclass(frozen=True)
class PoiEffect:
    poi_id: str
    poi_type: str
    alpha_mean: float
    alpha_sd: float


@dataclass(frozen=True)
class TypeSummary:
    poi_type: str
    cutoff_km: float
    avg_magnitude: float
    magnitude_sd: float
    poi_count: int
    # mean posterior sd of the individual factors; not part of the summary CSV
    mean_alpha_sd: float = 0.0


@dataclass(frozen=True)
class Raster:
    """Posterior mean and variance of one process on the centres of a regular grid.

    ``mean[i, j]`` is the cell centred at ``(xs[j], ys[i])``.
    """

    component: str
    bbox: tuple[float, float, float, float]
    cell_km: float
    xs: np.ndarray
    ys: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def centers(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys)
        return np.column_stack([X.ravel(), Y.ravel()])


def _require_trained(model: FittedModel) -> None:
    if model.trace.size == 0:
        raise StateError("model has not been trained")


def cutoff_distances(model: FittedModel) -> dict[str, float]:
    """Learned kernel parameter per POI type, in km.

    For the ReLU kernel this is the distance beyond which a POI has no
    influence. For the Gaussian kernel it is the kernel width; see
    :func:`cutoff_kind`.
    """
    _require_trained(model)
    return {g: float(model.theta[g]) for g in model.poi_types}


def cutoff_kind(model: FittedModel) -> str:
    return "cutoff" if model.spec.kernel_family == "relu" else "width"


def _type_alpha_posterior(model: FittedModel, poi_type: str) -> tuple[np.ndarray, np.ndarray]:
    cov = model.covariance(poi_type)
    Z = model.inducing.locations
    Kuu = cov.matrix(Z, Z)
    Lk, _ = jittered_cholesky(0.5 * (Kuu + Kuu.T), model.jitter, name=f"Kuu[{poi_type}]")
    s2 = cov.alpha_variance
    # Cov(u, alpha) = s2 * Phi_Z, with Phi_Z[m, j] = k(|z_m - w_j|)
    cross = s2 * cov.features(Z)
    a = solve_triangular(Lk, cross, lower=True)
    m_w = solve_triangular(Lk, model.state.mean[poi_type], lower=True)
    L_w = solve_triangular(Lk, model.state.chol[poi_type], lower=True)
    mean = a.T @ m_w
    b = L_w.T @ a
    var = s2 - np.sum(a * a, axis=0) + np.sum(b * b, axis=0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def recover_alphas(model: FittedModel, poi_types=None) -> list[PoiEffect]:
    """Posterior mean and sd of every POI's scaling factor, in model order."""
    types = model.poi_types if poi_types is None else tuple(poi_types)
    out = []
    for g in types:
        if g not in model.poi_types:
            raise ParameterError(f"unknown POI type {g!r}")
        ids = model.poi_ids.get(g) or [f"{g}:{j}" for j in range(len(model.poi_locations[g]))]
        if len(model.poi_locations[g]) == 0:
            continue
        mean, sd = _type_alpha_posterior(model, g)
        out.extend(PoiEffect(pid, g, float(m), float(s)) for pid, m, s in zip(ids, mean, sd))
    return out


def average_magnitude(effects, poi_type: str) -> tuple[float, float]:
    """Mean of ``|alpha_mean|`` over one type and its sample sd."""
    mags = np.array([abs(e.alpha_mean) for e in effects if e.poi_type == poi_type], dtype=float)
    if mags.size == 0:
        raise ParameterError(f"no POIs of type {poi_type!r}")
    sd = float(np.std(mags, ddof=1)) if mags.size > 1 else 0.0
    return float(np.mean(mags)), sd


def type_summaries(model: FittedModel, effects=None) -> list[TypeSummary]:
    effects = recover_alphas(model) if effects is None else effects
    cut = cutoff_distances(model)
    out = []
    for g in model.poi_types:
        mine = [e for e in effects if e.poi_type == g]
        if mine:
            avg, sd = average_magnitude(mine, g)
            post_sd = float(np.mean([e.alpha_sd for e in mine]))
        else:
            avg = sd = post_sd = 0.0
        out.append(TypeSummary(g, cut[g], avg, sd, len(mine), post_sd))
    return out


def grid_axes(bbox, cell_km: float) -> tuple[np.ndarray, np.ndarray]:
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not cell_km > 0:
        raise ParameterError("cell size must be positive")
    if not (x1 > x0 and y1 > y0):
        raise ParameterError(f"degenerate bounding box {bbox}")
    nx = max(1, math.ceil((x1 - x0) / cell_km - 1e-9))
    ny = max(1, math.ceil((y1 - y0) / cell_km - 1e-9))
    return x0 + (np.arange(nx) + 0.5) * cell_km, y0 + (np.arange(ny) + 0.5) * cell_km


def spatial_grid(model: FittedModel, component: str, bbox, cell_km: float) -> Raster:
    if component not in model.processes:
        raise ParameterError(f"component must be one of {model.processes}, got {component!r}")
    xs, ys = grid_axes(bbox, cell_km)
    X, Y = np.meshgrid(xs, ys)
    mean, var = model.posterior(component, np.column_stack([X.ravel(), Y.ravel()]))
    shape = (len(ys), len(xs))
    return Raster(component, tuple(float(v) for v in bbox), float(cell_km), xs, ys,
                  mean.reshape(shape), var.reshape(shape))


def default_bbox(model: FittedModel, margin: float = 0.0) -> tuple[float, float, float, float]:
    pts = [model.inducing.locations] + [v for v in model.poi_locations.values() if len(v)]
    allp = np.vstack(pts)
    lo, hi = allp.min(axis=0) - margin, allp.max(axis=0) + margin
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def empirical_variogram(raster: Raster, max_lag: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Semivariance of the raster mean along the grid axes, per lag in cells."""
    z = raster.mean
    max_lag = max_lag or max(1, min(z.shape) // 2)
    lags, gam = [], []
    for h in range(1, max_lag + 1):
        d = []
        if z.shape[1] > h:
            d.append((z[:, h:] - z[:, :-h]).ravel())
        if z.shape[0] > h:
            d.append((z[h:, :] - z[:-h, :]).ravel())
        if not d:
            break
        diff = np.concatenate(d)
        lags.append(h * raster.cell_km)
        gam.append(0.5 * float(np.mean(diff * diff)))
    return np.array(lags), np.array(gam)


# --------------------------------------------------------------------------
# writers; fixed float formatting keeps reruns byte-identical


def _fmt(v: float) -> str:
    return repr(float(v))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def type_summary_csv(summaries) -> str:
    return _csv_text(("type", "cutoff_km", "avg_effect", "sd"),
                     [(s.poi_type, _fmt(s.cutoff_km), _fmt(s.avg_magnitude), _fmt(s.magnitude_sd))
                      for s in summaries])


def poi_effects_csv(effects) -> str:
    return _csv_text(("poi_id", "type", "alpha_mean", "alpha_sd"),
                     [(e.poi_id, e.poi_type, _fmt(e.alpha_mean), _fmt(e.alpha_sd)) for e in effects])


def raster_csv(raster: Raster) -> str:
    pts = raster.centers()
    return _csv_text(("x_km", "y_km", "mean", "variance"),
                     [(_fmt(p[0]), _fmt(p[1]), _fmt(m), _fmt(v))
                      for p, m, v in zip(pts, raster.mean.ravel(), raster.variance.ravel())])


def raster_geojson(raster: Raster, reference) -> dict:
    """Grid cells as lon/lat polygons with the mean and variance as properties."""
    h = raster.cell_km / 2.0
    feats = []
    for (x, y), m, v in zip(raster.centers(), raster.mean.ravel(), raster.variance.ravel()):
        ring = np.array([[x - h, y - h], [x + h, y - h], [x + h, y + h], [x - h, y + h], [x - h, y - h]])
        ll = inverse_project(ring, reference)
        feats.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [[[float(a), float(b)] for a, b in ll]]},
            "properties": {"component": raster.component, "x_km": float(x), "y_km": float(y),
                           "mean": float(m), "variance": float(v)},
        })
    return {"type": "FeatureCollection", "features": feats}


def write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def write_geojson(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")), encoding="utf-8")


__all__ = [
    "HETEROGENEITY", "PoiEffect", "TypeSummary", "Raster", "cutoff_distances", "cutoff_kind",
    "recover_alphas", "average_magnitude", "type_summaries", "spatial_grid", "grid_axes",
    "default_bbox", "empirical_variogram", "type_summary_csv", "poi_effects_csv", "raster_csv",
    "raster_geojson", "write_text", "write_geojson",
]
