"""Station and POI ingestion, planar projection and standardization.

Coordinates are projected with a local equirectangular approximation around a
reference point, so every distance downstream is a planar Euclidean distance
in kilometres.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataValidationError, DegenerateDataError

KM_PER_DEG_LAT = 110.574
KM_PER_DEG_LON_EQUATOR = 111.320

DEFAULT_POI_TYPES = ("Restaurant", "Store", "Education", "PublicTransport")

COVARIATE_NAMES = ("pop_density", "log_income", "car_density", "major_road")
STATION_COLUMNS = ("id", "lon", "lat", "utilization", "pop_density", "income",
                   "car_density", "major_road")

# (osm key, osm value) -> POI type; first match in this order wins.
DEFAULT_TAG_MAP: tuple[tuple[str, str, str], ...] = (
    ("amenity", "restaurant", "Restaurant"),
    ("shop", "clothes", "Store"),
    ("shop", "department_store", "Store"),
    ("shop", "supermarket", "Store"),
    ("shop", "mall", "Store"),
    ("shop", "convenience", "Store"),
    ("building", "retail", "Store"),
    ("amenity", "school", "Education"),
    ("amenity", "university", "Education"),
    ("highway", "bus_stop", "PublicTransport"),
    ("railway", "station", "PublicTransport"),
    ("railway", "subway_entrance", "PublicTransport"),
    ("public_transport", "station", "PublicTransport"),
)


@dataclass(frozen=True)
class Station:
    id: str
    location: tuple[float, float]
    utilization: float
    covariates: tuple[float, ...]

    def __post_init__(self):
        if not 0.0 <= self.utilization <= 1.0:
            raise DataValidationError([f"station {self.id}: utilization {self.utilization} outside [0, 1]"])
        if not all(math.isfinite(v) for v in self.location):
            raise DataValidationError([f"station {self.id}: non-finite location"])


@dataclass(frozen=True)
class Poi:
    id: str
    location: tuple[float, float]
    poi_type: str

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.location):
            raise DataValidationError([f"poi {self.id}: non-finite location"])


@dataclass(frozen=True)
class Dataset:
    """Stations, POIs and the statistics used to standardize them.

    ``target_stats`` and ``covariate_stats`` are whatever the caller decided
    the model should standardize with; after :func:`evpoi.eval.split` they hold
    training-set statistics.
    """

    stations: tuple[Station, ...]
    pois: tuple[Poi, ...]
    reference: tuple[float, float]
    poi_types: tuple[str, ...] = DEFAULT_POI_TYPES
    target_stats: tuple[float, float] | None = None
    covariate_stats: tuple[tuple[float, float], ...] | None = None
    covariate_names: tuple[str, ...] = COVARIATE_NAMES

    def __post_init__(self):
        ids = [s.id for s in self.stations]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataValidationError([f"duplicate station id {d!r}" for d in dup])
        k = len(self.covariate_names)
        bad = [s.id for s in self.stations if len(s.covariates) != k]
        if bad:
            raise DataValidationError([f"station {b}: expected {k} covariates" for b in bad])
        unknown = sorted({p.poi_type for p in self.pois} - set(self.poi_types))
        if unknown:
            raise DataValidationError([f"POI type {u!r} not in registry {self.poi_types}" for u in unknown])
        if self.target_stats is None and len(self.stations) >= 2:
            _, mean, sd = standardize_target(self.utilization)
            object.__setattr__(self, "target_stats", (mean, sd))
        if self.covariate_stats is None and len(self.stations) >= 2:
            object.__setattr__(self, "covariate_stats", covariate_statistics(self.covariates))
        if self.target_stats is not None and not self.target_stats[1] > 0:
            raise DegenerateDataError("target standard deviation must be positive")

    @property
    def locations(self) -> np.ndarray:
        return np.array([s.location for s in self.stations], dtype=float).reshape(-1, 2)

    @property
    def utilization(self) -> np.ndarray:
        return np.array([s.utilization for s in self.stations], dtype=float)

    @property
    def covariates(self) -> np.ndarray:
        k = len(self.covariate_names)
        return np.array([s.covariates for s in self.stations], dtype=float).reshape(-1, k)

    def poi_locations(self, poi_type: str) -> np.ndarray:
        return np.array([p.location for p in self.pois if p.poi_type == poi_type],
                        dtype=float).reshape(-1, 2)

    def poi_ids(self, poi_type: str) -> list[str]:
        return [p.id for p in self.pois if p.poi_type == poi_type]

    def standardized_target(self) -> np.ndarray:
        mean, sd = self.target_stats
        return (self.utilization - mean) / sd

    def standardized_covariates(self) -> np.ndarray:
        return apply_covariate_stats(self.covariates, self.covariate_stats)

    def subset(self, indices: Iterable[int], *, target_stats=None, covariate_stats=None) -> "Dataset":
        idx = list(indices)
        return Dataset(
            stations=tuple(self.stations[i] for i in idx),
            pois=self.pois,
            reference=self.reference,
            poi_types=self.poi_types,
            target_stats=target_stats,
            covariate_stats=covariate_stats,
            covariate_names=self.covariate_names,
        )

    def with_stats(self, target_stats, covariate_stats) -> "Dataset":
        return Dataset(self.stations, self.pois, self.reference, self.poi_types,
                       target_stats, covariate_stats, self.covariate_names)


class StationTable(NamedTuple):
    stations: list[Station]
    covariates: np.ndarray
    reference: tuple[float, float]


class PoiTable(NamedTuple):
    pois: list[Poi]
    unmapped: int
    non_point: int

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.pois:
            out[p.poi_type] = out.get(p.poi_type, 0) + 1
        return out


@dataclass
class StationSchema:
    """Column names of the station CSV and how to read the utilization unit."""

    columns: dict[str, str] = field(default_factory=lambda: {c: c for c in STATION_COLUMNS})
    utilization_scale: str = "auto"  # auto | fraction | percent
    log_income: bool = True


# --------------------------------------------------------------------------
# projection


def _check_lonlat(lon: np.ndarray, lat: np.ndarray) -> None:
    if not (np.all(np.isfinite(lon)) and np.all(np.isfinite(lat))):
        raise DataValidationError(["non-finite coordinate"])
    if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
        raise DataValidationError(["coordinate outside lon [-180, 180] / lat [-90, 90]"])


def project_coords(points, reference, max_extent_deg: float = 1.0) -> np.ndarray:
    """Project lon/lat pairs to planar km east/north of ``reference``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    lon0, lat0 = reference
    _check_lonlat(pts[:, 0], pts[:, 1])
    _check_lonlat(np.array([lon0]), np.array([lat0]))
    dlon = pts[:, 0] - lon0
    dlat = pts[:, 1] - lat0
    if pts.size and max(np.max(np.abs(dlon)), np.max(np.abs(dlat))) > max_extent_deg:
        raise DataValidationError([f"points extend more than {max_extent_deg} deg from the reference"])
    east = dlon * math.cos(math.radians(lat0)) * KM_PER_DEG_LON_EQUATOR
    north = dlat * KM_PER_DEG_LAT
    return np.column_stack([east, north])


def inverse_project(points_km, reference) -> np.ndarray:
    pts = np.asarray(points_km, dtype=float).reshape(-1, 2)
    lon0, lat0 = reference
    lon = lon0 + pts[:, 0] / (math.cos(math.radians(lat0)) * KM_PER_DEG_LON_EQUATOR)
    lat = lat0 + pts[:, 1] / KM_PER_DEG_LAT
    return np.column_stack([lon, lat])


def pairwise_distances(A, B) -> np.ndarray:
    """Euclidean distance matrix between two planar point sets."""
    from . import backend

    A = np.ascontiguousarray(np.asarray(A, dtype=float).reshape(-1, 2))
    B = np.ascontiguousarray(np.asarray(B, dtype=float).reshape(-1, 2))
    return backend.core.pairwise_distances(A, B)


# --------------------------------------------------------------------------
# standardization


def standardize_target(y) -> tuple[np.ndarray, float, float]:
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise DegenerateDataError("need at least two values to standardize")
    mean = float(np.mean(y))
    sd = float(np.std(y, ddof=1))
    if not sd > 0:
        raise DegenerateDataError("constant target vector cannot be standardized")
    return (y - mean) / sd, mean, sd


def unstandardize(z, mean: float, sd: float) -> np.ndarray:
    return np.asarray(z, dtype=float) * sd + mean


def covariate_statistics(X) -> tuple[tuple[float, float], ...]:
    X = np.asarray(X, dtype=float)
    stats = []
    for j in range(X.shape[1]):
        sd = float(np.std(X[:, j], ddof=1)) if X.shape[0] > 1 else 0.0
        # a constant column is centred but not scaled
        stats.append((float(np.mean(X[:, j])), sd if sd > 0 else 1.0))
    return tuple(stats)


def apply_covariate_stats(X, stats) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    mean = np.array([m for m, _ in stats])
    sd = np.array([s for _, s in stats])
    return (X - mean) / sd


# --------------------------------------------------------------------------
# loaders


def _parse_float(raw: str, col: str, line: int, errors: list[str]) -> float | None:
    try:
        v = float(raw)
    except (TypeError, ValueError):
        errors.append(f"line {line}: column {col!r}: non-numeric value {raw!r}")
        return None
    if not math.isfinite(v):
        errors.append(f"line {line}: column {col!r}: non-finite value {raw!r}")
        return None
    return v


def load_stations(path, schema: StationSchema | None = None, reference=None) -> StationTable:
    """Read the station CSV.

    Income is log-transformed on ingest and utilization is rescaled to a
    fraction when the file is on the percent scale. All row problems are
    collected and raised together as a :class:`DataValidationError`.
    """
    schema = schema or StationSchema()
    cols = schema.columns
    errors: list[str] = []
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [cols[c] for c in STATION_COLUMNS if cols[c] not in header]
        if missing:
            raise DataValidationError([f"missing column {m!r}" for m in missing])
        for line, rec in enumerate(reader, start=2):
            vals = {}
            for c in STATION_COLUMNS[1:]:
                vals[c] = _parse_float(rec[cols[c]], cols[c], line, errors)
            rows.append((line, rec[cols["id"]].strip(), vals))

    if errors:
        raise DataValidationError(errors)
    if not rows:
        raise DataValidationError(["station file has no rows"])

    util = np.array([r[2]["utilization"] for r in rows])
    scale = schema.utilization_scale
    if scale == "auto":
        scale = "percent" if np.any(util > 1.0) else "fraction"
    limit = 100.0 if scale == "percent" else 1.0

    seen: dict[str, int] = {}
    for line, sid, vals in rows:
        if sid in seen:
            errors.append(f"line {line}: duplicate station id {sid!r} (first seen on line {seen[sid]})")
        seen.setdefault(sid, line)
        if not 0.0 <= vals["utilization"] <= limit:
            errors.append(f"line {line}: utilization {vals['utilization']} outside [0, {limit:g}]")
        if schema.log_income and vals["income"] <= 0:
            errors.append(f"line {line}: income must be positive, got {vals['income']}")
        if vals["major_road"] not in (0.0, 1.0):
            errors.append(f"line {line}: major_road must be 0 or 1, got {vals['major_road']}")
    if errors:
        raise DataValidationError(errors)

    lonlat = np.array([[v["lon"], v["lat"]] for _, _, v in rows])
    if reference is None:
        reference = (float(np.mean(lonlat[:, 0])), float(np.mean(lonlat[:, 1])))
    xy = project_coords(lonlat, reference)

    stations = []
    cov_rows = []
    for (line, sid, v), loc in zip(rows, xy):
        income = math.log(v["income"]) if schema.log_income else v["income"]
        x = (v["pop_density"], income, v["car_density"], v["major_road"])
        cov_rows.append(x)
        stations.append(Station(sid, (float(loc[0]), float(loc[1])),
                                v["utilization"] / (100.0 if scale == "percent" else 1.0), x))
    return StationTable(stations, np.array(cov_rows, dtype=float), tuple(reference))


def parse_tag_map(text: str) -> tuple[tuple[str, str, str], ...]:
    """Parse ``key=value -> TypeName`` lines; ``#`` starts a comment."""
    entries = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            lhs, typ = (s.strip() for s in line.split("->"))
            key, value = (s.strip() for s in lhs.split("=", 1))
        except ValueError:
            raise DataValidationError([f"tag map line {n}: expected 'key=value -> Type', got {raw!r}"])
        if not key or not value or not typ:
            raise DataValidationError([f"tag map line {n}: empty field in {raw!r}"])
        entries.append((key, value, typ))
    return tuple(entries)


def load_tag_map(path) -> tuple[tuple[str, str, str], ...]:
    return parse_tag_map(Path(path).read_text(encoding="utf-8"))


def tag_map_types(tag_map) -> tuple[str, ...]:
    out = list(DEFAULT_POI_TYPES)
    for _, _, t in tag_map:
        if t not in out:
            out.append(t)
    return tuple(out)


def classify_tags(tags: dict, tag_map) -> str | None:
    for key, value, typ in tag_map:
        if str(tags.get(key, "")).strip() == value:
            return typ
    return None


def _normalize_type(name: str, types: Sequence[str]) -> str | None:
    squash = lambda s: s.replace("_", "").replace(" ", "").lower()
    for t in types:
        if squash(t) == squash(name):
            return t
    # common spelling of the transport type
    if squash(name) in ("publictransportation", "transport", "transit"):
        return "PublicTransport" if "PublicTransport" in types else None
    return None


def load_pois(path, tag_map=DEFAULT_TAG_MAP, reference=(0.0, 0.0),
              max_extent_deg: float = 1.0) -> PoiTable:
    """Read POIs from a GeoJSON FeatureCollection or a CSV with a type column."""
    path = Path(path)
    types = tag_map_types(tag_map)
    raw = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".csv" or not raw.lstrip().startswith("{"):
        return _load_poi_csv(raw, types, reference, max_extent_deg)
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataValidationError([f"{path}: malformed GeoJSON ({exc})"])
    if doc.get("type") != "FeatureCollection" or not isinstance(doc.get("features"), list):
        raise DataValidationError([f"{path}: expected a GeoJSON FeatureCollection"])

    import warnings

    pois, lonlat = [], []
    unmapped = non_point = 0
    for n, feat in enumerate(doc["features"]):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        tags = props.get("tags", props)
        if geom.get("type") != "Point":
            non_point += 1
            warnings.warn(f"feature {n}: skipping non-point geometry {geom.get('type')!r}")
            continue
        typ = classify_tags(tags, tag_map)
        if typ is None:
            unmapped += 1
            continue
        coords = geom.get("coordinates")
        if not isinstance(coords, list) or len(coords) < 2:
            raise DataValidationError([f"feature {n}: malformed point coordinates"])
        pid = str(feat.get("id", props.get("id", props.get("@id", f"poi{n}"))))
        pois.append((pid, typ))
        lonlat.append((float(coords[0]), float(coords[1])))
    xy = project_coords(lonlat, reference, max_extent_deg) if lonlat else np.zeros((0, 2))
    out = [Poi(pid, (float(p[0]), float(p[1])), typ) for (pid, typ), p in zip(pois, xy)]
    return PoiTable(out, unmapped, non_point)


def _load_poi_csv(text: str, types, reference, max_extent_deg) -> PoiTable:
    reader = csv.DictReader(text.splitlines())
    need = ("id", "lon", "lat", "type")
    missing = [c for c in need if c not in (reader.fieldnames or [])]
    if missing:
        raise DataValidationError([f"POI CSV missing column {m!r}" for m in missing])
    errors: list[str] = []
    rows, lonlat = [], []
    unmapped = 0
    for line, rec in enumerate(reader, start=2):
        lon = _parse_float(rec["lon"], "lon", line, errors)
        lat = _parse_float(rec["lat"], "lat", line, errors)
        typ = _normalize_type(rec["type"].strip(), types)
        if lon is None or lat is None:
            continue
        if typ is None:
            unmapped += 1
            continue
        rows.append((rec["id"].strip(), typ))
        lonlat.append((lon, lat))
    if errors:
        raise DataValidationError(errors)
    xy = project_coords(lonlat, reference, max_extent_deg) if lonlat else np.zeros((0, 2))
    out = [Poi(pid, (float(p[0]), float(p[1])), typ) for (pid, typ), p in zip(rows, xy)]
    return PoiTable(out, unmapped, 0)


def build_dataset(station_path, poi_path, tag_map=DEFAULT_TAG_MAP,
                  schema: StationSchema | None = None) -> tuple[Dataset, PoiTable]:
    table = load_stations(station_path, schema)
    pois = load_pois(poi_path, tag_map, table.reference)
    ds = Dataset(tuple(table.stations), tuple(pois.pois), table.reference, tag_map_types(tag_map))
    return ds, pois


# --------------------------------------------------------------------------
# dataset bundle: one JSON document with projected coordinates

BUNDLE_FORMAT = "evpoi-dataset"
BUNDLE_VERSION = 1


def dataset_to_dict(ds: Dataset) -> dict:
    return {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "reference": list(ds.reference),
        "poi_types": list(ds.poi_types),
        "covariate_names": list(ds.covariate_names),
        "stations": [[s.id, s.location[0], s.location[1], s.utilization, *s.covariates] for s in ds.stations],
        "pois": [[p.id, p.location[0], p.location[1], p.poi_type] for p in ds.pois],
    }


def dataset_from_dict(d: dict) -> Dataset:
    from .errors import ArtifactError

    if d.get("format") != BUNDLE_FORMAT:
        raise ArtifactError("not a dataset bundle")
    if d.get("version") != BUNDLE_VERSION:
        raise ArtifactError(f"unsupported dataset bundle version {d.get('version')!r}")
    stations = tuple(Station(str(r[0]), (float(r[1]), float(r[2])), float(r[3]),
                             tuple(float(v) for v in r[4:])) for r in d["stations"])
    pois = tuple(Poi(str(r[0]), (float(r[1]), float(r[2])), str(r[3])) for r in d["pois"])
    return Dataset(stations, pois, tuple(d["reference"]), tuple(d["poi_types"]),
                   covariate_names=tuple(d["covariate_names"]))


def dataset_json(ds: Dataset) -> str:
    return json.dumps(dataset_to_dict(ds), separators=(",", ":")) + "\n"


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dataset_json(ds), encoding="utf-8")


def load_dataset(path) -> Dataset:
    from .errors import ArtifactError

    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read dataset bundle {path}: {exc}") from exc
    return dataset_from_dict(doc)
