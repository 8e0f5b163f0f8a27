"""Train/test splitting, metrics, the benchmark runner and the sensitivity grid."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import svi
from .errors import DegenerateDataError, EvpoiError, ParameterError
from .geodata import Dataset, covariate_statistics, standardize_target
from .gpmodel import ModelSpec, gaussian_log_density, predict_dataset
from .synth import GroundTruth, SynthConfig, synth_generate

POI_MODEL_LABEL = "POI model (ours)"
SENSITIVITY_GRID = (("neural", "relu"), ("linear", "relu"), ("neural", "gaussian"), ("linear", "gaussian"))
CHARGER_LABELS = {"neural": "Neural network", "linear": "Linear"}
KERNEL_LABELS = {"relu": "ReLU", "gaussian": "Gaussian"}


@dataclass(frozen=True)
class SplitConfig:
    ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ParameterError("split ratio must lie strictly between 0 and 1")


def split(dataset: Dataset, config: SplitConfig = SplitConfig()) -> tuple[Dataset, Dataset]:
    """Seeded random split with ``floor(ratio * N)`` training stations.

    Both halves carry the training-set standardization statistics.
    """
    n = len(dataset.stations)
    if n < 5:
        raise DegenerateDataError(f"need at least 5 stations to split, got {n}")
    n_train = int(math.floor(config.ratio * n))
    if n_train < 2 or n_train >= n:
        raise DegenerateDataError(f"split ratio {config.ratio} leaves an empty or tiny split of {n}")
    perm = np.random.default_rng(config.seed).permutation(n)
    tr, te = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    _, mean, sd = standardize_target(dataset.utilization[tr])
    stats = ((mean, sd), covariate_statistics(dataset.covariates[tr]))
    return (dataset.subset(tr, target_stats=stats[0], covariate_stats=stats[1]),
            dataset.subset(te, target_stats=stats[0], covariate_stats=stats[1]))


def rmse(pred, actual) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if pred.shape != actual.shape or pred.size == 0:
        raise ParameterError(f"length mismatch or empty input: {pred.shape} vs {actual.shape}")
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def test_loglik(mean, variance, actual) -> float:
    mean, variance, actual = (np.asarray(a, dtype=float) for a in (mean, variance, actual))
    if not (mean.shape == variance.shape == actual.shape):
        raise ParameterError("length mismatch")
    return float(np.sum(gaussian_log_density(actual, mean, variance)))


test_loglik.__test__ = False  # keep pytest from collecting it


def recalibration_gain(mean, variance, actual) -> tuple[float, float]:
    """Best scalar variance multiplier and the log-likelihood it adds.

    For Gaussian predictions the optimum is ``c = mean(z^2)`` with
    ``z = (y - mean) / sd``, gaining ``N/2 (c - 1 - log c)`` nats.
    """
    mean, variance, actual = (np.asarray(a, dtype=float) for a in (mean, variance, actual))
    if not (mean.shape == variance.shape == actual.shape) or mean.size == 0:
        raise ParameterError("length mismatch or empty input")
    c = float(np.mean((actual - mean) ** 2 / variance))
    return c, 0.5 * mean.size * (c - 1.0 - math.log(c))


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BenchmarkConfig:
    """Everything a benchmark or sensitivity run depends on besides the data."""

    split: SplitConfig = SplitConfig()
    model: ModelSpec = ModelSpec()
    feature_modes: tuple[str, ...] = ("none", "both")
    baselines: tuple[str, ...] = bl.BASELINE_KINDS
    tune_kind: str = "ols"
    radius_grid: tuple[float, ...] = bl.DEFAULT_RADIUS_GRID
    seed: int = 0
    baseline_options: dict = field(default_factory=dict)

    def to_kv(self) -> str:
        """Plain ``key = value`` lines in sorted order; the basis of :meth:`hash`."""
        flat = {"split.ratio": self.split.ratio, "split.seed": self.split.seed,
                "feature_modes": ",".join(self.feature_modes), "baselines": ",".join(self.baselines),
                "tune_kind": self.tune_kind, "radius_grid": ",".join(repr(float(r)) for r in self.radius_grid),
                "seed": self.seed}
        for k, v in self.model.to_dict().items():
            flat[f"model.{k}"] = ",".join(map(str, v)) if isinstance(v, (tuple, list)) else v
        for kind, opts in sorted(self.baseline_options.items()):
            for k, v in sorted(opts.items()):
                flat[f"baseline.{kind}.{k}"] = v
        return "".join(f"{k} = {_kv(v)}\n" for k, v in sorted(flat.items()))

    def hash(self) -> str:
        return hashlib.sha256(self.to_kv().encode()).hexdigest()[:16]


def _kv(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "none" if v is None else str(v)


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalRow:
    label: str
    mode: str
    rmse: float
    loglik: float
    seconds: float = 0.0
    status: str = "ok"
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class EvalReport:
    """Benchmark rows plus the metadata needed to reproduce them.

    Timings are kept on the rows but left out of :meth:`to_csv` and
    :meth:`to_text` so that reports are byte-identical across reruns.
    """

    rows: list[EvalRow]
    n_train: int
    n_test: int
    split_seed: int
    config_hash: str
    title: str = "Out-of-sample performance"

    def row(self, label: str, mode: str = "") -> EvalRow:
        for r in self.rows:
            if r.label == label and r.mode == mode:
                return r
        raise KeyError((label, mode))

    def name(self, r: EvalRow) -> str:
        return f"{r.label} [{r.mode}]" if r.mode else r.label

    def best(self) -> EvalRow:
        ok = [r for r in self.rows if r.ok]
        return min(ok, key=lambda r: r.rmse)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model,features,rmse,loglik,status\n")
        for r in self.rows:
            buf.write(f"{r.label},{r.mode},{_num(r.rmse)},{_num(r.loglik)},{r.status}\n")
        return buf.getvalue()

    def to_text(self) -> str:
        names = [self.name(r) for r in self.rows]
        w = max([len("Model")] + [len(n) for n in names])
        lines = [self.title,
                 f"train={self.n_train} test={self.n_test} split_seed={self.split_seed} config={self.config_hash}",
                 f"{'Model':<{w}}  {'RMSE':>8}  {'Log-lik.':>10}"]
        for n, r in zip(names, self.rows):
            if r.ok:
                lines.append(f"{n:<{w}}  {r.rmse:8.3f}  {r.loglik:10.3f}")
            else:
                lines.append(f"{n:<{w}}  {'failed':>8}  {r.message}")
        return "\n".join(lines) + "\n"

    def timings_csv(self) -> str:
        return "model,features,seconds\n" + "".join(
            f"{r.label},{r.mode},{r.seconds:.3f}\n" for r in self.rows)


def _num(v: float) -> str:
    return "nan" if not math.isfinite(v) else repr(float(v))


# --------------------------------------------------------------------------
# runners


def _timed_row(label, mode, fn) -> EvalRow:
    t0 = time.perf_counter()
    try:
        mean, var, actual = fn()
        return EvalRow(label, mode, rmse(mean, actual), test_loglik(mean, var, actual),
                       time.perf_counter() - t0)
    except (EvpoiError, ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        return EvalRow(label, mode, math.nan, math.nan, time.perf_counter() - t0, "failed",
                       f"{type(exc).__name__}: {exc}".replace("\n", " ").replace(",", ";"))


def poi_model_scores(spec: ModelSpec, train: Dataset, test: Dataset):
    model = svi.train(spec, train)
    pred = predict_dataset(model, test)
    return pred.mean, pred.variance, test.standardized_target()


def run_benchmark(dataset: Dataset, config: BenchmarkConfig = BenchmarkConfig()) -> EvalReport:
    """Every baseline in every feature mode, then the POI model, all on one split."""
    train, test = split(dataset, config.split)
    tr = svi.SviData.from_dataset(train)
    te = svi.SviData.from_dataset(test)
    radii = None
    rows = []
    for kind in config.baselines:
        for mode in config.feature_modes:
            def fit_eval(kind=kind, mode=mode):
                nonlocal radii
                fc = bl.FeatureConfig(mode=mode)
                if mode in ("density", "both"):
                    if radii is None:
                        radii = bl.tune_dmax(tr, config.radius_grid, config.tune_kind, config.seed)
                    fc = bl.FeatureConfig(mode=mode, radii=dict(radii))
                model = bl.fit_baseline(kind, tr, fc, config.seed, **config.baseline_options.get(kind, {}))
                m, v = model.predict(te)
                return m, v, te.y
            rows.append(_timed_row(bl.LABELS[kind], mode, fit_eval))
    rows.append(_timed_row(POI_MODEL_LABEL, "", lambda: poi_model_scores(config.model, train, test)))
    return EvalReport(rows, len(train.stations), len(test.stations), config.split.seed, config.hash())


def sensitivity(dataset: Dataset, config: BenchmarkConfig = BenchmarkConfig()) -> EvalReport:
    """The POI model under each charger form and point kernel, on one shared split."""
    train, test = split(dataset, config.split)
    rows = []
    for charger, kernel in SENSITIVITY_GRID:
        spec = dataclasses.replace(config.model, charger_kind=charger, kernel_family=kernel)
        rows.append(_timed_row(CHARGER_LABELS[charger], KERNEL_LABELS[kernel],
                               lambda spec=spec: poi_model_scores(spec, train, test)))
    return EvalReport(rows, len(train.stations), len(test.stations), config.split.seed, config.hash(),
                      title="Sensitivity analysis")


def run_repeated(dataset: Dataset, config: BenchmarkConfig = BenchmarkConfig(),
                 split_seeds=range(20)) -> list[dict]:
    """The benchmark over several split seeds; mean and sd of each row's metrics."""
    reports = [run_benchmark(dataset, dataclasses.replace(config, split=SplitConfig(config.split.ratio, s)))
               for s in split_seeds]
    out = []
    for i, r in enumerate(reports[0].rows):
        rm = np.array([rep.rows[i].rmse for rep in reports])
        ll = np.array([rep.rows[i].loglik for rep in reports])
        ok = np.isfinite(rm)
        out.append({"model": r.label, "features": r.mode, "runs": int(ok.sum()),
                    "rmse_mean": float(np.mean(rm[ok])) if ok.any() else math.nan,
                    "rmse_sd": float(np.std(rm[ok], ddof=1)) if ok.sum() > 1 else 0.0,
                    "loglik_mean": float(np.mean(ll[ok])) if ok.any() else math.nan,
                    "loglik_sd": float(np.std(ll[ok], ddof=1)) if ok.sum() > 1 else 0.0})
    return out


__all__ = [
    "SplitConfig", "split", "rmse", "test_loglik", "recalibration_gain", "BenchmarkConfig", "EvalRow", "EvalReport",
    "run_benchmark", "sensitivity", "run_repeated", "synth_generate", "SynthConfig", "GroundTruth",
    "POI_MODEL_LABEL", "SENSITIVITY_GRID",
]
