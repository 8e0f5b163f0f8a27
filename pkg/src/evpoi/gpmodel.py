"""The additive model ``f = g(x) + sum_type h_type(s) + h_0(s)`` and its fitted form.

Processes are addressed by name: ``"h0"`` for the Matérn spatial
heterogeneity and the POI type name (``"Education"``, ...) for each POI
process.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ArtifactError, ParameterError, StateError
from .geodata import Dataset, apply_covariate_stats
from .kernels import KERNEL_FAMILIES, MaternKernel, PoiCovariance, PointKernel

FORMAT_VERSION = 1
HETEROGENEITY = "h0"
CHARGER_KINDS = ("neural", "linear")
FACTORIZATIONS = ("joint", "mean_field")
VARIATIONAL_STEPS = ("optimal", "adam")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and optimizer settings for the POI model."""

    charger_kind: str = "neural"
    kernel_family: str = "relu"
    poi_types: tuple[str, ...] | None = None
    inducing_count: int | None = None
    seed: int = 0
    step_size: float = 0.01
    iterations: int = 5000
    hidden: tuple[int, ...] = (8, 8)
    jitter: float = 1e-6
    cosine_decay: bool = False
    init_theta: float = 0.3
    init_alpha_variance: float = 0.1
    init_matern_variance: float = 0.5
    init_matern_lengthscale: float = 1.0
    init_noise_sd: float = 0.5
    init_q_scale: float = 0.1
    # coordinate grid search over (theta, alpha variance) per type before Adam
    init_search: bool = True
    # extra random starts screened by a short run; the best is trained in full
    restarts: int = 4
    restart_iterations: int = 150
    factorization: str = "joint"
    variational_step: str = "optimal"

    def __post_init__(self):
        if self.factorization not in FACTORIZATIONS:
            raise ParameterError(f"factorization must be one of {FACTORIZATIONS}")
        if self.variational_step not in VARIATIONAL_STEPS:
            raise ParameterError(f"variational_step must be one of {VARIATIONAL_STEPS}")
        if self.charger_kind not in CHARGER_KINDS:
            raise ParameterError(f"charger_kind must be one of {CHARGER_KINDS}")
        if self.kernel_family not in KERNEL_FAMILIES:
            raise ParameterError(f"kernel_family must be one of {KERNEL_FAMILIES}")
        if self.inducing_count is not None and self.inducing_count < 1:
            raise ParameterError("inducing_count must be >= 1")
        if self.iterations < 0 or self.step_size <= 0:
            raise ParameterError("iterations must be >= 0 and step_size > 0")
        if self.restarts < 1 or self.restart_iterations < 0:
            raise ParameterError("restarts must be >= 1 and restart_iterations >= 0")
        if self.poi_types is not None:
            object.__setattr__(self, "poi_types", tuple(self.poi_types))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def resolve_inducing(self, n_train: int) -> int:
        m = self.inducing_count if self.inducing_count is not None else min(n_train, 100)
        if m > n_train:
            raise ParameterError(f"inducing_count {m} exceeds the {n_train} training stations")
        return m

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        for key in ("poi_types", "hidden"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ChargerFunction:
    """Charger influence ``g``: a dense tanh network, or affine when ``widths`` is empty.

    ``params`` alternates weight matrices and bias vectors, one pair per layer,
    ending with the linear output layer.
    """

    kind: str
    widths: tuple[int, ...]
    params: list[np.ndarray]

    @classmethod
    def create(cls, kind: str, n_inputs: int, widths: Sequence[int] = (8, 8),
               rng: np.random.Generator | None = None, scale: float = 0.1) -> "ChargerFunction":
        widths = tuple(widths) if kind == "neural" else ()
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = (n_inputs,) + widths + (1,)
        params = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            params.append(rng.normal(0.0, scale, size=(a, b)))
            params.append(np.zeros(b))
        return cls(kind, widths, params)

    @classmethod
    def linear(cls, weights, bias) -> "ChargerFunction":
        w = np.asarray(weights, dtype=float).reshape(-1, 1)
        return cls("linear", (), [w, np.array([float(bias)])])

    @property
    def n_inputs(self) -> int:
        return self.params[0].shape[0]

    def __call__(self, x):
        return charger_forward(self.params, x)


def charger_forward(params, x):
    """Forward pass on numpy arrays or torch tensors; returns shape ``(n,)``."""
    tensor = isinstance(x, torch.Tensor)
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        h = h @ W + b
        if i < n_layers - 1:
            h = torch.tanh(h) if tensor else np.tanh(h)
    return h[..., 0]


def charger_influence(g: ChargerFunction, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.shape[1] != g.n_inputs:
        raise ParameterError(f"covariate vector has length {x2.shape[1]}, expected {g.n_inputs}")
    out = g(x2)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class InducingSet:
    locations: np.ndarray
    indices: np.ndarray
    seed: int


@dataclass(frozen=True)
class VariationalState:
    """``q(u_p) = N(mean[p], chol[p] @ chol[p].T)`` for every process ``p``.

    Under the joint factorization ``joint_chol`` is the lower Cholesky factor
    of the covariance of all inducing outputs stacked in ``mean``'s key
    order; the per-process ``chol`` entries are then factors of its diagonal
    blocks.
    """

    mean: dict[str, np.ndarray]
    chol: dict[str, np.ndarray]
    joint_chol: np.ndarray | None = None

    def covariance(self, process: str) -> np.ndarray:
        L = self.chol[process]
        return L @ L.T


@dataclass(frozen=True)
class FittedModel:
    spec: ModelSpec
    poi_types: tuple[str, ...]
    poi_locations: dict[str, np.ndarray]
    poi_ids: dict[str, list[str]]
    theta: dict[str, float]
    alpha_variance: dict[str, float]
    matern_variance: float
    matern_lengthscale: float
    noise_sd: float
    charger: ChargerFunction
    inducing: InducingSet
    state: VariationalState
    jitter: float
    target_stats: tuple[float, float]
    covariate_stats: tuple[tuple[float, float], ...]
    trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_norms: dict[str, np.ndarray] = field(default_factory=dict)
    reference: tuple[float, float] | None = None  # lon/lat origin of the planar coordinates

    @property
    def processes(self) -> tuple[str, ...]:
        return (HETEROGENEITY,) + self.poi_types

    def covariance(self, process: str):
        if process == HETEROGENEITY:
            return MaternKernel(self.matern_variance, self.matern_lengthscale)
        if process not in self.poi_types:
            raise ParameterError(f"unknown process {process!r}; expected one of {self.processes}")
        return PoiCovariance(self.poi_locations[process],
                             PointKernel(self.spec.kernel_family, self.theta[process]),
                             self.alpha_variance[process])

    def posterior(self, process: str, locations) -> tuple[np.ndarray, np.ndarray]:
        from .svi import posterior_at

        return posterior_at(self.state, self.covariance(process), self.inducing.locations,
                            locations, process, self.jitter)

    def standardize_covariates(self, X) -> np.ndarray:
        return apply_covariate_stats(X, self.covariate_stats)


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    variance: np.ndarray
    utilization: np.ndarray
    components: dict[str, np.ndarray]


def _require_trained(model) -> None:
    if not isinstance(model, FittedModel):
        raise StateError("model has not been trained")


def predict(model: FittedModel, covariates, locations) -> Prediction:
    """Predictive mean/variance on the standardized scale for raw covariates.

    ``components`` holds the charger term under ``"g"`` and the posterior
    mean of every latent process, so that their sum is ``mean``.
    """
    _require_trained(model)
    X = model.standardize_covariates(np.asarray(covariates, dtype=float).reshape(len(locations), -1))
    locs = np.asarray(locations, dtype=float).reshape(-1, 2)
    comps = {"g": model.charger(X)}
    mean = comps["g"].copy()
    var = np.full(len(locs), model.noise_sd ** 2)
    if model.state.joint_chol is not None:
        from .svi import joint_posterior

        means, latent_var = joint_posterior(model, locs)
        for p in model.processes:
            comps[p] = means[p]
            mean = mean + means[p]
        var = var + latent_var
    else:
        for p in model.processes:
            m, v = model.posterior(p, locs)
            comps[p] = m
            mean = mean + m
            var = var + v
    mu_t, sd_t = model.target_stats
    util = np.clip(mean * sd_t + mu_t, 0.0, 1.0)
    return Prediction(mean, var, util, comps)


def predict_dataset(model: FittedModel, dataset: Dataset) -> Prediction:
    return predict(model, dataset.covariates, dataset.locations)


def gaussian_log_density(y, mean, variance) -> np.ndarray:
    y, mean, variance = (np.asarray(a, dtype=float) for a in (y, mean, variance))
    if np.any(variance <= 0):
        raise ParameterError("predictive variances must be positive")
    return -0.5 * np.log(2.0 * math.pi * variance) - 0.5 * (y - mean) ** 2 / variance


def log_predictive_density(model: FittedModel, covariates, locations, y) -> tuple[np.ndarray, float]:
    """Per-station Gaussian log predictive densities of standardized ``y`` and their sum."""
    pred = predict(model, covariates, locations)
    lp = gaussian_log_density(y, pred.mean, pred.variance)
    return lp, float(np.sum(lp))


# --------------------------------------------------------------------------
# persistence: one JSON document; floats are written with repr so they
# round-trip exactly.


def _arr(a) -> dict:
    a = np.asarray(a)
    return {"dtype": str(a.dtype), "shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(d) -> np.ndarray:
    return np.array(d["data"], dtype=d["dtype"]).reshape(d["shape"])


def _tril_to_dict(L):
    # the joint factor is lower triangular; only its lower half is stored
    if L is None:
        return None
    return {"n": int(L.shape[0]), "tril": _arr(L[np.tril_indices(L.shape[0])])}


def _tril_from_dict(d):
    if d is None:
        return None
    n = int(d["n"])
    L = np.zeros((n, n))
    L[np.tril_indices(n)] = _unarr(d["tril"])
    return L


def model_to_dict(model: FittedModel) -> dict:
    return {
        "format": "evpoi-model",
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "poi_types": list(model.poi_types),
        "poi_locations": {k: _arr(v) for k, v in model.poi_locations.items()},
        "poi_ids": {k: list(v) for k, v in model.poi_ids.items()},
        "theta": dict(model.theta),
        "alpha_variance": dict(model.alpha_variance),
        "matern_variance": model.matern_variance,
        "matern_lengthscale": model.matern_lengthscale,
        "noise_sd": model.noise_sd,
        "charger": {"kind": model.charger.kind, "widths": list(model.charger.widths),
                    "params": [_arr(p) for p in model.charger.params]},
        "inducing": {"locations": _arr(model.inducing.locations),
                     "indices": _arr(model.inducing.indices), "seed": model.inducing.seed},
        "state": {"mean": {k: _arr(v) for k, v in model.state.mean.items()},
                  "chol": {k: _arr(v) for k, v in model.state.chol.items()},
                  "joint_chol": _tril_to_dict(model.state.joint_chol)},
        "jitter": model.jitter,
        "target_stats": list(model.target_stats),
        "covariate_stats": [list(s) for s in model.covariate_stats],
        "trace": _arr(model.trace),
        "grad_norms": {k: _arr(v) for k, v in model.grad_norms.items()},
        "reference": None if model.reference is None else list(model.reference),
    }


def model_from_dict(d: dict) -> FittedModel:
    if d.get("format") != "evpoi-model":
        raise ArtifactError("not an evpoi model file")
    if d.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"model format version {d.get('version')} is not supported "
                            f"(expected {FORMAT_VERSION})")
    try:
        ch = d["charger"]
        return FittedModel(
            spec=ModelSpec.from_dict(d["spec"]),
            poi_types=tuple(d["poi_types"]),
            poi_locations={k: _unarr(v) for k, v in d["poi_locations"].items()},
            poi_ids={k: list(v) for k, v in d["poi_ids"].items()},
            theta={k: float(v) for k, v in d["theta"].items()},
            alpha_variance={k: float(v) for k, v in d["alpha_variance"].items()},
            matern_variance=float(d["matern_variance"]),
            matern_lengthscale=float(d["matern_lengthscale"]),
            noise_sd=float(d["noise_sd"]),
            charger=ChargerFunction(ch["kind"], tuple(ch["widths"]), [_unarr(p) for p in ch["params"]]),
            inducing=InducingSet(_unarr(d["inducing"]["locations"]), _unarr(d["inducing"]["indices"]),
                                 int(d["inducing"]["seed"])),
            state=VariationalState({k: _unarr(v) for k, v in d["state"]["mean"].items()},
                                   {k: _unarr(v) for k, v in d["state"]["chol"].items()},
                                   _tril_from_dict(d["state"].get("joint_chol"))),
            jitter=float(d["jitter"]),
            target_stats=tuple(d["target_stats"]),
            covariate_stats=tuple(tuple(s) for s in d["covariate_stats"]),
            trace=_unarr(d["trace"]),
            grad_norms={k: _unarr(v) for k, v in d["grad_norms"].items()},
            reference=None if d.get("reference") is None else tuple(d["reference"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"corrupt model file: {exc}") from exc


def save_model(model: FittedModel, path) -> str:
    """Write the model and return the SHA-256 of the file contents."""
    text = json.dumps(model_to_dict(model), sort_keys=True)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode()).hexdigest()


def load_model(path) -> FittedModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read model file {path}: {exc}") from exc
    return model_from_dict(d)
