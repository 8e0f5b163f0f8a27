"""Point-influence kernels, the Matérn 3/2 covariance and the induced POI covariance.

The scalar kernels accept numpy arrays or torch tensors; the training code
calls the same functions on tensors so that autograd sees one definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError, ParameterError
from .geodata import pairwise_distances

SQRT3 = math.sqrt(3.0)
KERNEL_FAMILIES = ("relu", "gaussian")


def _is_tensor(x) -> bool:
    return isinstance(x, torch.Tensor)


def _check_positive(name, value):
    if _is_tensor(value):
        if not bool(torch.all(value > 0)):
            raise ParameterError(f"{name} must be positive")
    elif not np.all(np.asarray(value) > 0):
        raise ParameterError(f"{name} must be positive, got {value}")


def relu_kernel(d, theta):
    """``max(0, 1 - d/theta)``; zero at and beyond the cut-off.

    On tensors the derivative at ``d == theta`` is the zero one-sided value.
    """
    _check_positive("theta", theta)
    if _is_tensor(d) or _is_tensor(theta):
        return torch.relu(1.0 - d / theta)
    return np.maximum(1.0 - np.asarray(d, dtype=float) / theta, 0.0)


def gaussian_kernel(d, theta):
    _check_positive("theta", theta)
    if _is_tensor(d) or _is_tensor(theta):
        return torch.exp(-(d * d) / (2.0 * theta * theta))
    d = np.asarray(d, dtype=float)
    return np.exp(-(d * d) / (2.0 * theta * theta))


def matern32(d, variance, lengthscale):
    _check_positive("variance", variance)
    _check_positive("lengthscale", lengthscale)
    r = SQRT3 * d / lengthscale
    if _is_tensor(r):
        return variance * (1.0 + r) * torch.exp(-r)
    r = np.asarray(r, dtype=float)
    return variance * (1.0 + r) * np.exp(-r)


def point_kernel(family: str, d, theta):
    if family == "relu":
        return relu_kernel(d, theta)
    if family == "gaussian":
        return gaussian_kernel(d, theta)
    raise ParameterError(f"unknown kernel family {family!r}; expected one of {KERNEL_FAMILIES}")


@dataclass(frozen=True)
class PointKernel:
    family: str
    theta: float

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ParameterError(f"unknown kernel family {self.family!r}")
        _check_positive("theta", self.theta)

    def __call__(self, d):
        return point_kernel(self.family, d, self.theta)


@dataclass(frozen=True)
class MaternKernel:
    variance: float
    lengthscale: float

    def __post_init__(self):
        _check_positive("variance", self.variance)
        _check_positive("lengthscale", self.lengthscale)

    def __call__(self, d):
        return matern32(d, self.variance, self.lengthscale)

    def matrix(self, A, B) -> np.ndarray:
        return self(pairwise_distances(A, B))

    def diag(self, A) -> np.ndarray:
        return np.full(len(np.asarray(A).reshape(-1, 2)), float(self.variance))


@dataclass(frozen=True)
class PoiCovariance:
    """Covariance of ``h(s) = sum_j alpha_j k(|s - w_j|)`` with iid ``alpha_j ~ N(0, alpha_variance)``."""

    poi_locations: np.ndarray
    point_kernel: PointKernel
    alpha_variance: float

    def __post_init__(self):
        object.__setattr__(self, "poi_locations",
                           np.asarray(self.poi_locations, dtype=float).reshape(-1, 2))
        _check_positive("alpha_variance", self.alpha_variance)

    def features(self, A) -> np.ndarray:
        """Kernel weights of every POI at every point, shape ``(len(A), n_poi)``."""
        return self.point_kernel(pairwise_distances(A, self.poi_locations))

    def matrix(self, A, B) -> np.ndarray:
        return self.alpha_variance * self.features(A) @ self.features(B).T

    def diag(self, A) -> np.ndarray:
        phi = self.features(A)
        return self.alpha_variance * np.sum(phi * phi, axis=1)


def poi_cov(s, s_prime, cov: PoiCovariance) -> float:
    return float(cov.matrix(np.reshape(s, (1, 2)), np.reshape(s_prime, (1, 2)))[0, 0])


def jittered_cholesky(K, jitter: float = 1e-6, max_jitter: float = 1e-4, name: str = "K"):
    """Cholesky factor of ``K + jitter*I``, raising jitter tenfold on failure.

    Works on numpy arrays and (batched) torch tensors. Returns
    ``(L, jitter_used)``.
    """
    j = jitter
    while True:
        if _is_tensor(K):
            eye = torch.eye(K.shape[-1], dtype=K.dtype)
            L, info = torch.linalg.cholesky_ex(K + j * eye)
            if not bool(torch.any(info > 0)):
                return L, j
        else:
            try:
                return np.linalg.cholesky(K + j * np.eye(K.shape[0])), j
            except np.linalg.LinAlgError:
                pass
        if j >= max_jitter:
            raise NumericalError(f"Cholesky factorization of {name} failed with jitter up to {max_jitter:g}")
        j = min(max_jitter, (j * 10.0) if j > 0 else 1e-6)


def cov_matrix(A, B, cov, jitter: float = 0.0, name: str = "K") -> np.ndarray:
    """Covariance matrix between two point sets.

    ``B is None`` (or ``B is A``) means a Gram matrix. With ``jitter > 0`` the
    jitter goes on the diagonal and is escalated tenfold (up to 1e-4) until
    the matrix admits a Cholesky factorization; ``jitter == 0`` returns the
    raw matrix unchecked.
    """
    same = B is None or B is A
    A = np.asarray(A, dtype=float).reshape(-1, 2)
    K = cov.matrix(A, A if same else B)
    if not same or jitter <= 0:
        return K
    K = 0.5 * (K + K.T)
    _, used = jittered_cholesky(K, jitter, name=name)
    return K + used * np.eye(K.shape[0])
