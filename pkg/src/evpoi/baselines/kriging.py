"""Regression kriging: a regressor on features plus a Matérn 3/2 GP on its residuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.linalg import cho_solve, solve_triangular

from ..errors import NumericalError
from ..geodata import pairwise_distances
from ..kernels import jittered_cholesky, matern32
from .common import Scaler, ols_coefficients, with_intercept

DTYPE = torch.float64


def _inv_softplus(x: float) -> float:
    return float(x + np.log(-np.expm1(-x)))


@dataclass
class ResidualGP:
    """Zero-mean Matérn 3/2 GP with Gaussian noise, conditioned on training residuals."""

    locations: np.ndarray
    residuals: np.ndarray
    variance: float
    lengthscale: float
    noise_variance: float
    chol: np.ndarray
    weights: np.ndarray  # (K + noise I)^{-1} r

    @classmethod
    def fit(cls, locations, residuals, iterations: int = 300, step_size: float = 0.05,
            noise_variance: float | None = None, noise_floor: float = 1e-6) -> "ResidualGP":
        """Maximize the exact marginal likelihood with Adam.

        ``noise_variance`` fixes the noise instead of learning it; a tiny
        value gives the interpolating limit.
        """
        locs = np.asarray(locations, dtype=float).reshape(-1, 2)
        r = np.asarray(residuals, dtype=float)
        D = torch.as_tensor(pairwise_distances(locs, locs), dtype=DTYPE)
        rt = torch.as_tensor(r, dtype=DTYPE)
        n = len(r)
        eye = torch.eye(n, dtype=DTYPE)
        v0 = max(float(np.var(r)), 1e-4)
        raw = {"var": torch.tensor([_inv_softplus(v0 / 2)], dtype=DTYPE),
               "ls": torch.tensor([_inv_softplus(1.0)], dtype=DTYPE),
               "noise": torch.tensor([_inv_softplus(v0 / 2)], dtype=DTYPE)}
        learn = ["var", "ls"] + (["noise"] if noise_variance is None else [])
        for k in learn:
            raw[k].requires_grad_(True)
        sp = torch.nn.functional.softplus

        def noise_of(raw):
            if noise_variance is not None:
                return torch.tensor(float(noise_variance), dtype=DTYPE)
            return sp(raw["noise"])[0] + noise_floor

        if n > 1 and iterations > 0:
            opt = torch.optim.Adam([raw[k] for k in learn], lr=step_size, betas=(0.9, 0.999), eps=1e-8)
            for _ in range(iterations):
                opt.zero_grad()
                K = matern32(D, sp(raw["var"])[0], sp(raw["ls"])[0]) + noise_of(raw) * eye
                L, info = torch.linalg.cholesky_ex(K)
                if bool(info > 0):
                    break
                a = torch.cholesky_solve(rt[:, None], L)[:, 0]
                nll = 0.5 * rt @ a + torch.sum(torch.log(torch.diagonal(L)))
                if not bool(torch.isfinite(nll)):
                    raise NumericalError("non-finite kriging marginal likelihood")
                nll.backward()
                opt.step()
        with torch.no_grad():
            var = float(sp(raw["var"])[0])
            ls = float(sp(raw["ls"])[0])
            noise = float(noise_of(raw))
        K = matern32(pairwise_distances(locs, locs), var, ls) + noise * np.eye(n)
        L, _ = jittered_cholesky(K, 0.0, name="kriging covariance")
        w = cho_solve((L, True), r)
        return cls(locs, r, var, ls, noise, L, w)

    def predict(self, locations) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent variance (noise excluded)."""
        q = np.asarray(locations, dtype=float).reshape(-1, 2)
        Kq = matern32(pairwise_distances(q, self.locations), self.variance, self.lengthscale)
        mean = Kq @ self.weights
        b = solve_triangular(self.chol, Kq.T, lower=True)
        var = self.variance - np.sum(b * b, axis=0)
        return mean, np.maximum(var, 0.0)


@dataclass
class LinearKriging:
    scaler: Scaler
    beta: np.ndarray
    gp: ResidualGP

    def predict(self, X, locations) -> tuple[np.ndarray, np.ndarray]:
        return predict_linear_kriging(self, X, locations)


def fit_linear_kriging(X, locations, y, **gp_options) -> LinearKriging:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    scaler = Scaler.fit(X)
    Xs = scaler.transform(X)
    beta = ols_coefficients(Xs, y)
    resid = y - with_intercept(Xs) @ beta
    return LinearKriging(scaler, beta, ResidualGP.fit(locations, resid, **gp_options))


def predict_linear_kriging(model: LinearKriging, X, locations) -> tuple[np.ndarray, np.ndarray]:
    trend = with_intercept(model.scaler.transform(X)) @ model.beta
    m, v = model.gp.predict(locations)
    return trend + m, v + model.gp.noise_variance
