"""Sparse variational inference for the additive latent GP model.

All ``1 + |types|`` processes share one set of inducing locations sampled
from the training stations. The variational parameters are optimized in
whitened coordinates: with ``Kuu = Lk Lk^T``, ``u_p = Lk v_p`` and
``q(v_p) = N(qm_p, Lq_p Lq_p^T)``. The unwhitened state exposed through
:class:`~evpoi.gpmodel.VariationalState` is ``m = Lk qm``, ``L = Lk Lq``;
the KL divergence is identical in both coordinate systems.

The likelihood is Gaussian, so the expected log-likelihood is computed in
closed form over the full batch.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch.nn.functional import softplus

from .errors import NumericalError, ParameterError, TrainingError
from .geodata import Dataset, pairwise_distances
from .gpmodel import (HETEROGENEITY, ChargerFunction, FittedModel, InducingSet, ModelSpec,
                      VariationalState, charger_forward)
from .kernels import jittered_cholesky, matern32, point_kernel

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)


def inv_softplus(x):
    x = np.asarray(x, dtype=float)
    return x + np.log(-np.expm1(-x))


# --------------------------------------------------------------------------
# data and parameter containers


@dataclass
class SviData:
    """Standardized training arrays.

    ``poi_locations`` maps each POI type, in model order, to its planar
    locations.
    """

    locations: np.ndarray
    covariates: np.ndarray
    y: np.ndarray
    poi_locations: dict[str, np.ndarray]

    @classmethod
    def from_dataset(cls, dataset: Dataset, poi_types=None) -> "SviData":
        types = tuple(poi_types) if poi_types is not None else dataset.poi_types
        return cls(dataset.locations, dataset.standardized_covariates(),
                   dataset.standardized_target(),
                   {t: dataset.poi_locations(t) for t in types})

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def poi_types(self) -> tuple[str, ...]:
        return tuple(self.poi_locations)


class Problem:
    """Constant tensors for one (data, inducing set) pair.

    Distances never depend on parameters, so they are computed once here.
    """

    def __init__(self, data: SviData, Z: np.ndarray, kernel_family: str = "relu",
                 jitter: float = 1e-6):
        self.data = data
        self.kernel_family = kernel_family
        self.jitter = jitter
        self.types = data.poi_types
        self.Z = np.asarray(Z, dtype=float).reshape(-1, 2)
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)
        self.y = t(data.y)
        self.X = t(data.covariates).reshape(data.n, -1)
        self.D_zz = t(pairwise_distances(self.Z, self.Z))
        self.D_zs = t(pairwise_distances(self.Z, data.locations))
        self.D_zw = {g: t(pairwise_distances(self.Z, data.poi_locations[g])) for g in self.types}
        self.D_sw = {g: t(pairwise_distances(data.locations, data.poi_locations[g])) for g in self.types}

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def processes(self) -> tuple[str, ...]:
        return (HETEROGENEITY,) + self.types


BLOCK_ORDER = ("theta", "alpha_var", "matern_var", "matern_ls", "noise", "charger",
               "q_mean", "q_diag", "q_off")
Q_BLOCKS = ("q_mean", "q_diag", "q_off")


class Params:
    """Unconstrained optimizer variables, as an ordered mapping of named tensors.

    Positive quantities are softplus-transformed; ``q_diag`` holds the
    softplus pre-image of the whitened Cholesky diagonal and ``q_off`` its
    strictly-lower entries. Under the joint factorization the factor covers
    all ``P*M`` stacked inducing outputs (process-major order); under the
    mean-field one there is a separate ``M x M`` factor per process.
    """

    def __init__(self, tensors: dict[str, torch.Tensor], M: int, factorization: str = "joint"):
        self.tensors = tensors
        self.M = M
        self.factorization = factorization
        self.P = tensors["q_mean"].shape[0]
        n = self.P * M if factorization == "joint" else M
        self._tril = torch.tril_indices(n, n, offset=-1)

    def names(self) -> list[str]:
        return list(self.tensors)

    def block(self, name: str) -> str:
        return "charger" if name.startswith("charger.") else name

    def charger_params(self) -> list[torch.Tensor]:
        return [v for k, v in self.tensors.items() if k.startswith("charger.")]

    def q_chol(self) -> torch.Tensor:
        """Whitened Cholesky factor: ``(P*M, P*M)`` joint or ``(P, M, M)`` mean-field."""
        off = self.tensors["q_off"]
        diag = torch.diag_embed(softplus(self.tensors["q_diag"]))
        if self.factorization == "joint":
            n = self.P * self.M
            L = torch.zeros(n, n, dtype=DTYPE).index_put((self._tril[0], self._tril[1]), off)
            return L + diag
        L = torch.zeros(self.P, self.M, self.M, dtype=DTYPE)
        L = L.index_put((torch.arange(self.P)[:, None], self._tril[0][None, :],
                         self._tril[1][None, :]), off)
        return L + diag

    def set_q(self, qm: torch.Tensor, Lq: torch.Tensor) -> None:
        """Overwrite the variational block from a whitened mean and lower factor."""
        with torch.no_grad():
            self.tensors["q_mean"].copy_(qm.reshape(self.P, self.M))
            d = torch.diagonal(Lq, dim1=-2, dim2=-1)
            self.tensors["q_diag"].copy_(torch.as_tensor(inv_softplus(d.numpy()), dtype=DTYPE))
            t0, t1 = self._tril
            self.tensors["q_off"].copy_(Lq[t0, t1] if Lq.dim() == 2 else Lq[:, t0, t1])

    def flat(self) -> np.ndarray:
        return torch.cat([v.detach().reshape(-1) for v in self.tensors.values()]).numpy().copy()

    def set_flat(self, x) -> None:
        x = torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)
        i = 0
        with torch.no_grad():
            for v in self.tensors.values():
                n = v.numel()
                v.copy_(x[i:i + n].reshape(v.shape))
                i += n

    def labels(self) -> list[str]:
        out = []
        for k, v in self.tensors.items():
            out.extend(f"{k}[{j}]" for j in range(v.numel()))
        return out

    def requires_grad_(self, fixed=()) -> "Params":
        for k, v in self.tensors.items():
            v.requires_grad_(self.block(k) not in fixed and k not in fixed)
        return self

    def trainable(self) -> list[torch.Tensor]:
        return [v for v in self.tensors.values() if v.requires_grad]


def init_params(problem: Problem, spec: ModelSpec, rng: np.random.Generator) -> Params:
    G = len(problem.types)
    P = G + 1
    M = problem.M
    K = problem.X.shape[1]
    sp = lambda v, n=1: torch.as_tensor(np.full(n, inv_softplus(v)), dtype=DTYPE)
    tensors = {
        "theta": sp(spec.init_theta, G),
        "alpha_var": sp(spec.init_alpha_variance, G),
        "matern_var": sp(spec.init_matern_variance),
        "matern_ls": sp(spec.init_matern_lengthscale),
        "noise": sp(spec.init_noise_sd),
    }
    # N(0, 0.01) charger weights, i.e. sd 0.1
    g = ChargerFunction.create(spec.charger_kind, K, spec.hidden, rng, scale=0.1)
    for i, p in enumerate(g.params):
        tensors[f"charger.{i}"] = torch.as_tensor(p, dtype=DTYPE)
    tensors["q_mean"] = torch.zeros(P, M, dtype=DTYPE)
    if spec.factorization == "joint":
        n = P * M
        tensors["q_diag"] = sp(spec.init_q_scale, n)
        tensors["q_off"] = torch.zeros(n * (n - 1) // 2, dtype=DTYPE)
    else:
        tensors["q_diag"] = torch.as_tensor(np.full((P, M), inv_softplus(spec.init_q_scale)), dtype=DTYPE)
        tensors["q_off"] = torch.zeros(P, M * (M - 1) // 2, dtype=DTYPE)
    return Params(tensors, M, spec.factorization)


THETA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
ALPHA_VARIANCE_GRID = (0.03, 0.1, 0.3, 1.0)


def grid_initialize(params: Params, problem: Problem, theta_grid=THETA_GRID,
                    variance_grid=ALPHA_VARIANCE_GRID, rounds: int = 2) -> None:
    """Coordinate search over each type's ``(theta, alpha variance)`` on the collapsed bound.

    A ReLU kernel gives no gradient to POIs beyond its cut-off, so Adam
    started from one shared ``theta`` can settle in a poor basin; a few
    hundred bound evaluations pick a start in the right one.
    """
    t = params.tensors
    with torch.no_grad():
        for _ in range(rounds):
            for j in range(len(problem.types)):
                best = (-math.inf, float(t["theta"][j]), float(t["alpha_var"][j]))
                for theta in theta_grid:
                    for var in variance_grid:
                        t["theta"][j] = float(inv_softplus(theta))
                        t["alpha_var"][j] = float(inv_softplus(var))
                        try:
                            v = float(collapsed_elbo(params, problem))
                        except (NumericalError, torch.linalg.LinAlgError):
                            continue
                        if v > best[0]:
                            best = (v, t["theta"][j].item(), t["alpha_var"][j].item())
                t["theta"][j], t["alpha_var"][j] = best[1], best[2]


def random_start(params: Params, problem: Problem, rng: np.random.Generator) -> Params:
    """A copy of ``params`` with hyperparameters drawn at random, then grid-searched."""
    out = copy_params(params)
    t = out.tensors
    G = len(problem.types)
    logu = lambda lo, hi, n=1: np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    t["theta"] = torch.as_tensor(inv_softplus(rng.choice(THETA_GRID, size=G)), dtype=DTYPE)
    t["alpha_var"] = torch.as_tensor(inv_softplus(logu(0.03, 1.0, G)), dtype=DTYPE)
    t["matern_var"] = torch.as_tensor(inv_softplus(logu(0.05, 1.0)), dtype=DTYPE)
    t["matern_ls"] = torch.as_tensor(inv_softplus(logu(0.3, 3.0)), dtype=DTYPE)
    t["noise"] = torch.as_tensor(inv_softplus(logu(0.02, 0.5)), dtype=DTYPE)
    if G:
        grid_initialize(out, problem)
    return out


def copy_params(params: Params) -> Params:
    return Params({k: v.detach().clone() for k, v in params.tensors.items()}, params.M, params.factorization)


def constrained(params: Params) -> dict[str, torch.Tensor]:
    t = params.tensors
    return {
        "theta": softplus(t["theta"]),
        "alpha_var": softplus(t["alpha_var"]),
        "matern_var": softplus(t["matern_var"])[0],
        "matern_ls": softplus(t["matern_ls"])[0],
        "noise": softplus(t["noise"])[0],
    }


# --------------------------------------------------------------------------
# covariance assembly


def _covariances(problem: Problem, c: dict) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stacked ``Kuu`` (P,M,M), ``Kuf`` (P,M,N) and ``diag Kff`` (P,N), h0 first."""
    kuu = [matern32(problem.D_zz, c["matern_var"], c["matern_ls"])]
    kuf = [matern32(problem.D_zs, c["matern_var"], c["matern_ls"])]
    kff = [c["matern_var"] * torch.ones(problem.data.n, dtype=DTYPE)]
    for j, g in enumerate(problem.types):
        theta, a = c["theta"][j], c["alpha_var"][j]
        phi_z = point_kernel(problem.kernel_family, problem.D_zw[g], theta)
        phi_s = point_kernel(problem.kernel_family, problem.D_sw[g], theta)
        kuu.append(a * phi_z @ phi_z.T)
        kuf.append(a * phi_z @ phi_s.T)
        kff.append(a * torch.sum(phi_s * phi_s, dim=1))
    Kuu = torch.stack(kuu)
    Kuu = 0.5 * (Kuu + Kuu.transpose(-1, -2))
    return Kuu, torch.stack(kuf), torch.stack(kff)


@dataclass
class Projection:
    """Whitened cross-covariances ``A_p = Lk_p^{-1} Kuf_p`` and the residual target."""

    A: torch.Tensor  # (P, M, N)
    kff: torch.Tensor  # (P, N)
    Lk: torch.Tensor  # (P, M, M)
    jitter: float
    charger: torch.Tensor  # g(x) at the data
    noise_var: torch.Tensor

    @property
    def stacked(self) -> torch.Tensor:
        P, M, N = self.A.shape
        return self.A.reshape(P * M, N)


def project(params: Params, problem: Problem) -> Projection:
    c = constrained(params)
    Kuu, Kuf, kff = _covariances(problem, c)
    Lk, jit = jittered_cholesky(Kuu, problem.jitter, name="Kuu")
    A = torch.linalg.solve_triangular(Lk, Kuf, upper=False)
    g = charger_forward(params.charger_params(), problem.X)
    return Projection(A, kff, Lk, jit, g, c["noise"] ** 2)


@dataclass
class ElboTerms:
    expected_loglik: torch.Tensor
    kl: torch.Tensor  # one entry per process, or a single entry for the joint q
    mean: torch.Tensor  # per process means at the data, (P, N)
    var: torch.Tensor  # total latent variance at the data, (N,)
    charger: torch.Tensor
    jitter: float
    Lk: torch.Tensor

    @property
    def elbo(self) -> torch.Tensor:
        return self.expected_loglik - torch.sum(self.kl)


def _whitened_kl(qm: torch.Tensor, Lq: torch.Tensor) -> torch.Tensor:
    """``KL(N(qm, Lq Lq^T) || N(0, I))`` over the last axes."""
    n = qm.shape[-1]
    diag = torch.diagonal(Lq, dim1=-2, dim2=-1)
    return 0.5 * (torch.sum(Lq * Lq, dim=(-2, -1)) + torch.sum(qm * qm, dim=-1) - n
                  - 2.0 * torch.sum(torch.log(diag), dim=-1))


def elbo_terms(params: Params, problem: Problem) -> ElboTerms:
    pr = project(params, problem)
    A = pr.A
    qm = params.tensors["q_mean"]
    Lq = params.q_chol()
    mean = torch.einsum("pmn,pm->pn", A, qm)
    var = torch.sum(pr.kff - torch.sum(A * A, dim=1), dim=0)
    if params.factorization == "joint":
        B = Lq.T @ pr.stacked
        var = var + torch.sum(B * B, dim=0)
        kl = _whitened_kl(qm.reshape(-1), Lq).reshape(1)
    else:
        B = Lq.transpose(-1, -2) @ A
        var = var + torch.sum(B * B, dim=(0, 1))
        kl = _whitened_kl(qm, Lq)
    noise_sd = torch.sqrt(pr.noise_var)
    ell = gaussian_expected_loglik(problem.y, pr.charger + mean.sum(0), var, noise_sd)
    return ElboTerms(ell, kl, mean, var, pr.charger, pr.jitter, pr.Lk)


def gaussian_expected_loglik(y, mu, v, noise_sd):
    """``sum_i E_q[log N(y_i | f_i, noise_sd^2)]`` for ``f_i ~ N(mu_i, v_i)``."""
    s2 = noise_sd * noise_sd
    return torch.sum(-0.5 * (LOG_2PI + torch.log(s2)) - 0.5 * ((y - mu) ** 2 + v) / s2)


def collapsed_elbo(params: Params, problem: Problem) -> torch.Tensor:
    """The ELBO maximized in closed form over a joint Gaussian q.

    Equals ``log N(r | 0, A^T A + s2 I) - (tr Kff - tr A^T A) / (2 s2)`` with
    ``r = y - g(x)``; the linear algebra runs in whichever of the ``P*M``
    and ``N`` dimensions is smaller.
    """
    pr = project(params, problem)
    A = pr.stacked
    s2 = pr.noise_var
    r = problem.y - pr.charger
    n_ind, N = A.shape
    if n_ind <= N:
        Lam = torch.eye(n_ind, dtype=DTYPE) + A @ A.T / s2
        L = torch.linalg.cholesky(Lam)
        c = torch.linalg.solve_triangular(L, (A @ r)[:, None], upper=False)[:, 0] / s2
        logdet = N * torch.log(s2) + 2.0 * torch.sum(torch.log(torch.diagonal(L)))
        quad = r @ r / s2 - c @ c
    else:
        L = torch.linalg.cholesky(A.T @ A + s2 * torch.eye(N, dtype=DTYPE))
        a = torch.linalg.solve_triangular(L, r[:, None], upper=False)[:, 0]
        logdet = 2.0 * torch.sum(torch.log(torch.diagonal(L)))
        quad = a @ a
    trace_gap = torch.sum(pr.kff) - torch.sum(A * A)
    return -0.5 * (N * LOG_2PI + logdet + quad) - trace_gap / (2.0 * s2)


def optimal_joint_q(params: Params, problem: Problem) -> tuple[torch.Tensor, torch.Tensor]:
    """Whitened ``(qm, Lq)`` of the optimal joint q for the current hyperparameters."""
    with torch.no_grad():
        pr = project(params, problem)
        A = pr.stacked
        s2 = pr.noise_var
        r = problem.y - pr.charger
        Lam = torch.eye(A.shape[0], dtype=DTYPE) + A @ A.T / s2
        S = torch.cholesky_inverse(torch.linalg.cholesky(Lam))
        S = 0.5 * (S + S.T)
        qm = S @ (A @ r) / s2
        return qm, torch.linalg.cholesky(S)


def set_optimal_q(params: Params, problem: Problem, max_sweeps: int = 200, tol: float = 1e-10) -> None:
    """Move the variational block to its optimum for the current hyperparameters.

    Exact for the joint factorization; coordinate ascent to convergence for
    the mean-field one.
    """
    if params.factorization == "joint":
        params.set_q(*optimal_joint_q(params, problem))
        return
    prev = -math.inf
    for _ in range(max_sweeps):
        cavi_sweeps(params, problem, 1)
        cur = elbo(params, problem)
        if cur - prev <= tol * max(1.0, abs(cur)):
            break
        prev = cur


# --------------------------------------------------------------------------
# public operations


def init_state(train_locations, M: int, seed: int,
               processes=(HETEROGENEITY,)) -> tuple[InducingSet, VariationalState]:
    """Sample ``M`` inducing locations without replacement and a near-prior state.

    The returned state is in unwhitened coordinates with ``m = 0`` and
    covariance factor ``0.1 * I`` for every process.
    """
    locs = np.asarray(train_locations, dtype=float).reshape(-1, 2)
    if M > len(locs):
        raise ParameterError(f"cannot sample {M} inducing points from {len(locs)} stations")
    if M < 1:
        raise ParameterError("need at least one inducing point")
    idx = np.random.default_rng(seed).choice(len(locs), size=M, replace=False)
    z = InducingSet(locs[idx].copy(), idx.astype(np.int64), seed)
    state = VariationalState({p: np.zeros(M) for p in processes},
                             {p: 0.1 * np.eye(M) for p in processes})
    return z, state


def kl_term(m, L, K_uu) -> float:
    """``KL(N(m, L L^T) || N(0, K_uu))`` computed from the unwhitened parameters."""
    m = np.asarray(m, dtype=float)
    L = np.asarray(L, dtype=float)
    K = np.asarray(K_uu, dtype=float)
    try:
        Lk = np.linalg.cholesky(K)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("K_uu is not positive definite") from exc
    from scipy.linalg import solve_triangular

    W = solve_triangular(Lk, L, lower=True)
    a = solve_triangular(Lk, m, lower=True)
    M = len(m)
    logdet_k = 2.0 * np.sum(np.log(np.diag(Lk)))
    logdet_s = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    return 0.5 * (np.sum(W * W) + a @ a - M + logdet_k - logdet_s)


def expected_loglik(params: Params, problem: Problem) -> float:
    with torch.no_grad():
        return float(elbo_terms(params, problem).expected_loglik)


def elbo(params: Params, problem: Problem) -> float:
    with torch.no_grad():
        return float(elbo_terms(params, problem).elbo)


def gradients(params: Params, problem: Problem) -> tuple[float, np.ndarray]:
    """ELBO value and its exact gradient over the flattened unconstrained parameters."""
    for v in params.tensors.values():
        v.requires_grad_(True)
        v.grad = None
    value = elbo_terms(params, problem).elbo
    value.backward()
    grads = []
    for k, v in params.tensors.items():
        g = v.grad if v.grad is not None else torch.zeros_like(v)
        if not bool(torch.all(torch.isfinite(g))):
            raise NumericalError(f"non-finite gradient in parameter block {params.block(k)!r}")
        grads.append(g.reshape(-1))
    out = torch.cat(grads).numpy().copy()
    for v in params.tensors.values():
        v.requires_grad_(False)
        v.grad = None
    return float(value.detach()), out


def cavi_sweeps(params: Params, problem: Problem, sweeps: int = 1) -> None:
    """Closed-form coordinate ascent over the per-process factors (mean-field only).

    Each process's optimal Gaussian given the others is exact for the
    Gaussian likelihood, so every update can only raise the ELBO. With a
    single process one sweep reaches the optimum.
    """
    if params.factorization != "mean_field":
        raise ParameterError("coordinate ascent applies to the mean-field factorization")
    with torch.no_grad():
        pr = project(params, problem)
        A, s2 = pr.A, pr.noise_var
        qm = params.tensors["q_mean"]
        M = problem.M
        eye = torch.eye(M, dtype=DTYPE)
        tril = torch.tril_indices(M, M, offset=-1)
        for _ in range(sweeps):
            for p in range(A.shape[0]):
                means = torch.einsum("pmn,pm->pn", A, qm)
                r = problem.y - pr.charger - (means.sum(0) - means[p])
                Lp = torch.linalg.cholesky(eye + A[p] @ A[p].T / s2)
                S = torch.cholesky_inverse(Lp)
                qm[p] = S @ (A[p] @ r) / s2
                Ls = torch.linalg.cholesky(0.5 * (S + S.T))
                params.tensors["q_diag"][p] = torch.as_tensor(inv_softplus(torch.diagonal(Ls).numpy()))
                params.tensors["q_off"][p] = Ls[tril[0], tril[1]]


def _grad_norms(params: Params) -> dict[str, float]:
    out: dict[str, float] = {}
    for k, v in params.tensors.items():
        b = params.block(k)
        sq = float(torch.sum(v.grad ** 2)) if v.grad is not None else 0.0
        out[b] = out.get(b, 0.0) + sq
    return {k: math.sqrt(v) for k, v in out.items()}


def _objective(params: Params, problem: Problem, variational_step: str) -> torch.Tensor:
    if variational_step == "adam":
        return elbo_terms(params, problem).elbo
    if params.factorization == "joint":
        return collapsed_elbo(params, problem)
    cavi_sweeps(params, problem, 1)
    return elbo_terms(params, problem).elbo


def optimize(params: Params, problem: Problem, iterations: int, step_size: float = 0.01,
             cosine_decay: bool = False, fixed=(),
             variational_step: str = "adam") -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Adam ascent on the ELBO. Returns the per-iteration ELBO trace and gradient norms.

    With ``variational_step="optimal"`` the variational block is not an Adam
    variable: each iteration evaluates the ELBO already maximized over q
    (exactly for the joint q, by one coordinate-ascent sweep for the
    mean-field q), and q is set to its optimum after the last step.

    The trace entry for an iteration is the objective at the parameters
    before that iteration's step, followed by one final entry holding the
    ELBO of the returned parameters.
    """
    if variational_step not in ("adam", "optimal"):
        raise ParameterError(f"unknown variational_step {variational_step!r}")
    if variational_step == "optimal":
        fixed = tuple(fixed) + Q_BLOCKS
    params.requires_grad_(fixed)
    trainable = params.trainable()
    opt = torch.optim.Adam(trainable, lr=step_size, betas=(0.9, 0.999), eps=1e-8) if trainable else None
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(iterations, 1))
             if cosine_decay and opt is not None else None)
    trace = np.empty(iterations + 1)
    norms: dict[str, list[float]] = {}
    for it in range(iterations):
        if opt is not None:
            opt.zero_grad()
        try:
            value = _objective(params, problem, variational_step)
        except (NumericalError, torch.linalg.LinAlgError) as exc:
            raise TrainingError(f"iteration {it}: {exc}", trace[:it]) from exc
        if not bool(torch.isfinite(value)):
            raise TrainingError(f"non-finite ELBO at iteration {it}", trace[:it])
        trace[it] = float(value.detach())
        if opt is None:
            continue
        (-value).backward()
        for k, v in params.tensors.items():
            if v.grad is not None and not bool(torch.all(torch.isfinite(v.grad))):
                raise TrainingError(f"non-finite gradient in block {params.block(k)!r} "
                                    f"at iteration {it}", trace[:it + 1])
        for k, v in _grad_norms(params).items():
            norms.setdefault(k, []).append(v)
        opt.step()
        if sched is not None:
            sched.step()
    for v in params.tensors.values():
        v.requires_grad_(False)
        v.grad = None
    try:
        if variational_step == "optimal":
            set_optimal_q(params, problem)
        final = elbo(params, problem)
    except (NumericalError, torch.linalg.LinAlgError) as exc:
        raise TrainingError(f"after the last iteration: {exc}", trace[:iterations]) from exc
    if not math.isfinite(final):
        raise TrainingError("non-finite ELBO after the last iteration", trace[:iterations])
    trace[iterations] = final
    return trace, {k: np.asarray(v) for k, v in norms.items()}


def _unwhitened_state(params: Params, Lk: torch.Tensor, processes) -> VariationalState:
    P, M = params.P, params.M
    qm = params.tensors["q_mean"]
    Lq = params.q_chol()
    m = torch.einsum("pij,pj->pi", Lk, qm).numpy()
    if params.factorization == "mean_field":
        L = (Lk @ Lq).numpy()
        return VariationalState({p: m[i].copy() for i, p in enumerate(processes)},
                                {p: L[i].copy() for i, p in enumerate(processes)})
    joint = torch.zeros(P * M, P * M, dtype=DTYPE)
    chol = {}
    for i, p in enumerate(processes):
        rows = slice(i * M, (i + 1) * M)
        joint[rows] = Lk[i] @ Lq[rows]
        # factor the whitened block, which is well conditioned, then unwhiten
        block = Lq[rows] @ Lq[rows].T
        chol[p] = (Lk[i] @ torch.linalg.cholesky(0.5 * (block + block.T))).numpy()
    return VariationalState({p: m[i].copy() for i, p in enumerate(processes)}, chol, joint.numpy())


def fitted_model(params: Params, problem: Problem, spec: ModelSpec, inducing: InducingSet,
                 dataset_stats, poi_ids, trace, grad_norms) -> FittedModel:
    with torch.no_grad():
        pr = project(params, problem)
        c = constrained(params)
        state = _unwhitened_state(params, pr.Lk, problem.processes)
    charger = ChargerFunction(spec.charger_kind, spec.hidden if spec.charger_kind == "neural" else (),
                              [p.detach().numpy().copy() for p in params.charger_params()])
    target_stats, covariate_stats = dataset_stats
    return FittedModel(
        spec=spec,
        poi_types=problem.types,
        poi_locations={g: np.asarray(problem.data.poi_locations[g], dtype=float).copy()
                       for g in problem.types},
        poi_ids={g: list(poi_ids.get(g, [])) for g in problem.types},
        theta={g: float(c["theta"][j]) for j, g in enumerate(problem.types)},
        alpha_variance={g: float(c["alpha_var"][j]) for j, g in enumerate(problem.types)},
        matern_variance=float(c["matern_var"]),
        matern_lengthscale=float(c["matern_ls"]),
        noise_sd=float(c["noise"]),
        charger=charger,
        inducing=inducing,
        state=state,
        jitter=float(pr.jitter),
        target_stats=tuple(float(v) for v in target_stats),
        covariate_stats=tuple(tuple(float(a) for a in s) for s in covariate_stats),
        trace=np.asarray(trace, dtype=float),
        grad_norms=grad_norms,
    )


def build_problem(spec: ModelSpec, dataset: Dataset) -> tuple[Problem, InducingSet]:
    types = spec.poi_types if spec.poi_types is not None else dataset.poi_types
    data = SviData.from_dataset(dataset, types)
    M = spec.resolve_inducing(data.n)
    inducing, _ = init_state(data.locations, M, spec.seed)
    return Problem(data, inducing.locations, spec.kernel_family, spec.jitter), inducing


def train(spec: ModelSpec, dataset: Dataset) -> FittedModel:
    """Fit the POI model by maximizing the ELBO.

    ``dataset`` is the training split; its ``target_stats`` and
    ``covariate_stats`` define the standardization stored with the model.
    """
    if len(dataset.stations) < 2:
        raise ParameterError("training needs at least two stations")
    problem, inducing = build_problem(spec, dataset)
    params = init_params(problem, spec, np.random.default_rng([spec.seed, 1]))
    if spec.init_search and problem.types:
        grid_initialize(params, problem)
    if spec.restarts > 1:
        params = _best_start(params, problem, spec)
    trace, norms = optimize(params, problem, spec.iterations, spec.step_size, spec.cosine_decay,
                            variational_step=spec.variational_step)
    ids = {g: dataset.poi_ids(g) for g in problem.types}
    model = fitted_model(params, problem, spec, inducing,
                         (dataset.target_stats, dataset.covariate_stats), ids, trace, norms)
    return dataclasses.replace(model, reference=tuple(float(v) for v in dataset.reference))


def _best_start(params: Params, problem: Problem, spec: ModelSpec) -> Params:
    """Screen ``spec.restarts`` starting points with a short run; return the best start."""
    rng = np.random.default_rng([spec.seed, 2])
    starts = [params] + [random_start(params, problem, rng) for _ in range(spec.restarts - 1)]
    screen = min(spec.restart_iterations, spec.iterations)
    scores = []
    for start in starts:
        try:
            trace, _ = optimize(copy_params(start), problem, screen, spec.step_size,
                                variational_step=spec.variational_step)
            scores.append(trace[-1])
        except TrainingError:
            scores.append(-math.inf)
    return starts[int(np.argmax(scores))]


def _process_factor(model: FittedModel, process: str):
    cov = model.covariance(process)
    Z = model.inducing.locations
    Kuu = cov.matrix(Z, Z)
    Lk, _ = jittered_cholesky(0.5 * (Kuu + Kuu.T), model.jitter, name=f"Kuu[{process}]")
    return cov, Lk


def posterior_at(state: VariationalState, cov, Z, query, process: str,
                 jitter: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Marginals of ``q(h*) = int p(h* | u) q(u) du`` for one process.

    ``cov`` is the process covariance (anything with ``matrix`` and ``diag``).
    Variances are floored at 1e-10.
    """
    from scipy.linalg import solve_triangular

    Z = np.asarray(Z, dtype=float).reshape(-1, 2)
    Q = np.asarray(query, dtype=float).reshape(-1, 2)
    Kuu = cov.matrix(Z, Z)
    Kuu = 0.5 * (Kuu + Kuu.T)
    Lk, _ = jittered_cholesky(Kuu, jitter, name=f"Kuu[{process}]")
    Kuq = cov.matrix(Z, Q)
    a = solve_triangular(Lk, Kuq, lower=True)
    m_w = solve_triangular(Lk, state.mean[process], lower=True)
    L_w = solve_triangular(Lk, state.chol[process], lower=True)
    mean = a.T @ m_w
    b = L_w.T @ a
    var = cov.diag(Q) - np.sum(a * a, axis=0) + np.sum(b * b, axis=0)
    return mean, np.maximum(var, 1e-10)


def joint_posterior(model: FittedModel, query, chunk: int = 2048) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-process means and the variance of their sum under the joint q.

    The variance includes the posterior covariance between processes; it is
    floored at 1e-10.
    """
    from scipy.linalg import solve_triangular

    Q = np.asarray(query, dtype=float).reshape(-1, 2)
    Z = model.inducing.locations
    M = len(Z)
    joint = model.state.joint_chol
    factors = [_process_factor(model, p) for p in model.processes]
    Lw = np.vstack([solve_triangular(Lk, joint[i * M:(i + 1) * M], lower=True)
                    for i, (_, Lk) in enumerate(factors)])
    m_w = [solve_triangular(Lk, model.state.mean[p], lower=True)
           for p, (_, Lk) in zip(model.processes, factors)]
    means = {p: np.empty(len(Q)) for p in model.processes}
    var = np.empty(len(Q))
    for lo in range(0, len(Q), chunk):
        q = Q[lo:lo + chunk]
        stack = []
        v = np.zeros(len(q))
        for p, (cov, Lk), mw in zip(model.processes, factors, m_w):
            a = solve_triangular(Lk, cov.matrix(Z, q), lower=True)
            means[p][lo:lo + chunk] = a.T @ mw
            v += cov.diag(q) - np.sum(a * a, axis=0)
            stack.append(a)
        b = Lw.T @ np.vstack(stack)
        var[lo:lo + chunk] = v + np.sum(b * b, axis=0)
    return means, np.maximum(var, 1e-10)
