import math

import numpy as np
import pytest
import torch
from scipy.linalg import cho_solve

from conftest import tiny_dataset
from evpoi import svi
from evpoi.errors import NumericalError, ParameterError
from evpoi.geodata import pairwise_distances
from evpoi.gpmodel import HETEROGENEITY, ModelSpec, VariationalState
from evpoi.kernels import MaternKernel, jittered_cholesky, matern32, point_kernel


def setup(n=12, factorization="joint", seed=0, M=None, **spec_kw):
    ds = tiny_dataset(n=n, seed=seed)
    spec = ModelSpec(inducing_count=M or n, factorization=factorization, iterations=0, **spec_kw)
    problem, inducing = svi.build_problem(spec, ds)
    params = svi.init_params(problem, spec, np.random.default_rng(0))
    return ds, spec, problem, params


def exact_log_marginal(params, problem):
    """log N(y | g(x), sum_p K_p + s2 I) built straight from the kernels."""
    with torch.no_grad():
        c = svi.constrained(params)
        g = svi.charger_forward(params.charger_params(), problem.X).numpy()
    S = problem.data.locations
    K = matern32(pairwise_distances(S, S), float(c["matern_var"]), float(c["matern_ls"]))
    for j, t in enumerate(problem.types):
        phi = point_kernel(problem.kernel_family, pairwise_distances(S, problem.data.poi_locations[t]),
                           float(c["theta"][j]))
        K = K + float(c["alpha_var"][j]) * phi @ phi.T
    C = K + float(c["noise"]) ** 2 * np.eye(len(S))
    r = problem.y.numpy() - g
    L = np.linalg.cholesky(C)
    return -0.5 * (r @ cho_solve((L, True), r) + 2 * np.sum(np.log(np.diag(L))) + len(r) * math.log(2 * math.pi))


# --------------------------------------------------------------------------
# KL


def test_kl_zero_at_prior():
    K = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert svi.kl_term(np.zeros(2), np.linalg.cholesky(K), K) == pytest.approx(0.0, abs=1e-12)


def test_kl_worked_examples():
    assert svi.kl_term([1.0], [[1.0]], [[1.0]]) == pytest.approx(0.5)
    # 0.5 * (4 - 1 - log 4)
    assert svi.kl_term([0.0], [[2.0]], [[1.0]]) == pytest.approx(0.5 * (3.0 - math.log(4.0)))


def test_kl_nonnegative_random():
    rng = np.random.default_rng(5)
    for _ in range(50):
        A = rng.normal(size=(4, 4))
        K = A @ A.T + 0.1 * np.eye(4)
        L = np.tril(rng.normal(size=(4, 4)))
        np.fill_diagonal(L, np.abs(np.diag(L)) + 0.05)
        assert svi.kl_term(rng.normal(size=4), L, K) >= -1e-12


def test_kl_rejects_indefinite_prior():
    with pytest.raises(NumericalError):
        svi.kl_term([0.0], [[1.0]], [[-1.0]])


def test_whitened_kl_matches_unwhitened():
    _, _, problem, params = setup(factorization="mean_field")
    rng = np.random.default_rng(1)
    params.set_flat(params.flat() + 0.2 * rng.normal(size=params.flat().size))
    with torch.no_grad():
        terms = svi.elbo_terms(params, problem)
        pr = svi.project(params, problem)
        Kuu, _, _ = svi._covariances(problem, svi.constrained(params))
    Lk = pr.Lk.numpy()
    Lq = params.q_chol().detach().numpy()
    qm = params.tensors["q_mean"].numpy()
    for p in range(params.P):
        K = Lk[p] @ Lk[p].T
        want = svi.kl_term(Lk[p] @ qm[p], Lk[p] @ Lq[p], K)
        assert float(terms.kl[p]) == pytest.approx(want, rel=1e-8, abs=1e-8)


# --------------------------------------------------------------------------
# expected log-likelihood


def test_expected_loglik_perfect_fit():
    y = torch.zeros(3, dtype=torch.float64)
    s = torch.tensor(0.5, dtype=torch.float64)
    got = svi.gaussian_expected_loglik(y, y, torch.zeros(3, dtype=torch.float64), s)
    assert float(got) == pytest.approx(3 * (-0.5 * math.log(2 * math.pi * 0.25)))


def test_expected_loglik_monte_carlo():
    rng = np.random.default_rng(2)
    y, mu, v, s = rng.normal(size=4), rng.normal(size=4), rng.uniform(0.1, 1, 4), 0.7
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)
    exact = float(svi.gaussian_expected_loglik(t(y), t(mu), t(v), t(s)))
    f = mu + np.sqrt(v) * rng.normal(size=(200_000, 4))
    draws = np.sum(-0.5 * np.log(2 * math.pi * s * s) - 0.5 * (y - f) ** 2 / (s * s), axis=1)
    assert abs(draws.mean() - exact) < 3 * draws.std() / math.sqrt(len(draws))


# --------------------------------------------------------------------------
# the bound


def test_elbo_finite_at_init():
    for fac in ("joint", "mean_field"):
        _, _, problem, params = setup(factorization=fac)
        assert math.isfinite(svi.elbo(params, problem))


@pytest.mark.parametrize("factorization", ["joint", "mean_field"])
def test_elbo_lower_bounds_exact_marginal(factorization):
    _, _, problem, params = setup(factorization=factorization, n=15)
    rng = np.random.default_rng(3)
    base = params.flat()
    for _ in range(10):
        params.set_flat(base + 0.3 * rng.normal(size=base.size))
        assert svi.elbo(params, problem) <= exact_log_marginal(params, problem) + 1e-6


def test_optimal_q_attains_collapsed_bound():
    _, _, problem, params = setup(n=15)
    svi.set_optimal_q(params, problem)
    with torch.no_grad():
        collapsed = float(svi.collapsed_elbo(params, problem))
    assert svi.elbo(params, problem) == pytest.approx(collapsed, abs=1e-8)


def test_collapsed_bound_branches_agree():
    # P*M > N uses the N-space branch; with M = N it is the PM-space one only for P = 1
    _, _, problem, params = setup(n=12, M=12)
    with torch.no_grad():
        big = float(svi.collapsed_elbo(params, problem))
    svi.set_optimal_q(params, problem)
    assert svi.elbo(params, problem) == pytest.approx(big, abs=1e-8)
    _, _, problem, params = setup(n=12, M=3)
    with torch.no_grad():
        small = float(svi.collapsed_elbo(params, problem))
    svi.set_optimal_q(params, problem)
    assert svi.elbo(params, problem) == pytest.approx(small, abs=1e-8)


def test_mean_field_optimum_below_joint():
    _, _, pj, params_j = setup(n=15)
    _, _, pm, params_m = setup(n=15, factorization="mean_field")
    svi.set_optimal_q(params_j, pj)
    svi.set_optimal_q(params_m, pm)
    assert svi.elbo(params_m, pm) <= svi.elbo(params_j, pj) + 1e-9


def test_cavi_sweeps_monotone():
    _, _, problem, params = setup(factorization="mean_field")
    prev = svi.elbo(params, problem)
    for _ in range(5):
        svi.cavi_sweeps(params, problem, 1)
        cur = svi.elbo(params, problem)
        assert cur >= prev - 1e-9
        prev = cur


def test_cavi_rejects_joint():
    _, _, problem, params = setup()
    with pytest.raises(ParameterError):
        svi.cavi_sweeps(params, problem)


# --------------------------------------------------------------------------
# gradients


def test_gradients_match_finite_differences():
    _, _, problem, params = setup(n=10, factorization="mean_field")
    x0 = params.flat()
    _, grad = svi.gradients(params, problem)
    h = 1e-5
    fd = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        params.set_flat(x0 + e)
        up = svi.elbo(params, problem)
        params.set_flat(x0 - e)
        fd[i] = (up - svi.elbo(params, problem)) / (2 * h)
    params.set_flat(x0)
    assert np.linalg.norm(fd - grad) / np.linalg.norm(fd) < 1e-4


def test_gradients_leave_no_grad_state():
    _, _, problem, params = setup()
    svi.gradients(params, problem)
    assert all(not v.requires_grad and v.grad is None for v in params.tensors.values())


# --------------------------------------------------------------------------
# optimization


def test_optimize_trace_layout_and_progress():
    _, _, problem, params = setup(n=15)
    trace, norms = svi.optimize(params, problem, 60, step_size=0.05, variational_step="optimal")
    assert trace.shape == (61,)
    assert trace[-1] == pytest.approx(svi.elbo(params, problem))
    assert trace[59] > trace[0]
    assert np.all(norms["theta"] > 0)
    assert np.all(norms["q_mean"] == 0.0)


def test_optimize_adam_route_improves():
    _, _, problem, params = setup(n=15)
    trace, norms = svi.optimize(params, problem, 80, step_size=0.05)
    assert trace[-1] > trace[0]
    assert "q_mean" in norms


def test_fixed_blocks_do_not_move():
    _, _, problem, params = setup()
    before = params.tensors["theta"].clone()
    svi.optimize(params, problem, 10, step_size=0.1, fixed=("theta",), variational_step="optimal")
    assert torch.equal(before, params.tensors["theta"])


def test_optimize_rejects_unknown_step():
    _, _, problem, params = setup()
    with pytest.raises(ParameterError):
        svi.optimize(params, problem, 1, variational_step="newton")


def test_train_deterministic(tiny):
    spec = ModelSpec(iterations=30, step_size=0.05, seed=4)
    a, b = svi.train(spec, tiny), svi.train(spec, tiny)
    assert np.array_equal(a.trace, b.trace)
    assert a.theta == b.theta
    assert np.array_equal(a.state.joint_chol, b.state.joint_chol)


def test_random_start_is_a_grid_searched_copy():
    _, _, problem, params = setup()
    before = params.flat()
    a = svi.random_start(params, problem, np.random.default_rng(3))
    b = svi.random_start(params, problem, np.random.default_rng(3))
    assert np.array_equal(params.flat(), before)
    assert np.array_equal(a.flat(), b.flat())
    theta = svi.constrained(a)["theta"].numpy()
    assert np.allclose(theta, np.round(theta, 1), atol=1e-9) and np.all(theta <= 1.0 + 1e-9)


def test_best_start_keeps_the_highest_screened_bound(monkeypatch):
    _, spec, problem, params = setup()
    spec = ModelSpec(restarts=3, restart_iterations=10, step_size=0.05)
    screened = []
    real = svi.optimize

    def spy(p, *args, **kw):
        trace, norms = real(p, *args, **kw)
        screened.append(trace[-1])
        return trace, norms

    monkeypatch.setattr(svi, "optimize", spy)
    chosen = svi._best_start(params, problem, spec)
    assert len(screened) == 3
    trace, _ = real(svi.copy_params(chosen), problem, 10, 0.05, variational_step="optimal")
    assert trace[-1] == pytest.approx(max(screened))


def test_restart_spec_validation():
    with pytest.raises(ParameterError):
        ModelSpec(restarts=0)
    with pytest.raises(ParameterError):
        ModelSpec(restart_iterations=-1)


def test_train_mean_field_path(tiny):
    model = svi.train(ModelSpec(iterations=20, step_size=0.05, factorization="mean_field"), tiny)
    assert model.state.joint_chol is None
    assert np.all(np.isfinite(model.trace))


def test_train_needs_two_stations(tiny):
    with pytest.raises(ParameterError):
        svi.train(ModelSpec(iterations=1), tiny.subset([0]))


# --------------------------------------------------------------------------
# init_state and posterior_at


def test_init_state_properties():
    locs = np.random.default_rng(0).uniform(size=(20, 2))
    z, state = svi.init_state(locs, 7, seed=3, processes=("h0", "Education"))
    assert len(set(z.indices.tolist())) == 7
    assert np.array_equal(z.locations, locs[z.indices])
    assert np.array_equal(state.chol["Education"], 0.1 * np.eye(7))
    z2, _ = svi.init_state(locs, 7, seed=3)
    assert np.array_equal(z.indices, z2.indices)
    with pytest.raises(ParameterError):
        svi.init_state(locs, 21, seed=0)


def direct_conditioning(cov, Z, Q, m, S, jitter):
    Kzz = cov.matrix(Z, Z)
    Lk, _ = jittered_cholesky(Kzz, jitter)
    Kzz = Lk @ Lk.T
    Kzq = cov.matrix(Z, Q)
    W = np.linalg.solve(Kzz, Kzq)
    return W.T @ m, cov.diag(Q) - np.sum(Kzq * W, axis=0) + np.sum(W * (S @ W), axis=0)


def test_posterior_at_prior_state_returns_prior():
    cov = MaternKernel(1.3, 0.7)
    Z = np.random.default_rng(0).uniform(size=(6, 2))
    Q = np.random.default_rng(1).uniform(size=(9, 2))
    Lk = np.linalg.cholesky(cov.matrix(Z, Z) + 1e-10 * np.eye(6))
    mean, var = svi.posterior_at(VariationalState({"h0": np.zeros(6)}, {"h0": Lk}), cov, Z, Q, "h0", 1e-10)
    assert np.allclose(mean, 0.0)
    assert np.allclose(var, 1.3, atol=1e-6)


def test_posterior_at_matches_direct_conditioning():
    rng = np.random.default_rng(4)
    cov = MaternKernel(0.8, 0.5)
    Z, Q = rng.uniform(size=(10, 2)), rng.uniform(size=(25, 2))
    m = rng.normal(size=10)
    L = np.tril(rng.normal(size=(10, 10))) * 0.3
    np.fill_diagonal(L, np.abs(np.diag(L)) + 0.05)
    mean, var = svi.posterior_at(VariationalState({"h0": m}, {"h0": L}), cov, Z, Q, "h0", 1e-8)
    want_m, want_v = direct_conditioning(cov, Z, Q, m, L @ L.T, 1e-8)
    assert np.allclose(mean, want_m, atol=1e-6)
    assert np.allclose(var, want_v, atol=1e-6)


def test_posterior_variance_floor():
    cov = MaternKernel(1.0, 1.0)
    Z = np.array([[0.0, 0.0], [1.0, 0.0]])
    Lk = np.linalg.cholesky(cov.matrix(Z, Z))
    # a state with zero covariance queried at an inducing point has zero variance
    _, var = svi.posterior_at(VariationalState({"h0": np.zeros(2)}, {"h0": 1e-12 * Lk}), cov, Z, Z, "h0", 1e-12)
    assert np.all(var >= 1e-10)


def test_exact_gp_oracle_heterogeneity_only():
    """With only the Matérn process and M = N, q at its optimum is the exact posterior."""
    rng = np.random.default_rng(7)
    n = 10
    S = rng.uniform(0, 2, (n, 2))
    data = svi.SviData(S, rng.normal(size=(n, 4)), rng.normal(size=n), {})
    spec = ModelSpec(inducing_count=n, charger_kind="linear", jitter=1e-10, iterations=0)
    problem = svi.Problem(data, S, "relu", jitter=1e-10)
    params = svi.init_params(problem, spec, np.random.default_rng(0))
    svi.set_optimal_q(params, problem)
    assert svi.elbo(params, problem) == pytest.approx(exact_log_marginal(params, problem), abs=1e-3)
    with torch.no_grad():
        pr = svi.project(params, problem)
        state = svi._unwhitened_state(params, pr.Lk, problem.processes)
        c = svi.constrained(params)
        g = pr.charger.numpy()
    cov = MaternKernel(float(c["matern_var"]), float(c["matern_ls"]))
    Q = rng.uniform(0, 2, (15, 2))
    mean, var = svi.posterior_at(state, cov, S, Q, HETEROGENEITY, 1e-10)
    C = cov.matrix(S, S) + float(c["noise"]) ** 2 * np.eye(n)
    Kqs = cov.matrix(Q, S)
    want_m = Kqs @ np.linalg.solve(C, data.y - g)
    want_v = cov.diag(Q) - np.sum(Kqs * np.linalg.solve(C, Kqs.T).T, axis=1)
    assert np.allclose(mean, want_m, atol=1e-6)
    assert np.allclose(var, want_v, atol=1e-6)
