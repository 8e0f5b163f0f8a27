import numpy as np
import pytest

from evpoi import baselines as bl
from evpoi import svi
from evpoi.baselines.common import Scaler, kfold, ols_coefficients, with_intercept
from evpoi.baselines.kriging import ResidualGP
from evpoi.errors import DegenerateDataError, ParameterError


def ols_predict(X, y, Xq):
    return with_intercept(Xq) @ ols_coefficients(X, y)


# --------------------------------------------------------------------------
# features


def test_distance_feature_examples():
    F, flagged = bl.distance_features([[0.0, 0.0], [3.0, 4.0]], {"R": [[1.0, 0.0], [0.0, 2.0]]})
    assert F[0, 0] == 1.0 and flagged == []
    F, _ = bl.distance_features([[1.0, 0.0]], {"R": [[1.0, 0.0]]})
    assert F[0, 0] == 0.0


def test_distance_sentinel_and_degenerate():
    F, flagged = bl.distance_features([[0.0, 0.0]], {"R": [[1.0, 0.0]], "S": np.zeros((0, 2))})
    assert F[0, 1] == bl.SENTINEL_KM and flagged == ["S"]
    with pytest.raises(DegenerateDataError):
        bl.distance_features([[0.0, 0.0]], {"R": np.zeros((0, 2))})


def test_distance_monotone_when_adding_pois():
    rng = np.random.default_rng(0)
    S, P = rng.uniform(0, 3, (20, 2)), rng.uniform(0, 3, (8, 2))
    a, _ = bl.distance_features(S, {"R": P})
    b, _ = bl.distance_features(S, {"R": np.vstack([P, rng.uniform(0, 3, (5, 2))])})
    assert np.all(b <= a)


def test_density_examples():
    S = [[0.0, 0.0]]
    stores = {"Store": [[0.1, 0.0], [0.0, 0.15], [-0.2, 0.0], [1.0, 1.0]]}
    assert bl.density_features(S, stores, {"Store": 0.25})[0, 0] == 3
    assert bl.density_features(S, stores, {"Store": 0.05})[0, 0] == 0
    assert bl.density_features(S, stores, {"Store": 0.2})[0, 0] == 2  # strict inequality
    with pytest.raises(ParameterError):
        bl.density_features(S, stores, {"Store": 0.0})


def test_density_monotone_in_radius():
    rng = np.random.default_rng(1)
    S, P = rng.uniform(0, 3, (30, 2)), {"R": rng.uniform(0, 3, (40, 2))}
    counts = [bl.density_features(S, P, r) for r in (0.1, 0.3, 0.5, 1.0)]
    assert all(np.all(b >= a) for a, b in zip(counts, counts[1:]))


def test_features_invariant_to_poi_order():
    rng = np.random.default_rng(2)
    S, P = rng.uniform(0, 3, (15, 2)), rng.uniform(0, 3, (12, 2))
    cfg = bl.FeatureConfig("both", {"R": 0.4})
    a = bl.design(np.zeros((15, 1)), S, {"R": P}, cfg)
    b = bl.design(np.zeros((15, 1)), S, {"R": P[::-1]}, cfg)
    assert np.array_equal(a, b)


def test_design_columns_per_mode():
    S = np.zeros((3, 2))
    pois = {"A": [[1.0, 0.0]], "B": [[0.0, 1.0]]}
    widths = {m: bl.design(np.ones((3, 4)), S, pois, bl.FeatureConfig(m)).shape[1] for m in bl.FEATURE_MODES}
    assert widths == {"none": 4, "distance": 6, "density": 6, "both": 8}
    assert bl.feature_names(["x"], ["A"], "both") == ["x", "dist_A", "count_A"]
    with pytest.raises(ParameterError):
        bl.FeatureConfig("all")


# --------------------------------------------------------------------------
# helpers


def test_scaler_constant_column():
    s = Scaler.fit(np.array([[1.0, 5.0], [3.0, 5.0]]))
    assert np.allclose(s.transform([[2.0, 5.0]]), [[0.0, 0.0]])


def test_kfold_partition():
    folds = kfold(23, 5, 0)
    assert np.array_equal(np.sort(np.concatenate(folds)), np.arange(23))
    with pytest.raises(DegenerateDataError):
        kfold(5, 5, 0)


# --------------------------------------------------------------------------
# tune_dmax


def planted_radius_data(seed=0, n=250, radius=0.3):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0, 4, (n, 2))
    P = rng.uniform(0, 4, (160, 2))
    counts = bl.density_features(S, {"Education": P}, radius)[:, 0]
    X = rng.normal(size=(n, 2))
    y = X @ [0.5, -0.3] + 1.0 * counts + 0.1 * rng.normal(size=n)
    return svi.SviData(S, X, y, {"Education": P})


def test_tune_dmax_finds_planted_radius():
    data = planted_radius_data()
    chosen = bl.tune_dmax(data, bl.DEFAULT_RADIUS_GRID, seed=0)
    assert abs(chosen["Education"] - 0.3) <= 0.1 + 1e-12


def test_tune_dmax_single_candidate_and_determinism():
    data = planted_radius_data(seed=1, n=60)
    assert bl.tune_dmax(data, [0.7]) == {"Education": 0.7}
    assert bl.tune_dmax(data, seed=3) == bl.tune_dmax(data, seed=3)
    with pytest.raises(ParameterError):
        bl.tune_dmax(data, [])


def test_tune_dmax_with_baseline_kind():
    data = planted_radius_data(seed=2, n=80)
    out = bl.tune_dmax(data, [0.2, 0.3, 0.6], kind="gwr", bandwidth=float("inf"))
    assert out["Education"] in (0.2, 0.3, 0.6)


# --------------------------------------------------------------------------
# GWR


def test_gwr_infinite_bandwidth_is_ols():
    rng = np.random.default_rng(3)
    X, S, y = rng.normal(size=(40, 3)), rng.uniform(0, 2, (40, 2)), rng.normal(size=40)
    Xq, Sq = rng.normal(size=(10, 3)), rng.uniform(0, 2, (10, 2))
    m, v = bl.predict_gwr(bl.fit_gwr(X, S, y, bandwidth=float("inf")), Xq, Sq)
    assert np.max(np.abs(m - ols_predict(X, y, Xq))) < 1e-6
    assert np.all(v > 0)


def test_gwr_constant_target():
    rng = np.random.default_rng(4)
    X, S = rng.normal(size=(30, 2)), rng.uniform(0, 2, (30, 2))
    m, _ = bl.predict_gwr(bl.fit_gwr(X, S, np.full(30, 2.5)), rng.normal(size=(5, 2)), rng.uniform(0, 2, (5, 2)))
    assert np.allclose(m, 2.5, atol=1e-6)


def test_gwr_beats_ols_on_coefficient_drift():
    rng = np.random.default_rng(5)
    n = 300
    S = rng.uniform(0, 6, (n, 2))
    x = rng.normal(size=(n, 1))
    y = np.sin(S[:, 0]) * 2.0 * x[:, 0] + S[:, 1] * 0.5 + 0.1 * rng.normal(size=n)
    tr, te = np.arange(240), np.arange(240, n)
    model = bl.fit_gwr(x[tr], S[tr], y[tr])
    assert np.isfinite(model.bandwidth)
    m, _ = bl.predict_gwr(model, x[te], S[te])
    ols = ols_predict(x[tr], y[tr], x[te])
    assert np.sqrt(np.mean((m - y[te]) ** 2)) < np.sqrt(np.mean((ols - y[te]) ** 2))


def test_gwr_rejects_bad_bandwidth():
    with pytest.raises(ParameterError):
        bl.fit_gwr(np.zeros((5, 1)), np.zeros((5, 2)), np.zeros(5), bandwidth=0.0)


# --------------------------------------------------------------------------
# kriging


def test_kriging_zero_residuals_equals_ols():
    rng = np.random.default_rng(6)
    X, S = rng.normal(size=(30, 2)), rng.uniform(0, 2, (30, 2))
    y = X @ [1.0, -2.0] + 0.5
    model = bl.fit_linear_kriging(X, S, y)
    Xq, Sq = rng.normal(size=(8, 2)), rng.uniform(0, 2, (8, 2))
    m, v = bl.predict_linear_kriging(model, Xq, Sq)
    assert np.allclose(m, Xq @ [1.0, -2.0] + 0.5, atol=1e-8)
    assert np.all(v > 0)


def test_kriging_interpolates_in_noise_free_limit():
    rng = np.random.default_rng(7)
    S = rng.uniform(0, 2, (30, 2))
    r = np.sin(2 * S[:, 0]) + np.cos(3 * S[:, 1])
    gp = ResidualGP.fit(S, r, noise_variance=1e-10)
    m, v = gp.predict(S)
    assert np.max(np.abs(m - r)) < 1e-4
    assert np.all(v < 1e-3)


def test_kriging_white_noise_goes_to_nugget():
    rng = np.random.default_rng(8)
    n = 120
    X, S = rng.normal(size=(n, 2)), rng.uniform(0, 4, (n, 2))
    sd = 0.5
    y = X @ [1.0, 0.5] + sd * rng.normal(size=n)
    model = bl.fit_linear_kriging(X, S, y)
    assert model.gp.noise_variance > model.gp.variance
    Xq, Sq = rng.normal(size=(40, 2)), rng.uniform(0, 4, (40, 2))
    m, _ = bl.predict_linear_kriging(model, Xq, Sq)
    assert np.max(np.abs(m - ols_predict(X, y, Xq))) < sd


# --------------------------------------------------------------------------
# forest


def test_single_stump_matches_exhaustive_search():
    from test_backend import brute_force_split

    rng = np.random.default_rng(9)
    for trial in range(5):
        X = np.round(rng.normal(size=(50, 4)), 2)
        y = rng.normal(size=50) + (X[:, trial % 4] > 0)
        forest = bl.fit_forest(X, y, n_trees=1, max_depth=1, min_leaf=1, max_features=None, bootstrap=False)
        f, t, _ = brute_force_split(X, y, 1)
        left = X[:, f] <= t
        want = np.where(left, y[left].mean(), y[~left].mean())
        assert np.allclose(forest.predict(X), want, atol=1e-12)


def test_forest_constant_target():
    rng = np.random.default_rng(10)
    X, S = rng.normal(size=(40, 3)), rng.uniform(0, 2, (40, 2))
    model = bl.fit_rf_kriging(X, S, np.full(40, 0.3), n_trees=10)
    m, _ = bl.predict_rf_kriging(model, rng.normal(size=(5, 3)), rng.uniform(0, 2, (5, 2)))
    assert np.allclose(model.forest.predict(X), 0.3)
    assert np.allclose(model.gp.residuals, 0.0) and np.allclose(m, 0.3)


def test_forest_deterministic():
    rng = np.random.default_rng(11)
    X, y = rng.normal(size=(60, 5)), rng.normal(size=60)
    a = bl.fit_forest(X, y, n_trees=15, seed=4)
    b = bl.fit_forest(X, y, n_trees=15, seed=4)
    assert np.array_equal(a.predict(X), b.predict(X))
    assert np.array_equal(a.oob_prediction, b.oob_prediction)
    assert not np.array_equal(a.predict(X), bl.fit_forest(X, y, n_trees=15, seed=5).predict(X))


# --------------------------------------------------------------------------
# neural network


def test_nn_zero_targets():
    rng = np.random.default_rng(12)
    X, S = rng.normal(size=(50, 3)), rng.uniform(0, 2, (50, 2))
    model = bl.fit_nn_baseline(X, S, np.zeros(50), max_epochs=500)
    m, v = bl.predict_nn_baseline(model, X, S)
    assert np.max(np.abs(m)) < 1e-2 and np.all(v > 0)


def test_nn_linear_teacher():
    rng = np.random.default_rng(13)
    X, S = rng.normal(size=(200, 3)), rng.uniform(0, 2, (200, 2))
    y = X @ [1.0, -0.5, 0.25]
    model = bl.fit_nn_baseline(X, S, y, include_coords=False, max_epochs=2000, patience=200)
    m, _ = bl.predict_nn_baseline(model, X, S)
    assert np.sqrt(np.mean((m - y) ** 2)) < 0.1 * np.std(y)


def test_nn_deterministic():
    rng = np.random.default_rng(14)
    X, S, y = rng.normal(size=(40, 2)), rng.uniform(0, 2, (40, 2)), rng.normal(size=40)
    a = bl.predict_nn_baseline(bl.fit_nn_baseline(X, S, y, seed=3, max_epochs=100), X, S)[0]
    b = bl.predict_nn_baseline(bl.fit_nn_baseline(X, S, y, seed=3, max_epochs=100), X, S)[0]
    assert np.array_equal(a, b)


# --------------------------------------------------------------------------
# uniform interface


@pytest.mark.parametrize("kind", bl.BASELINE_KINDS)
@pytest.mark.parametrize("mode", bl.FEATURE_MODES)
def test_every_baseline_every_mode(kind, mode, small_synth):
    ds, _ = small_synth
    data = svi.SviData.from_dataset(ds)
    opts = {"nn": {"max_epochs": 50}, "rf_kriging": {"n_trees": 5, "iterations": 20},
            "linear_kriging": {"iterations": 20}, "gwr": {"bandwidth": 1.0}}[kind]
    model = bl.fit_baseline(kind, data, bl.FeatureConfig(mode), seed=0, **opts)
    m, v = model.predict(data)
    assert m.shape == v.shape == (len(data.y),)
    assert np.all(np.isfinite(m)) and np.all(v > 0)


def test_unknown_baseline(small_synth):
    with pytest.raises(ParameterError):
        bl.fit_baseline("svm", svi.SviData.from_dataset(small_synth[0]))
