import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from docscore.errors import ConfigError, CorruptionError, DivergenceError, VersionError
from docscore.regression import (
    RegressionModel,
    RegressionParams,
    Standardizer,
    evaluate_r_squared,
    fit_regressor,
    load_regressor,
    objective_and_grad,
    persist_regressor,
    predict_score,
    regressor_from_bytes,
    standardize,
    train_test_split,
    unit_rows,
)


def brute_r2(y_true, y_pred):
    """Coefficient of determination written out term by term."""
    n = len(y_true)
    mean = 0.0
    for v in y_true:
        mean += v
    mean /= n
    ss_tot = 0.0
    ss_res = 0.0
    for t, p in zip(y_true, y_pred):
        ss_tot += (t - mean) * (t - mean)
        ss_res += (t - p) * (t - p)
    return 1.0 - ss_res / ss_tot


@pytest.fixture
def linear_data():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(400, 6)) * rng.uniform(0.5, 3, 6) + rng.normal(size=6)
    true_beta = rng.normal(size=6)
    y = x @ true_beta + 2.5
    return x, y


# ---- standardize ------------------------------------------------------------


def test_standardize_two_values():
    st_, z = standardize([[1.0], [3.0]])
    assert st_.mean[0] == 2.0 and st_.std[0] == 1.0
    np.testing.assert_array_equal(z[:, 0], [-1.0, 1.0])


def test_standardize_constant_column_flagged():
    st_, z = standardize([[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]])
    np.testing.assert_array_equal(z[:, 0], [0.0, 0.0, 0.0])
    assert st_.zero_variance.tolist() == [True, False]
    assert st_.std[0] == 1.0


def test_standardizer_pure():
    st_, _ = standardize(np.arange(12.0).reshape(4, 3) ** 2)
    raw = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(st_.transform(raw), st_.transform(raw))


def test_standardize_needs_two_rows():
    with pytest.raises(ConfigError):
        standardize([[1.0, 2.0]])


@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=2, max_size=30))
def test_standardized_columns_have_zero_mean_unit_variance(rows):
    st_, z = standardize(rows)
    for j in range(3):
        if st_.zero_variance[j]:
            assert np.allclose(z[:, j], 0.0)
        elif st_.std[j] > 1e-6:
            assert abs(z[:, j].mean()) < 1e-6
            assert abs(z[:, j].std() - 1.0) < 1e-6


# ---- fitting ----------------------------------------------------------------


def test_exact_linear_recovery(linear_data):
    x, y = linear_data
    model = fit_regressor(x, y, "squared", RegressionParams(l2_lambda=0.0, epochs=50))
    assert evaluate_r_squared(y, model.predict(x)).r_squared > 0.999


def test_svr_fits_linear_data(linear_data):
    x, y = linear_data
    model = fit_regressor(x, y, "svr", RegressionParams(l2_lambda=0.0, epochs=50))
    assert model.loss_kind == "epsilon_insensitive" and model.name == "svr"
    assert evaluate_r_squared(y, model.predict(x)).r_squared > 0.99


@pytest.mark.parametrize("kind", ["squared", "epsilon_insensitive"])
def test_constant_target(kind):
    x = np.random.default_rng(0).normal(size=(50, 4))
    model = fit_regressor(x, np.full(50, 3.25), kind)
    assert np.all(np.abs(model.beta) < 1e-3)
    assert abs(model.bias - 3.25) < 1e-3


@pytest.mark.parametrize("kind", ["linear", "svr"])
def test_fit_deterministic(linear_data, kind):
    x, y = linear_data
    a = fit_regressor(x, y, kind, RegressionParams(seed=9, epochs=5))
    b = fit_regressor(x, y, kind, RegressionParams(seed=9, epochs=5))
    assert a.beta.tobytes() == b.beta.tobytes() and a.bias == b.bias
    c = fit_regressor(x, y, kind, RegressionParams(seed=10, epochs=5))
    assert c.beta.tobytes() != a.beta.tobytes()


def test_unknown_loss_kind():
    with pytest.raises(ConfigError):
        fit_regressor(np.zeros((3, 1)), np.zeros(3), "huber")


def test_divergence_is_reported():
    x = np.random.default_rng(0).normal(size=(20, 2))
    y = x @ np.array([1e200, -1e200])
    with pytest.raises(DivergenceError):
        fit_regressor(x, y, "squared", RegressionParams(lr=1e6, epochs=5))


def test_l2_monotone_shrinkage(linear_data):
    x, y = linear_data
    norms = [
        np.linalg.norm(fit_regressor(x, y, "squared", RegressionParams(l2_lambda=lam, epochs=20)).beta)
        for lam in (0.0, 1e-3, 1e-2, 1e-1, 1.0)
    ]
    assert all(a >= b for a, b in zip(norms, norms[1:])), norms


def test_unit_norm_makes_fit_scale_invariant(linear_data):
    x, y = linear_data
    params = RegressionParams(unit_norm=True, epochs=5)
    m = fit_regressor(x, y, "squared", params)
    np.testing.assert_allclose(m.predict(x * 7.0), m.predict(x), rtol=1e-12)
    assert not unit_rows(np.zeros((1, 3))).any()


# ---- prediction -------------------------------------------------------------


def _fixed_model(beta, bias, dim):
    st_ = Standardizer(np.zeros(dim), np.ones(dim), np.zeros(dim, dtype=bool))
    return RegressionModel(np.asarray(beta, dtype=float), bias, "squared", st_)


def test_zero_weights_predict_bias():
    m = _fixed_model([0.0, 0.0], 3.7, 2)
    assert predict_score(m, [100.0, -4.0]) == 3.7


def test_clip():
    m = _fixed_model([1.0], 0.0, 1)
    assert predict_score(m, [6.2]) == 6.2
    assert predict_score(m, [6.2], clip=(1.0, 5.0)) == 5.0
    assert predict_score(m, [-3.0], clip=(1.0, 5.0)) == 1.0


def test_prediction_matches_manual_dot_product(linear_data):
    x, y = linear_data
    m = fit_regressor(x, y, "svr", RegressionParams(epochs=3))
    v = x[17]
    manual = m.bias
    for j in range(len(v)):
        manual += m.beta[j] * (v[j] - m.standardizer.mean[j]) / m.standardizer.std[j]
    assert abs(predict_score(m, v) - manual) < 1e-9


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        predict_score(_fixed_model([1.0, 2.0], 0.0, 2), [1.0, 2.0, 3.0])


# ---- R^2 --------------------------------------------------------------------


def test_r2_perfect_and_baseline():
    y = [1.0, 4.0, 2.0, 5.0]
    assert evaluate_r_squared(y, y).r_squared == 1.0
    assert evaluate_r_squared(y, [3.0] * 4).r_squared == 0.0


def test_r2_worked_example():
    rep = evaluate_r_squared([1, 2, 3], [1, 2, 2])
    assert (rep.ss_tot, rep.ss_res, rep.r_squared, rep.n_test) == (2.0, 1.0, 0.5, 3)


def test_r2_can_be_negative():
    assert evaluate_r_squared([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).r_squared == pytest.approx(-3.0)


def test_r2_constant_truth_is_degenerate():
    rep = evaluate_r_squared([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert rep.r_squared == 0.0 and rep.degenerate


def test_r2_rejects_bad_lengths():
    with pytest.raises(ValueError):
        evaluate_r_squared([1.0], [1.0])
    with pytest.raises(ValueError):
        evaluate_r_squared([1.0, 2.0], [1.0, 2.0, 3.0])


def test_r2_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(77)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        yt = rng.normal(3, 1.5, n)
        yp = yt + rng.normal(0, rng.uniform(0.01, 3), n)
        assert abs(evaluate_r_squared(yt, yp).r_squared - brute_r2(list(yt), list(yp))) < 1e-9


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=40))
@settings(max_examples=200)
def test_r2_never_exceeds_one(pairs):
    yt, yp = zip(*pairs)
    assert evaluate_r_squared(yt, yp).r_squared <= 1.0


def test_report_dict_shape():
    d = evaluate_r_squared([1, 2, 3], [1, 2, 2], "linear", 4).as_dict()
    assert d == {"model": "linear", "r2": 0.5, "ss_tot": 2.0, "ss_res": 1.0, "n_test": 3, "split_seed": 4, "degenerate": False}


def test_split_deterministic_and_disjoint():
    a_tr, a_te = train_test_split(100, 5, 0.2)
    b_tr, b_te = train_test_split(100, 5, 0.2)
    assert np.array_equal(a_tr, b_tr) and np.array_equal(a_te, b_te)
    assert len(a_te) == 20 and not set(a_tr) & set(a_te)
    assert sorted(set(a_tr) | set(a_te)) == list(range(100))


# ---- gradients --------------------------------------------------------------


def _numeric_grad(beta, bias, z, y, kind, eps, lam, h=1e-6):
    f = lambda b, c: objective_and_grad(b, c, z, y, kind, eps, lam)[0]  # noqa: E731
    g = np.empty_like(beta)
    for j in range(len(beta)):
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (f(beta + e, bias) - f(beta - e, bias)) / (2 * h)
    gb = (f(beta, bias + h) - f(beta, bias - h)) / (2 * h)
    return g, gb


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("kind", ["squared", "epsilon_insensitive"])
@pytest.mark.parametrize("trial", range(25))
def test_loss_gradients(kind, trial):
    rng = np.random.default_rng(500 + trial)
    eps = 0.1
    while True:
        n, d = int(rng.integers(5, 40)), int(rng.integers(1, 10))
        z = rng.normal(size=(n, d))
        y = rng.normal(3, 1, n)
        beta = rng.normal(0, 0.5, d)
        bias = float(rng.normal(3, 0.5))
        lam = float(rng.uniform(0, 0.1))
        r = z @ beta + bias - y
        # for the SVR loss, redraw until every residual is clear of the kinks at |r| = eps
        if kind == "squared" or not np.any(np.abs(np.abs(r) - eps) < 1e-3):
            break
    obj, g, gb = objective_and_grad(beta, bias, z, y, kind, eps, lam)
    ng, ngb = _numeric_grad(beta, bias, z, y, kind, eps, lam)
    assert _rel(np.append(g, gb), np.append(ng, ngb)) < 1e-4


def test_objective_value_by_hand():
    z = np.array([[1.0], [2.0]])
    y = np.array([1.0, 1.0])
    obj, _, _ = objective_and_grad(np.array([1.0]), 0.0, z, y, "squared", l2_lambda=0.5)
    # residuals 0, 1 -> mean(r^2/2) = 0.25; penalty 0.25
    assert obj == pytest.approx(0.5)
    obj, _, _ = objective_and_grad(np.array([1.0]), 0.0, z, y, "epsilon_insensitive", epsilon=0.25)
    assert obj == pytest.approx(0.375)


# ---- persistence ------------------------------------------------------------


@pytest.mark.parametrize("kind", ["linear", "svr"])
def test_persist_round_trip(tmp_path, linear_data, kind):
    x, y = linear_data
    m = fit_regressor(x, y, kind, RegressionParams(epochs=3, unit_norm=kind == "svr"))
    path = persist_regressor(m, tmp_path / "m.rrml")
    back = load_regressor(path)
    assert back == m
    assert path.read_bytes()[:4] == b"RRML"
    np.testing.assert_array_equal(back.predict(x), m.predict(x))


def test_regressor_integrity_errors(tmp_path, linear_data):
    x, y = linear_data
    data = (persist_regressor(fit_regressor(x, y), tmp_path / "m.rrml")).read_bytes()
    with pytest.raises(VersionError):
        regressor_from_bytes(b"ABCD" + data[4:])
    with pytest.raises(CorruptionError):
        regressor_from_bytes(data[:-20])
