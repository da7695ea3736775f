import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from core.conformal_engine import (
    ccp_calibrate,
    ccp_scores,
    coverage_rate,
    empirical_quantile,
    icp_calibrate,
    icp_scores,
    minimum_calibration_size,
    nonconformity,
    predict_interval,
    quantile_index,
    width_length,
)
from core.data_pipeline import Normalizer
from core.exceptions import ConfigurationError, ContractViolation, InsufficientCalibrationError, SizingError
from core.forecasters import PersistenceForecaster, SeasonalNaiveForecaster, make_forecaster
from db.models import MultimodalWindow, ScorePool


def _window(y, last, day_before=None, index=0):
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    last = np.atleast_1d(np.asarray(last, dtype=np.float64))
    period = last if day_before is None else np.atleast_1d(np.asarray(day_before, dtype=np.float64))
    return MultimodalWindow(
        x_close=last[None, :], txt_close=np.zeros((1, 1)), x_period=period[None, :], txt_period=np.zeros((1, 1)),
        image=np.zeros((1, 1, 1)), y=y, horizon=1, target_index=index, anchor_index=index - 1,
    )


def _series_windows(values):
    values = np.asarray(values, dtype=np.float64)
    return [_window(values[i + 1], values[i], index=i + 1) for i in range(len(values) - 1)]


class MeanForecaster:
    """Predicts the training mean of y; exchangeable data gives exact conformal coverage."""
    name = "mean"

    def fit(self, windows):
        mean = np.mean([w.y for w in windows], axis=0)

        class _Fitted:
            def predict(self, batch):
                return np.tile(mean, (len(batch), 1))

        return _Fitted()


# --- Quantiles ---

def test_quantile_index_examples():
    assert quantile_index(19, 0.05) == 19
    assert quantile_index(99, 0.1) == 90
    assert quantile_index(9, 0.5) == 5


def test_minimum_calibration_size():
    assert minimum_calibration_size(0.05) == 19
    assert minimum_calibration_size(0.1) == 9
    assert minimum_calibration_size(0.25) == 3


def test_quantile_of_19_scores_at_5_percent_is_the_maximum():
    scores = np.arange(1.0, 20.0)[:, None]
    assert empirical_quantile(ScorePool(scores, 0.05))[0] == 19.0


def test_too_few_scores_raise_with_minimum():
    with pytest.raises(InsufficientCalibrationError) as err:
        empirical_quantile(ScorePool(np.ones((18, 1)), 0.05))
    assert err.value.minimum == 19


@given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=60),
       st.floats(0.01, 0.99))
def test_quantile_matches_sorted_oracle(scores, alpha):
    rank = math.ceil(round((1 - alpha) * (len(scores) + 1), 9))
    pool = ScorePool(np.asarray(scores)[:, None], alpha)
    if rank > len(scores):
        with pytest.raises(InsufficientCalibrationError):
            empirical_quantile(pool)
    else:
        assert empirical_quantile(pool)[0] == sorted(scores)[rank - 1]


def test_quantile_is_per_dimension():
    scores = np.column_stack([np.arange(19.0), 10 * np.arange(19.0)])
    eps = empirical_quantile(ScorePool(scores, 0.05))
    assert eps.tolist() == [18.0, 180.0]


def test_score_pool_rejects_bad_alpha():
    with pytest.raises(ContractViolation):
        ScorePool(np.ones((5, 1)), 1.0)


def test_score_pool_rejects_negative_scores():
    with pytest.raises(ContractViolation):
        ScorePool(-np.ones((5, 1)), 0.1)


# --- Intervals and metrics ---

def test_nonconformity_shape_mismatch():
    with pytest.raises(ConfigurationError):
        nonconformity(np.zeros(3), np.zeros(2))


def test_predict_interval_is_symmetric():
    forecast = predict_interval(np.array([[1.0, 2.0]]), np.array([0.5, 1.0]), 0.1)
    assert forecast.lower.tolist() == [[0.5, 1.0]]
    assert forecast.upper.tolist() == [[1.5, 3.0]]
    assert forecast.width.tolist() == [[1.0, 2.0]]


def test_predict_interval_rejects_negative_epsilon():
    with pytest.raises(ContractViolation):
        predict_interval(np.zeros((1, 2)), np.array([0.1, -0.1]), 0.1)


def test_coverage_and_width():
    truth = np.array([1.0, 2.0, 3.0, 4.0])
    lower = np.array([0.0, 2.0, 3.5, 3.0])
    upper = np.array([2.0, 2.0, 4.0, 5.0])
    assert coverage_rate(truth, lower, upper) == 0.75
    assert width_length(lower, upper) == pytest.approx(1.125)


# --- Baseline forecasters ---

def test_persistence_and_seasonal_rules():
    windows = [_window([5.0], [4.0], day_before=[3.0])]
    assert PersistenceForecaster().fit(windows).predict(windows).tolist() == [[4.0]]
    assert SeasonalNaiveForecaster().fit(windows).predict(windows).tolist() == [[3.0]]
    assert isinstance(make_forecaster("seasonal"), SeasonalNaiveForecaster)
    with pytest.raises(ValueError):
        make_forecaster("arima")


# --- Calibration ---

@pytest.fixture
def windows():
    rng = np.random.default_rng(12)
    return _series_windows(np.cumsum(rng.normal(size=41)))


def test_ccp_pools_all_but_the_first_fold(windows):
    calibration = ccp_scores(PersistenceForecaster(), windows, 4)
    assert calibration.scheme == "ccp"
    assert calibration.scores.shape == (40 - 10, 1)
    assert calibration.plan.k == 4


def test_icp_equals_ccp_with_two_folds(windows):
    forecaster = MeanForecaster()
    icp_model, icp_eps = icp_calibrate(forecaster, windows, 0.2)
    ccp_model, ccp_eps = ccp_calibrate(forecaster, windows, 2, 0.2)
    assert np.array_equal(icp_eps, ccp_eps)
    assert np.array_equal(icp_model.predict(windows), ccp_model.predict(windows))
    assert ccp_scores(forecaster, windows, 2).scheme == "icp"


def test_icp_split_bounds(windows):
    with pytest.raises(ConfigurationError):
        icp_scores(MeanForecaster(), windows, split=0)
    with pytest.raises(ConfigurationError):
        icp_scores(MeanForecaster(), windows, split=len(windows))


def test_scores_are_denormalized(windows):
    norm = Normalizer(np.array([10.0]), np.array([30.0]))
    plain = ccp_scores(PersistenceForecaster(), windows, 3)
    scaled = ccp_scores(PersistenceForecaster(), windows, 3, normalizer=norm)
    assert np.allclose(scaled.scores, 20.0 * plain.scores)


def test_intervals_on_new_windows(windows):
    calibration = ccp_scores(PersistenceForecaster(), windows, 5)
    test = _series_windows([0.0, 1.0, 3.0])
    forecast = calibration.intervals(test, 0.25)
    assert forecast.yhat.tolist() == [[0.0], [1.0]]
    assert np.all(forecast.upper - forecast.lower == 2 * forecast.epsilon)


def test_bonferroni_widens_intervals():
    rng = np.random.default_rng(0)
    windows = [_window(rng.normal(size=2), np.zeros(2), index=i) for i in range(200)]
    calibration = ccp_scores(MeanForecaster(), windows, 2)
    assert np.all(calibration.epsilon(0.2, bonferroni=True) >= calibration.epsilon(0.2))


def test_calibration_needs_k_at_most_n(windows):
    with pytest.raises(SizingError):
        ccp_scores(PersistenceForecaster(), windows[:3], 5)


@pytest.mark.slow
@pytest.mark.parametrize("k", [2, 5])
def test_marginal_coverage_on_exchangeable_data(k):
    """Empirical coverage within 0.03 of 1 - alpha in at least 9 of 10 seeds."""
    alphas = (0.05, 0.1, 0.15, 0.25)
    hits = {alpha: 0 for alpha in alphas}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=(6000, 1))
        samples = [_window(v, np.zeros(1), index=i) for i, v in enumerate(values[:4000])]
        test = [_window(v, np.zeros(1), index=4000 + i) for i, v in enumerate(values[4000:])]
        calibration = ccp_scores(MeanForecaster(), samples, k)
        truth = np.stack([w.y for w in test])
        for alpha in alphas:
            forecast = calibration.intervals(test, alpha)
            if coverage_rate(truth, forecast.lower, forecast.upper) >= 1 - alpha - 0.03:
                hits[alpha] += 1
    assert all(count >= 9 for count in hits.values()), hits


def test_quantile_matches_sorted_oracle_on_random_pools():
    rng = np.random.default_rng(77)
    pools = [(19, 1, 0.05)] + [
        (int(rng.integers(1, 201)), int(rng.integers(1, 11)), float(rng.uniform(0.001, 0.999)))
        for _ in range(999)
    ]
    for length, dims, alpha in pools:
        scores = rng.exponential(size=(length, dims))
        rank = math.ceil(round((1 - alpha) * (length + 1), 9))
        assert quantile_index(length, alpha) == rank
        pool = ScorePool(scores, alpha)
        if rank > length:
            with pytest.raises(InsufficientCalibrationError):
                empirical_quantile(pool)
            continue
        expected = [sorted(scores[:, d])[rank - 1] for d in range(dims)]
        assert empirical_quantile(pool).tolist() == expected


@given(arrays(np.float64, st.tuples(st.integers(19, 40), st.integers(2, 6)),
              elements=st.floats(0, 1e3, allow_nan=False)),
       st.floats(0.05, 0.95))
def test_multidimensional_quantile_is_columnwise(scores, alpha):
    eps = empirical_quantile(ScorePool(scores, alpha))
    for d in range(scores.shape[1]):
        assert eps[d] == empirical_quantile(ScorePool(scores[:, [d]], alpha))[0]
    assert np.all(eps <= scores.max(axis=0))


@pytest.mark.parametrize("scheme", ["icp", "ccp"])
def test_epsilon_shrinks_as_alpha_grows(windows, scheme):
    if scheme == "icp":
        calibration = icp_scores(PersistenceForecaster(), windows)
    else:
        calibration = ccp_scores(PersistenceForecaster(), windows, 4)
    previous = None
    for alpha in np.linspace(0.05, 0.95, 19):
        eps = calibration.epsilon(float(alpha))
        if previous is not None:
            assert np.all(eps <= previous)
        previous = eps
    assert calibration.epsilon(0.05)[0] > calibration.epsilon(0.95)[0]
