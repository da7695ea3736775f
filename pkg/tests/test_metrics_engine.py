import math

import numpy as np
import pytest

from core.conformal_engine import predict_interval
from core.exceptions import ConfigurationError, ContractViolation
from core.metrics_engine import MetricsEngine, mae_rmse


@pytest.fixture
def engine():
    return MetricsEngine("point", seed=7, config_hash="ab" * 32, config={"EXPERIMENT_SEED": 7})


def test_mae_rmse_example():
    mae, rmse = mae_rmse([1.0, 2.0], [1.0, 4.0])
    assert mae == 1.0
    assert rmse == pytest.approx(math.sqrt(2.0), rel=1e-15)


def test_mae_rmse_on_matrices():
    truth = np.array([[1.0, 2.0], [3.0, 4.0]])
    mae, rmse = mae_rmse(truth, truth + np.array([[1.0, -1.0], [1.0, -1.0]]))
    assert (mae, rmse) == (1.0, 1.0)


def test_mae_rmse_shape_mismatch():
    with pytest.raises(ConfigurationError):
        mae_rmse([1.0, 2.0], [1.0])


def test_mae_rmse_empty():
    with pytest.raises(ConfigurationError):
        mae_rmse([], [])


def test_record_point_sets_headline(engine):
    engine.record_point([0.0, 0.0, 0.0], [1.0, -1.0, 2.0])
    report = engine.build_report()
    assert report.mae == pytest.approx(4.0 / 3.0)
    assert report.rmse == pytest.approx(math.sqrt(2.0))
    assert report.partial is False


def test_record_interval_entry(engine):
    forecast = predict_interval(np.array([[1.0], [2.0]]), np.array([0.5]), 0.1)
    entry = engine.record_interval(np.array([[1.2], [3.0]]), forecast, k=5, scheme="ccp", label="x")
    assert entry == {"label": "x", "scheme": "ccp", "k": 5, "alpha": 0.1, "cr": 0.5, "wl": 1.0}
    assert engine.build_report().intervals == [entry]


def test_record_row_rounds_floats(engine):
    row = engine.record_row(ratio="2:1", mae_h1=1 / 3, rmse_h1=0.5)
    assert row["mae_h1"] == round(1 / 3, 12)
    assert row["ratio"] == "2:1"


def test_record_row_rejects_mae_above_rmse(engine):
    with pytest.raises(ContractViolation, match="exceeds"):
        engine.record_row(variant="full", mae=2.0, rmse=1.0)


def test_record_row_rejects_non_finite(engine):
    with pytest.raises(ContractViolation):
        engine.record_row(mae_h24=float("nan"), rmse_h24=1.0)


def test_sweep_report_headlines_first_row():
    engine = MetricsEngine("ratio-sweep", 1, "0" * 64, {})
    engine.record_row(ratio="1:1", mae_h1=1.0, rmse_h1=2.0, mae_h24=3.0, rmse_h24=4.0)
    engine.record_row(ratio="2:1", mae_h1=0.5, rmse_h1=1.0, mae_h24=1.5, rmse_h24=2.0)
    report = engine.build_report()
    assert (report.mae, report.rmse) == (1.0, 2.0)
    assert len(report.rows) == 2


def test_empty_report_has_null_headline(engine):
    report = engine.build_report(partial=True)
    assert report.mae is None and report.rmse is None
    assert report.to_document()["partial"] is True


def test_timings_accumulate_outside_the_document(engine):
    engine.record_timing("train", 1.5)
    engine.record_timing("train", 0.5)
    report = engine.build_report()
    assert report.timings == {"train": 2.0}
    assert "timings" not in report.to_document()


def test_get_report_text(engine):
    engine.record_point([0.0], [1.0])
    text = engine.get_report()
    assert text.splitlines()[0] == "point (seed 7, config ababababab)"
    assert "MAE  1" in text
