import logging
import math

import numpy as np

from core.conformal_engine import coverage_rate, width_length
from core.exceptions import ConfigurationError, ContractViolation
from db.models import IntervalForecast, MetricsReport

logger = logging.getLogger(__name__)

REPORT_DIGITS = 12


def mae_rmse(truth, pred) -> tuple[float, float]:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ConfigurationError(f"truth {truth.shape} and prediction {pred.shape} differ")
    if truth.size == 0:
        raise ConfigurationError("metrics need at least one value")
    err = truth - pred
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


def _round(value: float) -> float:
    return round(float(value), REPORT_DIGITS)


class MetricsEngine:
    """Collects point and interval metrics of one experiment and assembles its report."""

    def __init__(self, kind: str, seed: int, config_hash: str, config: dict):
        self.kind = kind
        self.seed = seed
        self.config_hash = config_hash
        self.config = config
        self.current = {"mae": None, "rmse": None}
        self.intervals = []
        self.rows = []
        self.timings = {}

    def record_point(self, truth, pred) -> tuple[float, float]:
        mae, rmse = mae_rmse(truth, pred)
        self.current = {"mae": _round(mae), "rmse": _round(rmse)}
        logger.info(f"Point metrics: MAE={mae:.6g} RMSE={rmse:.6g}")
        return mae, rmse

    def record_interval(self, truth, forecast: IntervalForecast, k: int, scheme: str, label: str = "") -> dict:
        entry = {
            "label": label,
            "scheme": scheme,
            "k": int(k),
            "alpha": float(forecast.alpha),
            "cr": _round(coverage_rate(truth, forecast.lower, forecast.upper)),
            "wl": _round(width_length(forecast.lower, forecast.upper)),
        }
        self.intervals.append(entry)
        logger.info(f"Interval {scheme} K={k} alpha={forecast.alpha}: CR={entry['cr']:.4f} WL={entry['wl']:.6g}")
        return entry

    def record_row(self, **row) -> dict:
        clean = {k: _round(v) if isinstance(v, float) else v for k, v in row.items()}
        for a, b in (("mae", "rmse"), ("mae_h1", "rmse_h1"), ("mae_h24", "rmse_h24")):
            if a in clean and b in clean:
                self._check_jensen(clean[a], clean[b])
        self.rows.append(clean)
        return clean

    def record_timing(self, phase: str, seconds: float):
        self.timings[phase] = self.timings.get(phase, 0.0) + seconds

    @staticmethod
    def _check_jensen(mae: float, rmse: float):
        if not (math.isfinite(mae) and math.isfinite(rmse)):
            raise ContractViolation(f"non-finite metrics MAE={mae} RMSE={rmse}")
        if mae > rmse + 10 ** -(REPORT_DIGITS - 2):
            raise ContractViolation(f"MAE {mae} exceeds RMSE {rmse}")

    def build_report(self, partial: bool = False) -> MetricsReport:
        mae, rmse = self.current["mae"], self.current["rmse"]
        if mae is None and self.rows:
            # Sweep reports headline the first row.
            first = self.rows[0]
            mae = first.get("mae", first.get("mae_h1"))
            rmse = first.get("rmse", first.get("rmse_h1"))
        if mae is not None:
            self._check_jensen(mae, rmse)
        return MetricsReport(
            kind=self.kind,
            seed=self.seed,
            config_hash=self.config_hash,
            mae=mae,
            rmse=rmse,
            intervals=list(self.intervals),
            rows=list(self.rows),
            config=self.config,
            timings=dict(self.timings),
            partial=partial,
        )

    def get_report(self) -> str:
        """Plain-text summary for the console."""
        lines = [f"{self.kind} (seed {self.seed}, config {self.config_hash[:10]})"]
        if self.current["mae"] is not None:
            lines.append(f"  MAE  {self.current['mae']:.6g}")
            lines.append(f"  RMSE {self.current['rmse']:.6g}")
        for entry in self.intervals:
            lines.append(
                f"  {entry['scheme']:<4} K={entry['k']:<3} alpha={entry['alpha']:<5} "
                f"CR={entry['cr']:.4f} WL={entry['wl']:.6g} {entry['label']}".rstrip()
            )
        for row in self.rows:
            lines.append("  " + "  ".join(f"{k}={v}" for k, v in row.items()))
        return "\n".join(lines)
