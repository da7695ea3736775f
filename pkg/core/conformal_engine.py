"""
Inductive and cross-conformal calibration for multi-output forecasts.

Scores are per-dimension absolute residuals in original (denormalized) units.
Cross-conformal calibration follows the growing-window fold plan: for every
pair (folds 1..k, fold k+1) a fresh fit on the training folds scores the next
fold; scores from all pairs are pooled before one quantile extraction. The
returned model is always refitted on every training sample.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.data_pipeline import Normalizer, growing_window_folds
from core.exceptions import ConfigurationError, ContractViolation, InsufficientCalibrationError
from core.forecasters import Fitted, Forecaster
from db.models import FoldPlan, IntervalForecast, MultimodalWindow, ScorePool

logger = logging.getLogger(__name__)


def nonconformity(y, y_hat) -> np.ndarray:
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ConfigurationError(f"truth {y.shape} and prediction {y_hat.shape} differ")
    return np.abs(y - y_hat)


def _ceil(x: float) -> int:
    # Absorbs representation error such as 0.95 * 20 = 18.999999999999996.
    return math.ceil(round(x, 9))


def quantile_index(n_scores: int, alpha: float) -> int:
    """1-based rank l = ceil((1 - alpha)(L + 1))."""
    return _ceil((1.0 - alpha) * (n_scores + 1))


def minimum_calibration_size(alpha: float) -> int:
    return _ceil((1.0 - alpha) / alpha)


def empirical_quantile(pool: ScorePool) -> np.ndarray:
    """Per dimension, the l-th smallest pooled score."""
    rank = quantile_index(pool.size, pool.alpha)
    if rank > pool.size:
        raise InsufficientCalibrationError(pool.size, pool.alpha, minimum_calibration_size(pool.alpha))
    return np.sort(pool.scores, axis=0)[rank - 1].copy()


def predict_interval(y_hat, epsilon, alpha: float) -> IntervalForecast:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if np.any(epsilon < 0):
        raise ContractViolation("interval half-width must be nonnegative")
    epsilon = np.broadcast_to(epsilon, y_hat.shape).copy()
    return IntervalForecast(yhat=y_hat, epsilon=epsilon, lower=y_hat - epsilon, upper=y_hat + epsilon, alpha=alpha)


def coverage_rate(truth, lower, upper) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    if truth.size == 0:
        raise ConfigurationError("coverage needs at least one test point")
    inside = (np.asarray(lower) <= truth) & (truth <= np.asarray(upper))
    return float(np.mean(inside))


def width_length(lower, upper) -> float:
    return float(np.mean(np.abs(np.asarray(upper, dtype=np.float64) - np.asarray(lower, dtype=np.float64))))


# --- Calibration ---

@dataclass
class Calibration:
    fitted: Fitted
    scores: np.ndarray          # pooled, L x D
    plan: FoldPlan
    normalizer: Optional[Normalizer]
    scheme: str

    def epsilon(self, alpha: float, bonferroni: bool = False) -> np.ndarray:
        level = alpha / self.scores.shape[1] if bonferroni else alpha
        return empirical_quantile(ScorePool(self.scores, level))

    def denormalize(self, values) -> np.ndarray:
        return self.normalizer.invert(values) if self.normalizer is not None else np.asarray(values, dtype=np.float64)

    def intervals(self, windows: list[MultimodalWindow], alpha: float, bonferroni: bool = False) -> IntervalForecast:
        y_hat = self.denormalize(self.fitted.predict(windows))
        return predict_interval(y_hat, self.epsilon(alpha, bonferroni), alpha)


def _truth(windows) -> np.ndarray:
    return np.stack([np.asarray(w.y, dtype=np.float64) for w in windows])


def _score(fitted: Fitted, windows, normalizer: Optional[Normalizer]) -> np.ndarray:
    pred, truth = fitted.predict(windows), _truth(windows)
    if normalizer is not None:
        pred, truth = normalizer.invert(pred), normalizer.invert(truth)
    return nonconformity(truth, pred)


def ccp_scores(forecaster: Forecaster, samples: list[MultimodalWindow], k: int,
               normalizer: Optional[Normalizer] = None) -> Calibration:
    """Pooled cross-conformal scores plus the model refitted on all samples."""
    plan = growing_window_folds(len(samples), k)
    pooled = []
    for pair, (train, cal) in enumerate(plan.pairs):
        fitted = forecaster.fit([samples[i] for i in train])
        pooled.append(_score(fitted, [samples[i] for i in cal], normalizer))
        logger.info(f"CCP pair {pair + 1}/{len(plan.pairs)}: train {len(train)}, calibrate {len(cal)}")
    final = forecaster.fit(list(samples))
    scheme = "icp" if k == 2 else "ccp"
    return Calibration(final, np.concatenate(pooled, axis=0), plan, normalizer, scheme)


def ccp_calibrate(forecaster: Forecaster, samples: list[MultimodalWindow], k: int, alpha: float,
                  normalizer: Optional[Normalizer] = None, bonferroni: bool = False) -> tuple[Fitted, np.ndarray]:
    calibration = ccp_scores(forecaster, samples, k, normalizer)
    return calibration.fitted, calibration.epsilon(alpha, bonferroni)


def icp_scores(forecaster: Forecaster, samples: list[MultimodalWindow], split: Optional[int] = None,
               normalizer: Optional[Normalizer] = None) -> Calibration:
    """Single split: fit on samples[:split], score samples[split:]. Default split is the two-fold boundary."""
    n = len(samples)
    if split is None:
        split = (n + 1) // 2
    if not 0 < split < n:
        raise ConfigurationError(f"ICP split {split} leaves an empty side of {n} samples")
    fitted = forecaster.fit(list(samples[:split]))
    scores = _score(fitted, list(samples[split:]), normalizer)
    final = forecaster.fit(list(samples))
    plan = FoldPlan(n_samples=n, folds=(range(0, split), range(split, n)),
                    pairs=((range(0, split), range(split, n)),))
    return Calibration(final, scores, plan, normalizer, "icp")


def icp_calibrate(forecaster: Forecaster, samples: list[MultimodalWindow], alpha: float,
                  split: Optional[int] = None, normalizer: Optional[Normalizer] = None,
                  bonferroni: bool = False) -> tuple[Fitted, np.ndarray]:
    calibration = icp_scores(forecaster, samples, split, normalizer)
    return calibration.fitted, calibration.epsilon(alpha, bonferroni)
