"""
Series preparation for the forecaster: min-max scaling, calendar one-hots,
closeness/period windows, support/query splits, growing-window fold plans and
the geographic adjacency.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError, SizingError
from db.models import FoldPlan, MultimodalWindow, SeriesFrame, SpatialGraph, WindowSpec

logger = logging.getLogger(__name__)

N_CALENDAR_FEATURES = 24 + 7 + 1


# --- Normalization ---

@dataclass
class Normalizer:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if np.any(self.maximum < self.minimum):
            raise ConfigurationError("normalizer maximum must be >= minimum per dimension")

    @property
    def span(self) -> np.ndarray:
        return self.maximum - self.minimum

    def apply(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        span = self.span
        safe = np.where(span > 0, span, 1.0)
        # Constant dimensions map to 0; values outside the fitted range are not clipped.
        return np.where(span > 0, (values - self.minimum) / safe, 0.0)

    def invert(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return np.where(self.span > 0, values * self.span + self.minimum, self.minimum + 0.0 * values)

    def apply_frame(self, frame: SeriesFrame) -> SeriesFrame:
        return SeriesFrame(frame.timestamps, self.apply(frame.values), list(frame.cell_ids))

    def to_dict(self) -> dict:
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(np.asarray(data["minimum"]), np.asarray(data["maximum"]))


def fit_normalizer(train: SeriesFrame) -> Normalizer:
    if len(train) == 0:
        raise SizingError("cannot fit a normalizer on an empty training range")
    return Normalizer(train.values.min(axis=0), train.values.max(axis=0))


# --- Calendar / exogenous features ---

def one_hot_metadata(timestamps: pd.DatetimeIndex, holidays: Iterable = ()) -> np.ndarray:
    """T x 32: hour of day (24) | day of week (7, Monday first) | holiday flag (1)."""
    timestamps = pd.DatetimeIndex(timestamps)
    holiday_dates = {pd.Timestamp(d).date() for d in holidays}
    out = np.zeros((len(timestamps), N_CALENDAR_FEATURES), dtype=np.float64)
    rows = np.arange(len(timestamps))
    out[rows, np.asarray(timestamps.hour)] = 1.0
    out[rows, 24 + np.asarray(timestamps.dayofweek)] = 1.0
    out[:, 31] = [1.0 if ts.date() in holiday_dates else 0.0 for ts in timestamps]
    return out


def build_exogenous(event_flags, timestamps: pd.DatetimeIndex, holidays: Iterable = ()) -> np.ndarray:
    """Textual stream: event flags followed by the calendar one-hots."""
    event_flags = np.asarray(event_flags, dtype=np.float64)
    if event_flags.ndim == 1:
        event_flags = event_flags[:, None]
    if event_flags.shape[0] != len(timestamps):
        raise ConfigurationError(
            f"event flags cover {event_flags.shape[0]} hours, series has {len(timestamps)}"
        )
    return np.concatenate([event_flags, one_hot_metadata(timestamps, holidays)], axis=1)


# --- Windows ---

def make_windows(frame: SeriesFrame, exog: np.ndarray, spec: WindowSpec,
                 image: np.ndarray) -> list[MultimodalWindow]:
    """
    One window per anchor hour t, ordered by target time t + h. Closeness rows
    are t - p_c + 1 .. t; period rows are t + h - 24k for k = 1 .. p_p, most
    recent day first.
    """
    n_rows = len(frame)
    if n_rows < spec.min_length():
        raise SizingError(
            f"series of {n_rows} hours is too short for the window spec "
            f"(need at least {spec.min_length()})"
        )
    exog = np.asarray(exog, dtype=np.float64)
    if exog.shape[0] != n_rows:
        raise ConfigurationError(f"exogenous rows {exog.shape[0]} != series rows {n_rows}")

    values = frame.values
    windows = []
    for t in range(spec.first_anchor, n_rows - spec.horizon):
        close_rows = np.arange(t - spec.closeness + 1, t + 1)
        period_rows = np.array([t + spec.horizon - spec.period_stride * k for k in range(1, spec.period + 1)])
        windows.append(MultimodalWindow(
            x_close=values[close_rows],
            txt_close=exog[close_rows],
            x_period=values[period_rows],
            txt_period=exog[period_rows],
            image=image,
            y=values[t + spec.horizon],
            horizon=spec.horizon,
            target_index=t + spec.horizon,
            anchor_index=t,
        ))
    return windows


def support_count(n_windows: int, support_ratio: float) -> int:
    """floor(ratio * n), with products such as 0.29 * 100 counted as 29."""
    if not 0 < support_ratio < 1:
        raise ConfigurationError(f"support ratio must lie in (0, 1), got {support_ratio}")
    return int(math.floor(support_ratio * n_windows + 1e-9))


def split_support_query(windows: list, support_ratio: float) -> tuple[list, list]:
    n_support = support_count(len(windows), support_ratio)
    if n_support < 1 or n_support >= len(windows):
        raise SizingError(
            f"{len(windows)} windows cannot be split {support_ratio:.2f} into nonempty support and query"
        )
    return windows[:n_support], windows[n_support:]


# --- Fold plan ---

def growing_window_folds(n_samples: int, k: int) -> FoldPlan:
    """
    K contiguous folds, the first n % K of them one sample longer. Pair k trains
    on folds 1..k and calibrates on fold k+1.
    """
    if k < 2:
        raise ConfigurationError(f"cross-conformal needs K >= 2, got {k}")
    if n_samples < k:
        raise SizingError(f"{n_samples} samples cannot be split into {k} folds")
    base, extra = divmod(n_samples, k)
    folds, start = [], 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        folds.append(range(start, stop))
        start = stop
    pairs = tuple((range(0, folds[i].stop), folds[i + 1]) for i in range(k - 1))
    return FoldPlan(n_samples=n_samples, folds=tuple(folds), pairs=pairs)


# --- Spatial graph ---

def build_adjacency(cell_positions, length_scale: float) -> SpatialGraph:
    """Gaussian kernel exp(-d^2 / l^2) between cells, zero diagonal."""
    if length_scale <= 0:
        raise ConfigurationError(f"adjacency length scale must be positive, got {length_scale}")
    pos = np.asarray(cell_positions, dtype=np.float64).reshape(-1, 2)
    if pos.shape[0] == 0:
        raise ConfigurationError("adjacency needs at least one cell")
    diff = pos[:, None, :] - pos[None, :, :]
    dist2 = np.sum(diff * diff, axis=-1)
    matrix = np.exp(-dist2 / length_scale ** 2)
    np.fill_diagonal(matrix, 0.0)
    matrix = 0.5 * (matrix + matrix.T)
    return SpatialGraph(matrix)


def normalized_adjacency(matrix) -> np.ndarray:
    """Deg^-1/2 (G + I) Deg^-1/2; the self-loop keeps every degree >= 1."""
    g = np.asarray(matrix, dtype=np.float64)
    augmented = g + np.eye(g.shape[0])
    inv_sqrt = 1.0 / np.sqrt(augmented.sum(axis=1))
    return augmented * inv_sqrt[:, None] * inv_sqrt[None, :]
