"""
Forecasters accepted by the conformal calibrators and the experiment runner.

A forecaster is fitted on a list of windows and returns a fitted object whose
``predict(windows)`` yields N x D predictions in the windows' (normalized) units.
"""
import logging
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from core.meta_trainer import finetune
from core.metastnet import MetaSTNet, collate
from db.models import MetaConfig, MultimodalWindow, ParameterSet

logger = logging.getLogger(__name__)


class Fitted(Protocol):
    def predict(self, windows: list[MultimodalWindow]) -> np.ndarray: ...


class Forecaster(Protocol):
    name: str

    def fit(self, windows: list[MultimodalWindow]) -> Fitted: ...


# --- Naive baselines ---

class _NaiveFitted:
    def __init__(self, rule):
        self.rule = rule

    def predict(self, windows):
        return np.stack([self.rule(w) for w in windows])


class PersistenceForecaster:
    """y_hat = last observed value (the closeness block's final row)."""
    name = "persistence"

    def fit(self, windows):
        return _NaiveFitted(lambda w: np.asarray(w.x_close[-1], dtype=np.float64))


class SeasonalNaiveForecaster:
    """y_hat = value 24 h before the target (the most recent period row)."""
    name = "seasonal"

    def fit(self, windows):
        return _NaiveFitted(lambda w: np.asarray(w.x_period[0], dtype=np.float64))


# --- MetaSTNet ---

@dataclass
class FittedMetaSTNet:
    model: MetaSTNet
    params: ParameterSet
    adjacency: np.ndarray

    def predict(self, windows):
        return self.model.predict(collate(windows, self.adjacency), self.params)


class MetaSTNetForecaster:
    """Fine-tunes a fresh copy of `init` on every fit() call."""
    name = "metastnet"

    def __init__(self, model: MetaSTNet, init: ParameterSet, adjacency, cfg: MetaConfig, seed: int):
        self.model = model
        self.init = init
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.cfg = cfg
        self.seed = seed

    def fit(self, windows):
        batch = collate(windows, self.adjacency)
        losses = []
        params = finetune(self.model, self.init, batch, self.cfg.finetune_steps, self.cfg.finetune_lr,
                          self.seed, losses=losses)
        if losses:
            logger.info(f"Fine-tuned on {len(windows)} windows: loss {losses[0]:.6g} -> {losses[-1]:.6g}")
        return FittedMetaSTNet(self.model, params, self.adjacency)


def make_forecaster(kind: str, **kwargs) -> Forecaster:
    if kind == "persistence":
        return PersistenceForecaster()
    if kind == "seasonal":
        return SeasonalNaiveForecaster()
    if kind == "metastnet":
        return MetaSTNetForecaster(**kwargs)
    raise ValueError(f"unknown predictor {kind!r}")
