from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Optional
import hashlib

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError, ContractViolation


# --- Numerics ---

@dataclass(frozen=True)
class CgConfig:
    max_iters: int = 10
    residual_tol: float = 1e-10
    damping: float = 1e-4

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigurationError(f"CG max_iters must be >= 1, got {self.max_iters}")
        if self.residual_tol < 0 or self.damping < 0:
            raise ConfigurationError("CG residual_tol and damping must be nonnegative")


# --- Simulator ---

@dataclass(frozen=True)
class SimConfig:
    n_base_stations: int = 4
    spacing: float = 500.0            # meters between neighbouring base stations
    users_per_sector: int = 5
    horizon_hours: int = 672
    amplitude_lo: float = 0.5
    amplitude_hi: float = 2.0
    base_load_lo: float = 1.0
    base_load_hi: float = 3.0
    noise_sigma: float = 0.2
    speed: float = 300.0              # meters per hour
    work_start: int = 8
    work_end: int = 18
    event_rate: float = 0.5           # events per day
    burst_multiplier: float = 1.8
    image_size: int = 16
    seed: int = 0
    start: str = "2024-01-01 00:00"   # a Monday
    sectors_per_bs: int = 3

    def __post_init__(self):
        if self.n_base_stations < 1 or self.users_per_sector < 1:
            raise ConfigurationError("simulator needs at least one base station and one user per sector")
        if self.horizon_hours < 48:
            raise ConfigurationError(f"horizon_hours must be >= 48, got {self.horizon_hours}")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if not self.amplitude_hi >= self.amplitude_lo >= 0:
            raise ConfigurationError("amplitude range must satisfy hi >= lo >= 0")
        if self.base_load_hi < self.base_load_lo:
            raise ConfigurationError("base load range must satisfy hi >= lo")
        if self.speed < 0 or self.event_rate < 0 or self.burst_multiplier < 0:
            raise ConfigurationError("speed, event_rate and burst_multiplier must be nonnegative")
        if not 0 <= self.work_start < self.work_end <= 24:
            raise ConfigurationError(
                f"working hours [{self.work_start}, {self.work_end}) are not a window within a day"
            )
        if self.sectors_per_bs != 3:
            raise ConfigurationError("base stations have exactly three sectors")

    @property
    def n_cells(self) -> int:
        return self.n_base_stations * self.sectors_per_bs

    @property
    def grid_side(self) -> int:
        return int(np.ceil(np.sqrt(self.n_base_stations)))

    @property
    def extent(self) -> float:
        return self.grid_side * self.spacing


@dataclass(frozen=True)
class ShiftSpec:
    """Relative half-widths of the per-task perturbations of a SimConfig."""
    amplitude: float = 0.0
    base_load: float = 0.0
    noise: float = 0.0

    @classmethod
    def identity(cls) -> "ShiftSpec":
        return cls()

    @property
    def is_identity(self) -> bool:
        return self.amplitude == 0 and self.base_load == 0 and self.noise == 0


@dataclass(frozen=True)
class UserState:
    x: float
    y: float
    heading: float      # radians, counter-clockwise from +x
    amplitude: float
    phase: float        # hours
    base_load: float
    cell_id: int = -1

    def moved(self, **changes) -> "UserState":
        return replace(self, **changes)


@dataclass
class SimOutput:
    timestamps: pd.DatetimeIndex
    traffic: np.ndarray           # T x D
    event_flags: np.ndarray       # T x B, one flag per base station
    image: np.ndarray             # W x H x C
    cell_positions: np.ndarray    # D x 2
    bs_positions: np.ndarray      # B x 2
    user_totals: np.ndarray       # T, independent per-user accumulation

    @property
    def cell_ids(self) -> list[int]:
        return list(range(self.traffic.shape[1]))


# --- Data ---

@dataclass
class SeriesFrame:
    timestamps: pd.DatetimeIndex
    values: np.ndarray            # T x D
    cell_ids: list

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ConfigurationError("series values must be T x D with D >= 1")
        if len(self.timestamps) != self.values.shape[0]:
            raise ConfigurationError("timestamps and values disagree on T")
        if len(self.cell_ids) != self.values.shape[1]:
            raise ConfigurationError("cell ids and values disagree on D")

    def __len__(self):
        return self.values.shape[0]

    def slice(self, start: int, stop: int) -> "SeriesFrame":
        return SeriesFrame(self.timestamps[start:stop], self.values[start:stop], list(self.cell_ids))


@dataclass(frozen=True)
class WindowSpec:
    closeness: int = 3
    period: int = 3
    horizon: int = 1
    period_stride: int = 24

    def __post_init__(self):
        if self.closeness < 1 or self.period < 1 or self.horizon < 1:
            raise ConfigurationError("closeness, period and horizon must all be >= 1")

    @property
    def first_anchor(self) -> int:
        return max(self.period * self.period_stride, self.closeness) - 1

    def min_length(self) -> int:
        return self.first_anchor + self.horizon + 1


@dataclass
class MultimodalWindow:
    x_close: np.ndarray       # p_c x D
    txt_close: np.ndarray     # p_c x D_txt
    x_period: np.ndarray      # p_p x D, most recent day first
    txt_period: np.ndarray    # p_p x D_txt
    image: np.ndarray         # W x H x C, shared by all windows of a series
    y: np.ndarray             # D
    horizon: int
    target_index: int
    anchor_index: int


@dataclass
class TaskDataset:
    name: str
    support: list
    query: list
    adjacency: np.ndarray
    normalizer: Optional[object] = None
    query_adjacency: Optional[np.ndarray] = None   # set when the query windows come from another series

    @property
    def n_cells(self) -> int:
        return self.adjacency.shape[0]


@dataclass
class MetaDataset:
    tasks: list
    target: Optional[TaskDataset] = None

    def __len__(self):
        return len(self.tasks)


@dataclass(frozen=True)
class FoldPlan:
    n_samples: int
    folds: tuple               # tuple of range, contiguous and ordered
    pairs: tuple               # tuple of (train range, calibration range)

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def calibration_size(self) -> int:
        return sum(len(cal) for _, cal in self.pairs)


@dataclass
class SpatialGraph:
    matrix: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]


# --- Model ---

@dataclass(frozen=True)
class ModelConfig:
    n_cells: int
    n_exog: int
    image_shape: tuple = (16, 16, 2)   # W, H, C
    hidden: int = 16
    heads: int = 4
    blocks: int = 2
    dropout: float = 0.05
    ffn_width: int = 0                 # 0 means 2 * hidden
    cnn_channels: int = 4
    head_mode: str = "matrix"
    use_external: bool = True
    closeness: int = 3
    period: int = 3

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigurationError(f"hidden width {self.hidden} is not divisible by {self.heads} heads")
        if self.blocks < 1:
            raise ConfigurationError("at least one ST-block per branch is required")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.head_mode not in ("matrix", "scalar"):
            raise ConfigurationError(f"unknown head mode {self.head_mode!r}")
        if self.n_cells < 1 or self.n_exog < 1:
            raise ConfigurationError("model needs at least one cell and one exogenous feature")

    @property
    def head_width(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_hidden(self) -> int:
        return self.ffn_width or 2 * self.hidden


@dataclass
class ParameterSet:
    """Body θ and output-layer head ω, kept as disjoint name spaces."""
    body: dict
    head: dict

    def __post_init__(self):
        overlap = set(self.body) & set(self.head)
        if overlap:
            raise ConfigurationError(f"body and head share parameter names: {sorted(overlap)}")

    def merged(self) -> dict:
        return {**self.body, **self.head}

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            body={k: v.detach().clone() for k, v in self.body.items()},
            head={k: v.detach().clone() for k, v in self.head.items()},
        )

    def with_params(self, params: dict) -> "ParameterSet":
        return ParameterSet(
            body={k: params[k] for k in self.body},
            head={k: params[k] for k in self.head},
        )

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.merged().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().numpy().astype("<f8").tobytes())
        return digest.hexdigest()


# --- Meta Learning ---

@dataclass(frozen=True)
class MetaConfig:
    inner_steps: int = 5
    inner_lr: float = 0.01
    cg_steps: int = 10
    cg_tol: float = 1e-10
    outer_lr: float = 0.001
    epochs: int = 200
    damping: float = 1e-4
    finetune_steps: int = 200
    finetune_lr: float = 0.001
    reinit_heads: bool = False

    def __post_init__(self):
        if self.inner_steps < 1 or self.cg_steps < 1 or self.epochs < 1:
            raise ConfigurationError("inner_steps, cg_steps and epochs must all be >= 1")
        if self.inner_lr <= 0 or self.finetune_lr <= 0 or self.outer_lr < 0:
            raise ConfigurationError("learning rates must be positive")
        if self.finetune_steps < 0:
            raise ConfigurationError("finetune_steps must be >= 0")

    @property
    def cg(self) -> CgConfig:
        return CgConfig(max_iters=self.cg_steps, residual_tol=self.cg_tol, damping=self.damping)


@dataclass
class MetaState:
    theta: dict
    heads: list                        # one head dict per auxiliary task
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        shapes = {tuple((k, tuple(v.shape)) for k, v in sorted(h.items())) for h in self.heads}
        if len(shapes) > 1:
            raise ConfigurationError("task heads must share identical shapes")


# --- Conformal ---

@dataclass
class ScorePool:
    scores: np.ndarray      # L x D, nonnegative
    alpha: float

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        if self.scores.shape[0] < 1:
            raise ContractViolation("score pool is empty")
        if not 0 < self.alpha < 1:
            raise ContractViolation(f"alpha must lie in (0, 1), got {self.alpha}")
        if np.any(self.scores < 0) or not np.all(np.isfinite(self.scores)):
            raise ContractViolation("nonconformity scores must be finite and nonnegative")

    @property
    def size(self) -> int:
        return self.scores.shape[0]


@dataclass
class IntervalForecast:
    yhat: np.ndarray
    epsilon: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


# --- Experiment ---

@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    sim: SimConfig
    data_source: str = "simulate"
    traffic_path: str = ""
    events_path: str = ""
    image_path: str = ""
    cells_path: str = ""
    holidays_path: str = ""
    length_scale: float = 500.0
    target_train_days: int = 14
    test_days: int = 7
    window: WindowSpec = field(default_factory=WindowSpec)
    window_day: WindowSpec = field(default_factory=lambda: WindowSpec(closeness=6, period=6, horizon=24))
    model: dict = field(default_factory=dict)       # ModelConfig keywords minus data-derived sizes
    meta: MetaConfig = field(default_factory=MetaConfig)
    n_tasks: int = 4
    support_ratio: float = 0.8
    query_source: str = "real"
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    alphas: tuple = (0.05, 0.15, 0.25)
    folds: tuple = (2, 5, 10)
    bonferroni: bool = False
    kind: str = "point"
    predictor: str = "metastnet"
    ratios: tuple = ("real-only", "1:1", "2:1", "3:1", "4:1", "8:1")
    document: dict = field(default_factory=dict)    # resolved KEY -> value, the hashed provenance record

    def window_for(self, horizon: int) -> WindowSpec:
        """Day-ahead horizons use the longer day lags."""
        base = self.window_day if horizon >= 24 else self.window
        return replace(base, horizon=horizon)

    def model_config(self, n_cells: int, n_exog: int, image_shape: tuple, spec: WindowSpec, **overrides) -> ModelConfig:
        kwargs = dict(self.model)
        kwargs.update(overrides)
        return ModelConfig(n_cells=n_cells, n_exog=n_exog, image_shape=tuple(image_shape),
                           closeness=spec.closeness, period=spec.period, **kwargs)


@dataclass
class MetricsReport:
    kind: str
    seed: int
    config_hash: str
    mae: float
    rmse: float
    intervals: list = field(default_factory=list)   # dicts: alpha, k, scheme, cr, wl
    rows: list = field(default_factory=list)        # sweep table rows
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)     # seconds per phase, not part of the report file
    partial: bool = False

    def to_document(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "mae": self.mae,
            "rmse": self.rmse,
            "intervals": self.intervals,
            "rows": self.rows,
            "config": self.config,
            "partial": self.partial,
        }


@dataclass
class RunRecord:
    id: Optional[int]
    config_hash: str
    seed: int
    kind: str
    status: str = "running"   # 'running', 'finished', 'failed'
    report_path: Optional[str] = None
    started_at: datetime = field(default_factory=datetime.now)
    finished_at: Optional[datetime] = None


# SQL Schema
SCHEMA_SQL = """
CREATE TABLE IF NOT EXISTS runs (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    config_hash TEXT,
    seed INTEGER,
    kind TEXT,
    status TEXT,
    report_path TEXT,
    started_at TIMESTAMP,
    finished_at TIMESTAMP
);

CREATE TABLE IF NOT EXISTS epoch_losses (
    run_id INTEGER,
    label TEXT,
    epoch INTEGER,
    query_loss REAL,
    FOREIGN KEY(run_id) REFERENCES runs(id)
);

CREATE TABLE IF NOT EXISTS metrics (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id INTEGER,
    name TEXT,
    alpha REAL,
    k INTEGER,
    value REAL,
    FOREIGN KEY(run_id) REFERENCES runs(id)
);
"""
