"""
Experiment orchestration: simulate/ingest -> meta-train -> fine-tune ->
calibrate -> evaluate, plus the sweep designs (ablation, sim:real ratio,
interval K x alpha).

Every artifact is named <stem>-s<seed>-<hash10>.<ext>. Report, table, loss and
interval files depend only on (config, seed); wall-clock timings go to a
separate timings-*.json file.
"""
import asyncio
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch
from jsonschema import ValidationError, validate

from config import settings
from core.checkpoint import load_checkpoint, save_checkpoint
from core.config_validator import experiment_hash
from core.conformal_engine import Calibration, ccp_scores, coverage_rate, icp_scores, width_length
from core.data_pipeline import (
    Normalizer,
    build_adjacency,
    build_exogenous,
    fit_normalizer,
    make_windows,
    split_support_query,
)
from core.exceptions import ConfigurationError, ContractViolation, IngestionError, SizingError, StageError
from core.forecasters import MetaSTNetForecaster, make_forecaster
from core.ingest import (
    TIMESTAMP_FORMAT,
    load_cells_csv,
    load_events_csv,
    load_holidays,
    load_image_csv,
    load_traffic_csv,
    write_cells_csv,
    write_events_csv,
    write_image_csv,
    write_traffic_csv,
)
from core.meta_trainer import cold_start, finetune, meta_initialization, meta_train
from core.metastnet import MetaSTNet, collate
from core.metrics_engine import MetricsEngine, mae_rmse
from core.run_logger import EpochLogger, loss_table
from core import traffic_simulator
from db.database import Database
from db.models import (
    ExperimentConfig,
    MetaDataset,
    MetricsReport,
    ParameterSet,
    RunRecord,
    SeriesFrame,
    TaskDataset,
    WindowSpec,
)
from utils.hashing import artifact_name
from utils.rng import derive_seed

logger = logging.getLogger(__name__)

HOURS_PER_WEEK = 168
ABLATION_VARIANTS = {
    # name: (use external modalities, meta-learned initialisation)
    "full": (True, True),
    "oExt": (False, True),
    "oMeta": (True, False),
    "oExt_oMeta": (False, False),
}
FLOAT_FORMAT = "%.17g"

_INTERVAL = {
    "type": "object",
    "properties": {
        "label": {"type": "string"},
        "scheme": {"type": "string", "enum": ["icp", "ccp"]},
        "k": {"type": "integer", "minimum": 2},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "cr": {"type": "number", "minimum": 0, "maximum": 1},
        "wl": {"type": "number", "minimum": 0},
    },
    "required": ["label", "scheme", "k", "alpha", "cr", "wl"],
    "additionalProperties": False,
}

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"type": "string", "enum": sorted(settings.VALID_KINDS)},
        "seed": {"type": "integer"},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "mae": {"type": ["number", "null"], "minimum": 0},
        "rmse": {"type": ["number", "null"], "minimum": 0},
        "intervals": {"type": "array", "items": _INTERVAL},
        "rows": {"type": "array", "items": {"type": "object"}},
        "config": {"type": "object"},
        "partial": {"type": "boolean"},
    },
    "required": ["kind", "seed", "config_hash", "mae", "rmse", "intervals", "rows", "config", "partial"],
    "additionalProperties": False,
}


# --- Data preparation ---

@dataclass
class TargetData:
    frame: SeriesFrame      # raw units
    exog: np.ndarray
    image: np.ndarray
    adjacency: np.ndarray


@dataclass
class TargetSplit:
    train: list
    test: list
    normalizer: Normalizer
    adjacency: np.ndarray
    image: np.ndarray
    timestamps: pd.DatetimeIndex
    cell_ids: list
    spec: WindowSpec

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_exog(self) -> int:
        return self.train[0].txt_close.shape[1]


def _holidays(cfg: ExperimentConfig) -> frozenset:
    return load_holidays(cfg.holidays_path) if cfg.holidays_path else frozenset()


def target_hours(cfg: ExperimentConfig) -> int:
    return (cfg.target_train_days + cfg.test_days) * 24


def load_target(cfg: ExperimentConfig) -> TargetData:
    """The target ("real") series: CSV files, or a separately seeded simulation."""
    holidays = _holidays(cfg)
    if cfg.data_source == "csv":
        frame = load_traffic_csv(cfg.traffic_path)
        if cfg.events_path:
            ts, flags = load_events_csv(cfg.events_path)
            if len(ts) != len(frame) or not (ts == frame.timestamps).all():
                raise IngestionError(f"{cfg.events_path}: timestamps do not match {cfg.traffic_path}")
        else:
            flags = np.zeros((len(frame), 0))
        if cfg.image_path:
            image = load_image_csv(cfg.image_path)
        else:
            image = np.zeros((cfg.sim.image_size, cfg.sim.image_size, 2))
        if cfg.cells_path:
            adjacency = build_adjacency(load_cells_csv(cfg.cells_path), cfg.length_scale).matrix
        else:
            adjacency = np.zeros((len(frame.cell_ids), len(frame.cell_ids)))
    else:
        sim_cfg = replace(cfg.sim, seed=derive_seed(cfg.seed, 1), horizon_hours=target_hours(cfg))
        out = traffic_simulator.run(sim_cfg)
        frame, flags, image = traffic_simulator.to_series_frame(out), out.event_flags, out.image
        adjacency = build_adjacency(out.cell_positions, cfg.length_scale).matrix
    return TargetData(frame, build_exogenous(flags, frame.timestamps, holidays), image, adjacency)


def prepare_target(cfg: ExperimentConfig, target: TargetData, spec: WindowSpec) -> TargetSplit:
    """
    First DATA_TARGET_TRAIN_DAYS days train, next DATA_TEST_DAYS days test.
    Windows are assigned by target time; the normalizer sees training rows only.
    """
    train_hours, total = cfg.target_train_days * 24, target_hours(cfg)
    if len(target.frame) < total:
        raise SizingError(f"target series has {len(target.frame)} hours, need {total}")
    frame = target.frame.slice(0, total)
    normalizer = fit_normalizer(frame.slice(0, train_hours))
    windows = make_windows(normalizer.apply_frame(frame), target.exog[:total], spec, target.image)
    train = [w for w in windows if w.target_index < train_hours]
    test = [w for w in windows if w.target_index >= train_hours]
    if not train or not test:
        raise SizingError(f"window spec {spec} leaves no training or test windows in the target series")
    return TargetSplit(train, test, normalizer, target.adjacency, target.image,
                       frame.timestamps, list(frame.cell_ids), spec)


def build_meta_dataset(cfg: ExperimentConfig, split: TargetSplit, weeks: Optional[int] = None) -> MetaDataset:
    """
    Auxiliary tasks from the simulator. With `weeks`, each task simulates that
    many weeks of windows; with query source 'real' every task is queried on
    the last week of target training windows.
    """
    spec = split.spec
    sim_cfg = cfg.sim
    if weeks is not None:
        sim_cfg = replace(sim_cfg, horizon_hours=weeks * HOURS_PER_WEEK + spec.min_length() - 1)
    meta = traffic_simulator.make_meta_tasks(
        sim_cfg, cfg.n_tasks, cfg.shift, spec, cfg.support_ratio, _holidays(cfg), cfg.length_scale
    )
    for task in meta.tasks:
        if task.n_cells != split.n_cells or task.support[0].txt_close.shape[1] != split.n_exog:
            raise ConfigurationError(
                f"task {task.name} has D={task.n_cells}, D_txt={task.support[0].txt_close.shape[1]}; "
                f"target has D={split.n_cells}, D_txt={split.n_exog}"
            )
        if cfg.query_source == "real":
            task.support = task.support + task.query
            task.query = split.train[-HOURS_PER_WEEK:]
            task.query_adjacency = split.adjacency
    return meta


def real_meta_dataset(cfg: ExperimentConfig, split: TargetSplit) -> MetaDataset:
    """A single task on the last real training week, split chronologically into support and query."""
    week = split.train[-HOURS_PER_WEEK:]
    support, query = split_support_query(week, cfg.support_ratio)
    task = TaskDataset(name="real", support=support, query=query, adjacency=split.adjacency,
                       normalizer=split.normalizer)
    return MetaDataset(tasks=[task])


def build_model(cfg: ExperimentConfig, split: TargetSplit, use_external: bool = True) -> MetaSTNet:
    return MetaSTNet(cfg.model_config(split.n_cells, split.n_exog, split.image.shape, split.spec,
                                      use_external=use_external))


def train_initialization(cfg: ExperimentConfig, split: TargetSplit, model: MetaSTNet, use_meta: bool,
                         label: str, weeks: Optional[int] = None,
                         meta: Optional[MetaDataset] = None) -> tuple[ParameterSet, EpochLogger]:
    epoch_logger = EpochLogger(label)
    if not use_meta:
        return cold_start(model, cfg.seed), epoch_logger
    if meta is None:
        meta = build_meta_dataset(cfg, split, weeks)
    state = meta_train(model, meta, cfg.meta, cfg.seed, callbacks=[epoch_logger])
    return meta_initialization(state), epoch_logger


def make_target_forecaster(cfg: ExperimentConfig, split: TargetSplit, model: MetaSTNet, init: ParameterSet):
    return MetaSTNetForecaster(model, init, split.adjacency, cfg.meta, derive_seed(cfg.seed, 2))


def _truth(split: TargetSplit, windows) -> np.ndarray:
    return split.normalizer.invert(np.stack([w.y for w in windows]))


def evaluate_forecaster(forecaster, split: TargetSplit) -> tuple[float, float, np.ndarray]:
    fitted = forecaster.fit(split.train)
    pred = split.normalizer.invert(fitted.predict(split.test))
    mae, rmse = mae_rmse(_truth(split, split.test), pred)
    return mae, rmse, pred


# --- Sweep points (top-level so they can run in worker processes) ---

def _init_worker():
    torch.set_num_threads(settings.TORCH_NUM_THREADS)


def ablation_point(cfg: ExperimentConfig, split: TargetSplit, variant: str) -> dict:
    external, use_meta = ABLATION_VARIANTS[variant]
    model = build_model(cfg, split, use_external=external)
    init, epoch_logger = train_initialization(cfg, split, model, use_meta, f"ablation:{variant}")
    mae, rmse, _ = evaluate_forecaster(make_target_forecaster(cfg, split, model, init), split)
    return {"row": {"variant": variant, "mae": mae, "rmse": rmse}, "logger": epoch_logger}


def _weeks(ratio: str) -> Optional[int]:
    return None if ratio == "real-only" else int(ratio.split(":")[0])


def ratio_point(cfg: ExperimentConfig, split: TargetSplit, ratio: str) -> dict:
    """'real-only' meta-trains on one real week alone; 'k:1' on k simulated weeks per task."""
    weeks = _weeks(ratio)
    model = build_model(cfg, split)
    meta = real_meta_dataset(cfg, split) if weeks is None else None
    init, epoch_logger = train_initialization(
        cfg, split, model, True, f"ratio:{ratio}:h{split.spec.horizon}", weeks, meta
    )
    mae, rmse, _ = evaluate_forecaster(make_target_forecaster(cfg, split, model, init), split)
    return {"ratio": ratio, "horizon": split.spec.horizon, "mae": mae, "rmse": rmse, "logger": epoch_logger}


def interval_point(cfg: ExperimentConfig, split: TargetSplit, forecaster, k: int) -> dict:
    calibration = ccp_scores(forecaster, split.train, k, split.normalizer)
    truth = _truth(split, split.test)
    results = []
    for alpha in cfg.alphas:
        forecast = calibration.intervals(split.test, alpha, cfg.bonferroni)
        results.append((alpha, forecast))
    return {"k": k, "scheme": calibration.scheme, "results": results, "truth": truth}


async def run_points(fn, arglist: list[tuple], jobs: int) -> list:
    """Evaluate fn(*args) for every entry, up to `jobs` at a time; results keep input order."""
    if jobs <= 1 or len(arglist) <= 1:
        return [fn(*args) for args in arglist]
    loop = asyncio.get_running_loop()
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker) as pool:
        futures = [loop.run_in_executor(pool, fn, *args) for args in arglist]
        return await asyncio.gather(*futures)


# --- Output ---

class ArtifactWriter:
    def __init__(self, out_dir, seed: int, digest: str):
        self.out_dir = Path(out_dir)
        self.seed = seed
        self.digest = digest
        self.written: dict[str, Path] = {}

    def path(self, stem: str, ext: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        return self.out_dir / artifact_name(stem, self.seed, self.digest, ext)

    def csv(self, stem: str, df: pd.DataFrame) -> Path:
        path = self.path(stem, "csv")
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        self.written[stem] = path
        return path

    def json(self, stem: str, document) -> Path:
        path = self.path(stem, "json")
        path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
        self.written[stem] = path
        return path


def interval_frame(split: TargetSplit, windows, forecast) -> pd.DataFrame:
    times = [split.timestamps[w.target_index].strftime(TIMESTAMP_FORMAT) for w in windows]
    n_cells = len(split.cell_ids)
    return pd.DataFrame({
        "t": np.repeat(times, n_cells),
        "cell_id": np.tile(np.asarray(split.cell_ids, dtype=object), len(windows)),
        "yhat": forecast.yhat.reshape(-1),
        "lo": forecast.lower.reshape(-1),
        "hi": forecast.upper.reshape(-1),
    })


def prediction_frame(split: TargetSplit, windows, pred: np.ndarray) -> pd.DataFrame:
    times = [split.timestamps[w.target_index].strftime(TIMESTAMP_FORMAT) for w in windows]
    n_cells = len(split.cell_ids)
    return pd.DataFrame({
        "t": np.repeat(times, n_cells),
        "cell_id": np.tile(np.asarray(split.cell_ids, dtype=object), len(windows)),
        "yhat": np.asarray(pred).reshape(-1),
        "y": _truth(split, windows).reshape(-1),
    })


def write_report(writer: ArtifactWriter, report: MetricsReport) -> Path:
    document = report.to_document()
    try:
        validate(instance=document, schema=REPORT_SCHEMA)
    except ValidationError as e:
        raise ContractViolation(f"report does not match its schema: {e.message}")
    path = writer.json("report", document)
    writer.json("timings", {k: round(v, 6) for k, v in sorted(report.timings.items())})
    return path


@contextmanager
def stage(name: str, engine: MetricsEngine):
    start = time.perf_counter()
    logger.info(f"Stage {name} started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage {name} failed: {type(e).__name__}: {e}")
        raise StageError(name, e) from e
    finally:
        engine.record_timing(name, time.perf_counter() - start)


# --- Experiment kinds ---

def _predictor_forecaster(cfg, split, model, init):
    if cfg.predictor == "metastnet":
        return make_target_forecaster(cfg, split, model, init)
    return make_forecaster(cfg.predictor)


async def _point(cfg, target, engine, writer, loggers, jobs):
    with stage("prepare", engine):
        split = prepare_target(cfg, target, cfg.window)
    model, init = None, None
    if cfg.predictor == "metastnet":
        with stage("meta-train", engine):
            model = build_model(cfg, split)
            init, epoch_logger = train_initialization(cfg, split, model, True, "point")
            loggers.append(epoch_logger)
    with stage("evaluate", engine):
        mae, rmse, pred = evaluate_forecaster(_predictor_forecaster(cfg, split, model, init), split)
        engine.record_point(_truth(split, split.test), pred)
        writer.csv("predictions", prediction_frame(split, split.test, pred))


async def _ablation(cfg, target, engine, writer, loggers, jobs):
    with stage("prepare", engine):
        split = prepare_target(cfg, target, cfg.window)
    with stage("ablation", engine):
        results = await run_points(ablation_point, [(cfg, split, v) for v in ABLATION_VARIANTS], jobs)
    for result in results:
        engine.record_row(**result["row"])
        loggers.append(result["logger"])
    writer.csv("ablation", pd.DataFrame(engine.rows, columns=["variant", "mae", "rmse"]))


async def _ratio_sweep(cfg, target, engine, writer, loggers, jobs):
    with stage("prepare", engine):
        splits = {h: prepare_target(cfg, target, cfg.window_for(h)) for h in (1, 24)}
    with stage("ratio-sweep", engine):
        points = [(cfg, splits[h], ratio) for ratio in cfg.ratios for h in (1, 24)]
        results = await run_points(ratio_point, points, jobs)
    by_key = {(r["ratio"], r["horizon"]): r for r in results}
    for ratio in cfg.ratios:
        h1, h24 = by_key[(ratio, 1)], by_key[(ratio, 24)]
        engine.record_row(ratio=ratio, mae_h1=h1["mae"], rmse_h1=h1["rmse"],
                          mae_h24=h24["mae"], rmse_h24=h24["rmse"])
        loggers.extend([h1["logger"], h24["logger"]])
    writer.csv("ratio-table", pd.DataFrame(engine.rows, columns=["ratio", "mae_h1", "rmse_h1", "mae_h24", "rmse_h24"]))


async def _interval_sweep(cfg, target, engine, writer, loggers, jobs):
    with stage("prepare", engine):
        split = prepare_target(cfg, target, cfg.window)
    model, init = None, None
    if cfg.predictor == "metastnet":
        with stage("meta-train", engine):
            model = build_model(cfg, split)
            init, epoch_logger = train_initialization(cfg, split, model, True, "interval")
            loggers.append(epoch_logger)
    with stage("calibrate", engine):
        forecaster = _predictor_forecaster(cfg, split, model, init)
        results = await run_points(interval_point, [(cfg, split, forecaster, k) for k in cfg.folds], jobs)
    with stage("evaluate", engine):
        for result in results:
            for alpha, forecast in result["results"]:
                engine.record_interval(result["truth"], forecast, result["k"], result["scheme"], cfg.predictor)
                writer.csv(f"intervals-k{result['k']}-a{alpha:g}", interval_frame(split, split.test, forecast))
        writer.csv("interval-table", pd.DataFrame(engine.intervals, columns=["scheme", "k", "alpha", "cr", "wl"]))


KINDS = {
    "point": _point,
    "ablation": _ablation,
    "ratio-sweep": _ratio_sweep,
    "interval-sweep": _interval_sweep,
}


async def run_experiment(cfg: ExperimentConfig, out_dir, jobs: int = 1,
                         db: Optional[Database] = None) -> tuple[MetricsReport, dict]:
    """
    Run one configured experiment and write its artifacts. A failing stage is
    re-raised as StageError after a report flagged partial has been written.
    """
    torch.set_num_threads(settings.TORCH_NUM_THREADS)
    digest = experiment_hash(cfg)
    writer = ArtifactWriter(out_dir, cfg.seed, digest)
    engine = MetricsEngine(cfg.kind, cfg.seed, digest, cfg.document)
    loggers: list[EpochLogger] = []
    run_id = await _register(db, RunRecord(id=None, config_hash=digest, seed=cfg.seed, kind=cfg.kind))

    status, report_path = "failed", None
    try:
        with stage("ingest", engine):
            target = load_target(cfg)
        await KINDS[cfg.kind](cfg, target, engine, writer, loggers, jobs)
        with stage("report", engine):
            writer.csv("losses", loss_table(loggers))
            report = engine.build_report()
            report_path = write_report(writer, report)
        status = "finished"
    except StageError:
        report = engine.build_report(partial=True)
        report_path = write_report(writer, report)
        raise
    finally:
        await _close_run(db, run_id, status, report_path, loggers, engine)

    logger.info(f"Experiment {cfg.kind} finished, report {report_path}")
    return report, dict(writer.written)


async def _register(db: Optional[Database], record: RunRecord) -> Optional[int]:
    if db is None:
        return None
    try:
        await db.init_db()
        return await db.start_run(record)
    except Exception as e:
        logger.error(f"Run registry unavailable: {e}")
        return None


async def _close_run(db, run_id, status, report_path, loggers, engine):
    if db is None or run_id is None:
        return
    for epoch_logger in loggers:
        await epoch_logger.flush(db, run_id)
    entries = []
    if engine.current["mae"] is not None:
        entries += [{"name": "mae", "value": engine.current["mae"]}, {"name": "rmse", "value": engine.current["rmse"]}]
    for item in engine.intervals:
        entries += [
            {"name": "cr", "alpha": item["alpha"], "k": item["k"], "value": item["cr"]},
            {"name": "wl", "alpha": item["alpha"], "k": item["k"], "value": item["wl"]},
        ]
    try:
        if entries:
            await db.log_metrics(run_id, entries)
        await db.finish_run(run_id, status, str(report_path) if report_path else None)
    except Exception as e:
        logger.error(f"Error closing run {run_id}: {e}")


# --- Single-stage commands ---

def run_simulate(cfg: ExperimentConfig, out_dir) -> dict:
    writer = ArtifactWriter(out_dir, cfg.seed, experiment_hash(cfg))
    out = traffic_simulator.run(cfg.sim)
    paths = {
        "traffic": writer.path("traffic", "csv"),
        "events": writer.path("events", "csv"),
        "image": writer.path("image", "csv"),
        "cells": writer.path("cells", "csv"),
    }
    write_traffic_csv(paths["traffic"], traffic_simulator.to_series_frame(out))
    write_events_csv(paths["events"], out.timestamps, out.event_flags)
    write_image_csv(paths["image"], out.image)
    write_cells_csv(paths["cells"], out.cell_positions)
    return paths


def _target_split(cfg: ExperimentConfig) -> TargetSplit:
    return prepare_target(cfg, load_target(cfg), cfg.window)


def run_train_meta(cfg: ExperimentConfig, out_dir) -> dict:
    writer = ArtifactWriter(out_dir, cfg.seed, experiment_hash(cfg))
    split = _target_split(cfg)
    model = build_model(cfg, split)
    init, epoch_logger = train_initialization(cfg, split, model, True, "train-meta")
    checkpoint = save_checkpoint(writer.path("metastnet-meta", "csv"), init, model.config,
                                 extra={"normalizer": split.normalizer.to_dict()})
    losses = writer.json("losses", {"label": epoch_logger.label, "query_loss": [v for _, v in epoch_logger.rows]})
    return {"checkpoint": checkpoint, "losses": losses}


def _load_model(path) -> tuple[MetaSTNet, ParameterSet]:
    params, model_cfg, _ = load_checkpoint(path)
    return MetaSTNet(model_cfg), params


def run_finetune(cfg: ExperimentConfig, checkpoint, out_dir) -> dict:
    writer = ArtifactWriter(out_dir, cfg.seed, experiment_hash(cfg))
    split = _target_split(cfg)
    model, params = _load_model(checkpoint)
    losses = []
    tuned = finetune(model, params, collate(split.train, split.adjacency), cfg.meta.finetune_steps,
                     cfg.meta.finetune_lr, derive_seed(cfg.seed, 2), losses=losses)
    path = save_checkpoint(writer.path("metastnet-finetuned", "csv"), tuned, model.config,
                           extra={"normalizer": split.normalizer.to_dict()})
    writer.json("finetune-losses", {"loss": losses})
    return {"checkpoint": path}


def run_predict(cfg: ExperimentConfig, checkpoint, out_dir) -> dict:
    writer = ArtifactWriter(out_dir, cfg.seed, experiment_hash(cfg))
    split = _target_split(cfg)
    model, params = _load_model(checkpoint)
    pred = split.normalizer.invert(model.predict(collate(split.test, split.adjacency), params))
    return {"predictions": writer.csv("predictions", prediction_frame(split, split.test, pred))}


def run_conformal(cfg: ExperimentConfig, out_dir, alphas, k: int, scheme: str = "ccp",
                  checkpoint=None) -> dict:
    writer = ArtifactWriter(out_dir, cfg.seed, experiment_hash(cfg))
    split = _target_split(cfg)
    if checkpoint is not None:
        model, params = _load_model(checkpoint)
        forecaster = make_target_forecaster(cfg, split, model, params)
    elif cfg.predictor == "metastnet":
        model = build_model(cfg, split)
        init, _ = train_initialization(cfg, split, model, True, "conformal")
        forecaster = make_target_forecaster(cfg, split, model, init)
    else:
        forecaster = make_forecaster(cfg.predictor)

    if scheme == "icp":
        calibration: Calibration = icp_scores(forecaster, split.train, normalizer=split.normalizer)
        k = 2
    else:
        calibration = ccp_scores(forecaster, split.train, k, split.normalizer)
    truth = _truth(split, split.test)
    metrics = []
    for alpha in alphas:
        forecast = calibration.intervals(split.test, alpha, cfg.bonferroni)
        writer.csv(f"intervals-k{k}-a{alpha:g}", interval_frame(split, split.test, forecast))
        metrics.append({
            "cr": coverage_rate(truth, forecast.lower, forecast.upper),
            "wl": width_length(forecast.lower, forecast.upper),
            "alpha": alpha,
            "K": k,
        })
    writer.json("conformal-metrics", metrics)
    return dict(writer.written)


def _observed(cfg: ExperimentConfig) -> pd.DataFrame:
    split = _target_split(cfg)
    frame = prediction_frame(split, split.test, np.zeros((len(split.test), split.n_cells)))
    return frame[["t", "cell_id", "y"]]


def run_evaluate(cfg: ExperimentConfig, predictions_path, out_dir) -> dict:
    """
    MAE/RMSE (and CR/WL when lo/hi columns exist) of a predictions or interval
    CSV. Files without a 'y' column are matched on (t, cell_id) against the
    configured target's test split.
    """
    df = pd.read_csv(predictions_path, float_precision="round_trip")
    missing = {"t", "cell_id", "yhat"} - set(df.columns)
    if missing:
        raise IngestionError(f"{predictions_path}: missing columns {', '.join(sorted(missing))}")
    if "y" not in df.columns:
        observed = _observed(cfg)
        df["cell_id"] = df["cell_id"].astype(str)
        observed = observed.assign(cell_id=observed["cell_id"].astype(str))
        merged = df.merge(observed, on=["t", "cell_id"], how="left")
        if merged["y"].isna().any():
            raise IngestionError(f"{predictions_path}: rows do not match the target test split")
        df = merged
    mae, rmse = mae_rmse(df["y"].to_numpy(), df["yhat"].to_numpy())
    result = {"mae": mae, "rmse": rmse}
    if {"lo", "hi"} <= set(df.columns):
        result["cr"] = coverage_rate(df["y"].to_numpy(), df["lo"].to_numpy(), df["hi"].to_numpy())
        result["wl"] = width_length(df["lo"].to_numpy(), df["hi"].to_numpy())
    writer = ArtifactWriter(out_dir, cfg.seed, experiment_hash(cfg))
    writer.json("evaluation", result)
    return result
