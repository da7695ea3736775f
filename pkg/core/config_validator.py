import logging
from pathlib import Path

from dotenv import dotenv_values
from jsonschema import ValidationError, validate

from config import settings
from core.exceptions import ConfigurationError
from db.models import ExperimentConfig, MetaConfig, ShiftSpec, SimConfig, WindowSpec
from utils.hashing import config_hash

logger = logging.getLogger(__name__)


def _bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("true", "1", "yes", "on"):
        return True
    if value in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(cast):
    def parse(raw: str) -> list:
        return [cast(x.strip()) for x in raw.split(",") if x.strip()]
    return parse


# KEY -> (parser, default). Defaults come from config/settings.py.
CONFIG_KEYS = {
    "SEED": (int, settings.DEFAULT_SEED),
    # [sim]
    "SIM_N_BASE_STATIONS": (int, settings.SIM_N_BASE_STATIONS),
    "SIM_SPACING_M": (float, settings.SIM_SPACING_M),
    "SIM_USERS_PER_SECTOR": (int, settings.SIM_USERS_PER_SECTOR),
    "SIM_HORIZON_HOURS": (int, settings.SIM_HORIZON_HOURS),
    "SIM_AMPLITUDE_LO": (float, settings.SIM_AMPLITUDE_LO),
    "SIM_AMPLITUDE_HI": (float, settings.SIM_AMPLITUDE_HI),
    "SIM_BASE_LOAD_LO": (float, settings.SIM_BASE_LOAD_LO),
    "SIM_BASE_LOAD_HI": (float, settings.SIM_BASE_LOAD_HI),
    "SIM_NOISE_SIGMA": (float, settings.SIM_NOISE_SIGMA),
    "SIM_SPEED_M_PER_H": (float, settings.SIM_SPEED_M_PER_H),
    "SIM_WORK_START_HOUR": (int, settings.SIM_WORK_START_HOUR),
    "SIM_WORK_END_HOUR": (int, settings.SIM_WORK_END_HOUR),
    "SIM_EVENT_RATE_PER_DAY": (float, settings.SIM_EVENT_RATE_PER_DAY),
    "SIM_BURST_MULTIPLIER": (float, settings.SIM_BURST_MULTIPLIER),
    "SIM_IMAGE_SIZE": (int, settings.SIM_IMAGE_SIZE),
    "SIM_START": (str, "2024-01-01 00:00"),
    # [data]
    "DATA_SOURCE": (str, "simulate"),
    "DATA_TRAFFIC_PATH": (str, ""),
    "DATA_EVENTS_PATH": (str, ""),
    "DATA_IMAGE_PATH": (str, ""),
    "DATA_CELLS_PATH": (str, ""),
    "DATA_HOLIDAYS_PATH": (str, ""),
    "DATA_ADJACENCY_LENGTH_SCALE": (float, settings.DATA_ADJACENCY_LENGTH_SCALE),
    "DATA_TARGET_TRAIN_DAYS": (int, settings.DATA_TARGET_TRAIN_DAYS),
    "DATA_TEST_DAYS": (int, settings.DATA_TEST_DAYS),
    # [window]
    "WINDOW_CLOSENESS": (int, settings.WINDOW_CLOSENESS),
    "WINDOW_PERIOD": (int, settings.WINDOW_PERIOD),
    "WINDOW_CLOSENESS_DAY": (int, settings.WINDOW_CLOSENESS_DAY),
    "WINDOW_PERIOD_DAY": (int, settings.WINDOW_PERIOD_DAY),
    "WINDOW_HORIZON": (int, settings.WINDOW_HORIZON),
    # [model]
    "MODEL_HIDDEN": (int, settings.MODEL_HIDDEN),
    "MODEL_HEADS": (int, settings.MODEL_HEADS),
    "MODEL_BLOCKS": (int, settings.MODEL_BLOCKS),
    "MODEL_DROPOUT": (float, settings.MODEL_DROPOUT),
    "MODEL_CNN_CHANNELS": (int, settings.MODEL_CNN_CHANNELS),
    "MODEL_HEAD_MODE": (str, settings.MODEL_HEAD_MODE),
    # [meta]
    "META_N_TASKS": (int, settings.META_N_TASKS),
    "META_SUPPORT_RATIO": (float, settings.META_SUPPORT_RATIO),
    "META_QUERY_SOURCE": (str, settings.META_QUERY_SOURCE),
    "META_SHIFT_AMPLITUDE": (float, settings.META_SHIFT_AMPLITUDE),
    "META_SHIFT_BASE_LOAD": (float, settings.META_SHIFT_BASE_LOAD),
    "META_SHIFT_NOISE": (float, settings.META_SHIFT_NOISE),
    "META_INNER_STEPS": (int, settings.META_INNER_STEPS),
    "META_INNER_LR": (float, settings.META_INNER_LR),
    "META_CG_STEPS": (int, settings.META_CG_STEPS),
    "META_CG_TOL": (float, settings.META_CG_TOL),
    "META_OUTER_LR": (float, settings.META_OUTER_LR),
    "META_EPOCHS": (int, settings.META_EPOCHS),
    "META_DAMPING": (float, settings.META_DAMPING),
    "META_FINETUNE_STEPS": (int, settings.META_FINETUNE_STEPS),
    "META_FINETUNE_LR": (float, settings.META_FINETUNE_LR),
    "META_REINIT_HEADS": (_bool, settings.META_REINIT_HEADS),
    # [conformal]
    "CONFORMAL_ALPHAS": (_list(float), settings.CONFORMAL_ALPHAS),
    "CONFORMAL_FOLDS": (_list(int), settings.CONFORMAL_FOLDS),
    "CONFORMAL_BONFERRONI": (_bool, settings.CONFORMAL_BONFERRONI),
    # [experiment]
    "EXPERIMENT_KIND": (str, settings.EXPERIMENT_KIND),
    "EXPERIMENT_PREDICTOR": (str, settings.EXPERIMENT_PREDICTOR),
    "EXPERIMENT_RATIOS": (_list(str), settings.EXPERIMENT_RATIOS),
}

_POSITIVE_INT = {"type": "integer", "minimum": 1}
_NONNEG = {"type": "number", "minimum": 0}
_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_RATIO = {"type": "string", "pattern": r"^(real-only|[1-9][0-9]*:1)$"}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "SEED": {"type": "integer", "minimum": 0},
        "SIM_N_BASE_STATIONS": _POSITIVE_INT,
        "SIM_SPACING_M": _POSITIVE,
        "SIM_USERS_PER_SECTOR": _POSITIVE_INT,
        "SIM_HORIZON_HOURS": {"type": "integer", "minimum": 48},
        "SIM_AMPLITUDE_LO": _NONNEG,
        "SIM_AMPLITUDE_HI": _NONNEG,
        "SIM_BASE_LOAD_LO": _NONNEG,
        "SIM_BASE_LOAD_HI": _NONNEG,
        "SIM_NOISE_SIGMA": _NONNEG,
        "SIM_SPEED_M_PER_H": _NONNEG,
        "SIM_WORK_START_HOUR": {"type": "integer", "minimum": 0, "maximum": 24},
        "SIM_WORK_END_HOUR": {"type": "integer", "minimum": 0, "maximum": 24},
        "SIM_EVENT_RATE_PER_DAY": _NONNEG,
        "SIM_BURST_MULTIPLIER": _NONNEG,
        "SIM_IMAGE_SIZE": _POSITIVE_INT,
        "SIM_START": {"type": "string"},
        "DATA_SOURCE": {"type": "string", "enum": ["simulate", "csv"]},
        "DATA_ADJACENCY_LENGTH_SCALE": _POSITIVE,
        "DATA_TARGET_TRAIN_DAYS": _POSITIVE_INT,
        "DATA_TEST_DAYS": _POSITIVE_INT,
        "WINDOW_CLOSENESS": _POSITIVE_INT,
        "WINDOW_PERIOD": _POSITIVE_INT,
        "WINDOW_CLOSENESS_DAY": _POSITIVE_INT,
        "WINDOW_PERIOD_DAY": _POSITIVE_INT,
        "WINDOW_HORIZON": _POSITIVE_INT,
        "MODEL_HIDDEN": _POSITIVE_INT,
        "MODEL_HEADS": _POSITIVE_INT,
        "MODEL_BLOCKS": _POSITIVE_INT,
        "MODEL_DROPOUT": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "MODEL_CNN_CHANNELS": _POSITIVE_INT,
        "MODEL_HEAD_MODE": {"type": "string", "enum": ["matrix", "scalar"]},
        "META_N_TASKS": _POSITIVE_INT,
        "META_SUPPORT_RATIO": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "META_QUERY_SOURCE": {"type": "string", "enum": ["real", "sim"]},
        "META_SHIFT_AMPLITUDE": {"type": "number", "minimum": 0, "maximum": 1},
        "META_SHIFT_BASE_LOAD": {"type": "number", "minimum": 0, "maximum": 1},
        "META_SHIFT_NOISE": {"type": "number", "minimum": 0, "maximum": 1},
        "META_INNER_STEPS": _POSITIVE_INT,
        "META_INNER_LR": _POSITIVE,
        "META_CG_STEPS": _POSITIVE_INT,
        "META_CG_TOL": _NONNEG,
        "META_OUTER_LR": _NONNEG,
        "META_EPOCHS": _POSITIVE_INT,
        "META_DAMPING": _NONNEG,
        "META_FINETUNE_STEPS": {"type": "integer", "minimum": 0},
        "META_FINETUNE_LR": _POSITIVE,
        "META_REINIT_HEADS": {"type": "boolean"},
        "CONFORMAL_ALPHAS": {
            "type": "array", "minItems": 1,
            "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        },
        "CONFORMAL_FOLDS": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 2}},
        "CONFORMAL_BONFERRONI": {"type": "boolean"},
        "EXPERIMENT_KIND": {"type": "string", "enum": sorted(settings.VALID_KINDS)},
        "EXPERIMENT_PREDICTOR": {"type": "string", "enum": sorted(settings.VALID_PREDICTORS)},
        "EXPERIMENT_RATIOS": {"type": "array", "minItems": 1, "items": _RATIO},
    },
    "additionalProperties": {"type": "string"},
}

# Excluded from the config hash: they change where results go, not what they are.
OUTPUT_KEYS = {"OUT", "JOBS"}


def read_config_file(path) -> dict:
    """KEY=VALUE lines; '#' comments and '# [section]' headers are ignored by the parser."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    raw = dotenv_values(path)
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigurationError(f"{path}: unknown config keys {', '.join(unknown)}")
    return {k: v for k, v in raw.items() if v is not None}


def resolve(raw: dict, overrides: dict | None = None) -> dict:
    """Coerce raw strings per CONFIG_KEYS, fill defaults, apply typed overrides."""
    document = {}
    for key, (parse, default) in CONFIG_KEYS.items():
        if key in raw:
            try:
                value = parse(raw[key])
            except ValueError as e:
                raise ConfigurationError(f"{key}: cannot parse {raw[key]!r} ({e})")
        else:
            value = default
        document[key] = list(value) if isinstance(value, (list, tuple)) else value
    for key, value in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"unknown override {key}")
        if value is not None:
            document[key] = value
    return document


def validate_document(document: dict) -> None:
    try:
        validate(instance=document, schema=CONFIG_SCHEMA)
    except ValidationError as e:
        key = e.path[0] if e.path else "config"
        raise ConfigurationError(f"{key}: {e.message}")

    if document["SIM_AMPLITUDE_HI"] < document["SIM_AMPLITUDE_LO"]:
        raise ConfigurationError("SIM_AMPLITUDE_HI: must be >= SIM_AMPLITUDE_LO")
    if document["SIM_BASE_LOAD_HI"] < document["SIM_BASE_LOAD_LO"]:
        raise ConfigurationError("SIM_BASE_LOAD_HI: must be >= SIM_BASE_LOAD_LO")
    if document["SIM_WORK_END_HOUR"] <= document["SIM_WORK_START_HOUR"]:
        raise ConfigurationError("SIM_WORK_END_HOUR: must be > SIM_WORK_START_HOUR")
    if document["MODEL_HIDDEN"] % document["MODEL_HEADS"]:
        raise ConfigurationError("MODEL_HEADS: must divide MODEL_HIDDEN")
    if document["DATA_SOURCE"] == "csv":
        if not document["DATA_TRAFFIC_PATH"]:
            raise ConfigurationError("DATA_TRAFFIC_PATH: required when DATA_SOURCE=csv")
        for key in ("DATA_TRAFFIC_PATH", "DATA_EVENTS_PATH", "DATA_IMAGE_PATH", "DATA_CELLS_PATH"):
            if document[key] and not Path(document[key]).is_file():
                raise ConfigurationError(f"{key}: {document[key]} does not exist")
    if document["DATA_HOLIDAYS_PATH"] and not Path(document["DATA_HOLIDAYS_PATH"]).is_file():
        raise ConfigurationError(f"DATA_HOLIDAYS_PATH: {document['DATA_HOLIDAYS_PATH']} does not exist")


def build_config(document: dict) -> ExperimentConfig:
    d = document
    try:
        sim = SimConfig(
            n_base_stations=d["SIM_N_BASE_STATIONS"],
            spacing=d["SIM_SPACING_M"],
            users_per_sector=d["SIM_USERS_PER_SECTOR"],
            horizon_hours=d["SIM_HORIZON_HOURS"],
            amplitude_lo=d["SIM_AMPLITUDE_LO"],
            amplitude_hi=d["SIM_AMPLITUDE_HI"],
            base_load_lo=d["SIM_BASE_LOAD_LO"],
            base_load_hi=d["SIM_BASE_LOAD_HI"],
            noise_sigma=d["SIM_NOISE_SIGMA"],
            speed=d["SIM_SPEED_M_PER_H"],
            work_start=d["SIM_WORK_START_HOUR"],
            work_end=d["SIM_WORK_END_HOUR"],
            event_rate=d["SIM_EVENT_RATE_PER_DAY"],
            burst_multiplier=d["SIM_BURST_MULTIPLIER"],
            image_size=d["SIM_IMAGE_SIZE"],
            seed=d["SEED"],
            start=d["SIM_START"],
        )
        meta = MetaConfig(
            inner_steps=d["META_INNER_STEPS"],
            inner_lr=d["META_INNER_LR"],
            cg_steps=d["META_CG_STEPS"],
            cg_tol=d["META_CG_TOL"],
            outer_lr=d["META_OUTER_LR"],
            epochs=d["META_EPOCHS"],
            damping=d["META_DAMPING"],
            finetune_steps=d["META_FINETUNE_STEPS"],
            finetune_lr=d["META_FINETUNE_LR"],
            reinit_heads=d["META_REINIT_HEADS"],
        )
        horizon = d["WINDOW_HORIZON"]
        return ExperimentConfig(
            seed=d["SEED"],
            sim=sim,
            data_source=d["DATA_SOURCE"],
            traffic_path=d["DATA_TRAFFIC_PATH"],
            events_path=d["DATA_EVENTS_PATH"],
            image_path=d["DATA_IMAGE_PATH"],
            cells_path=d["DATA_CELLS_PATH"],
            holidays_path=d["DATA_HOLIDAYS_PATH"],
            length_scale=d["DATA_ADJACENCY_LENGTH_SCALE"],
            target_train_days=d["DATA_TARGET_TRAIN_DAYS"],
            test_days=d["DATA_TEST_DAYS"],
            window=WindowSpec(closeness=d["WINDOW_CLOSENESS"], period=d["WINDOW_PERIOD"], horizon=horizon),
            window_day=WindowSpec(closeness=d["WINDOW_CLOSENESS_DAY"], period=d["WINDOW_PERIOD_DAY"], horizon=24),
            model={
                "hidden": d["MODEL_HIDDEN"],
                "heads": d["MODEL_HEADS"],
                "blocks": d["MODEL_BLOCKS"],
                "dropout": d["MODEL_DROPOUT"],
                "cnn_channels": d["MODEL_CNN_CHANNELS"],
                "head_mode": d["MODEL_HEAD_MODE"],
            },
            meta=meta,
            n_tasks=d["META_N_TASKS"],
            support_ratio=d["META_SUPPORT_RATIO"],
            query_source=d["META_QUERY_SOURCE"],
            shift=ShiftSpec(
                amplitude=d["META_SHIFT_AMPLITUDE"],
                base_load=d["META_SHIFT_BASE_LOAD"],
                noise=d["META_SHIFT_NOISE"],
            ),
            alphas=tuple(d["CONFORMAL_ALPHAS"]),
            folds=tuple(d["CONFORMAL_FOLDS"]),
            bonferroni=d["CONFORMAL_BONFERRONI"],
            kind=d["EXPERIMENT_KIND"],
            predictor=d["EXPERIMENT_PREDICTOR"],
            ratios=tuple(d["EXPERIMENT_RATIOS"]),
            document=dict(d),
        )
    except ConfigurationError:
        raise
    except (KeyError, TypeError) as e:
        raise ConfigurationError(f"incomplete config: {e}")


def load_experiment_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """
    Parse, coerce and validate one experiment file (or the defaults alone when
    `path` is None). Raises ConfigurationError naming the offending key.
    """
    raw = read_config_file(path) if path is not None else {}
    document = resolve(raw, overrides)
    validate_document(document)
    cfg = build_config(document)
    logger.info(f"Experiment config {experiment_hash(cfg)[:10]}: kind={cfg.kind}, seed={cfg.seed}")
    return cfg


def experiment_hash(cfg: ExperimentConfig) -> str:
    return config_hash({k: v for k, v in cfg.document.items() if k not in OUTPUT_KEYS})
