import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
env_path = Path(__file__).parent / '.env'
load_dotenv(dotenv_path=env_path)


def _float_list(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip()]


def _int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


# --- Project Paths ---
BASE_DIR = Path(__file__).parent.parent
DB_PATH = Path(os.getenv("RUNS_DB_PATH", str(BASE_DIR / "metastnet_runs.db")))
LOG_DIR = Path(os.getenv("LOG_DIR", str(BASE_DIR / "logs")))
DEFAULT_OUT_DIR = Path(os.getenv("OUT_DIR", str(BASE_DIR / "out")))

# --- Reproducibility ---
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "20240101"))
# Bit-identical reruns need a fixed intra-op thread count.
TORCH_NUM_THREADS = int(os.getenv("TORCH_NUM_THREADS", "1"))

# --- Simulator ---
SIM_N_BASE_STATIONS = int(os.getenv("SIM_N_BASE_STATIONS", "4"))
SIM_SPACING_M = float(os.getenv("SIM_SPACING_M", "500"))
SIM_USERS_PER_SECTOR = int(os.getenv("SIM_USERS_PER_SECTOR", "5"))
SIM_HORIZON_HOURS = int(os.getenv("SIM_HORIZON_HOURS", "672"))  # 4 weeks
SIM_AMPLITUDE_LO = float(os.getenv("SIM_AMPLITUDE_LO", "0.5"))
SIM_AMPLITUDE_HI = float(os.getenv("SIM_AMPLITUDE_HI", "2.0"))
SIM_BASE_LOAD_LO = float(os.getenv("SIM_BASE_LOAD_LO", "1.0"))
SIM_BASE_LOAD_HI = float(os.getenv("SIM_BASE_LOAD_HI", "3.0"))
SIM_NOISE_SIGMA = float(os.getenv("SIM_NOISE_SIGMA", "0.2"))
SIM_SPEED_M_PER_H = float(os.getenv("SIM_SPEED_M_PER_H", "300"))
SIM_WORK_START_HOUR = 8
SIM_WORK_END_HOUR = 18
SIM_EVENT_RATE_PER_DAY = float(os.getenv("SIM_EVENT_RATE_PER_DAY", "0.5"))
SIM_BURST_MULTIPLIER = float(os.getenv("SIM_BURST_MULTIPLIER", "1.8"))
SIM_IMAGE_SIZE = int(os.getenv("SIM_IMAGE_SIZE", "16"))

# --- Meta Tasks ---
META_N_TASKS = int(os.getenv("META_N_TASKS", "4"))
META_SUPPORT_RATIO = float(os.getenv("META_SUPPORT_RATIO", "0.8"))
META_QUERY_SOURCE = os.getenv("META_QUERY_SOURCE", "real")  # 'real' or 'sim'
META_SHIFT_AMPLITUDE = float(os.getenv("META_SHIFT_AMPLITUDE", "0.2"))
META_SHIFT_BASE_LOAD = float(os.getenv("META_SHIFT_BASE_LOAD", "0.2"))
META_SHIFT_NOISE = float(os.getenv("META_SHIFT_NOISE", "0.5"))

# --- Data / Windows ---
DATA_ADJACENCY_LENGTH_SCALE = float(os.getenv("DATA_ADJACENCY_LENGTH_SCALE", "500"))
DATA_TARGET_TRAIN_DAYS = int(os.getenv("DATA_TARGET_TRAIN_DAYS", "14"))
DATA_TEST_DAYS = int(os.getenv("DATA_TEST_DAYS", "7"))
WINDOW_CLOSENESS = 3   # one-hour-ahead closeness / period lags
WINDOW_PERIOD = 3
WINDOW_CLOSENESS_DAY = 6   # one-day-ahead lags
WINDOW_PERIOD_DAY = 6
WINDOW_HORIZON = int(os.getenv("WINDOW_HORIZON", "1"))

# --- Model ---
# Desk-scale defaults; full-scale runs use width 128, 8 heads, 2 ST-blocks.
MODEL_HIDDEN = int(os.getenv("MODEL_HIDDEN", "16"))
MODEL_HEADS = int(os.getenv("MODEL_HEADS", "4"))
MODEL_BLOCKS = int(os.getenv("MODEL_BLOCKS", "2"))
MODEL_DROPOUT = float(os.getenv("MODEL_DROPOUT", "0.05"))
MODEL_CNN_CHANNELS = int(os.getenv("MODEL_CNN_CHANNELS", "4"))
MODEL_HEAD_MODE = os.getenv("MODEL_HEAD_MODE", "matrix")  # 'matrix' or 'scalar'

# --- Meta Training ---
META_INNER_STEPS = int(os.getenv("META_INNER_STEPS", "5"))
META_INNER_LR = float(os.getenv("META_INNER_LR", "0.01"))
META_CG_STEPS = int(os.getenv("META_CG_STEPS", "10"))
META_CG_TOL = float(os.getenv("META_CG_TOL", "1e-10"))
META_OUTER_LR = float(os.getenv("META_OUTER_LR", "0.001"))
META_EPOCHS = int(os.getenv("META_EPOCHS", "200"))  # full-scale runs use 2000
META_DAMPING = float(os.getenv("META_DAMPING", "1e-4"))
META_FINETUNE_STEPS = int(os.getenv("META_FINETUNE_STEPS", "200"))
META_FINETUNE_LR = float(os.getenv("META_FINETUNE_LR", "0.001"))
META_REINIT_HEADS = os.getenv("META_REINIT_HEADS", "false").lower() == "true"
# Training aborts once a loss crosses this bound.
DIVERGENCE_LOSS_LIMIT = 1e12

# --- Conformal ---
CONFORMAL_ALPHAS = _float_list(os.getenv("CONFORMAL_ALPHAS", "0.05,0.15,0.25"))
CONFORMAL_FOLDS = _int_list(os.getenv("CONFORMAL_FOLDS", "2,5,10"))
CONFORMAL_BONFERRONI = os.getenv("CONFORMAL_BONFERRONI", "false").lower() == "true"

# --- Experiment ---
EXPERIMENT_KIND = os.getenv("EXPERIMENT_KIND", "point")
EXPERIMENT_PREDICTOR = os.getenv("EXPERIMENT_PREDICTOR", "metastnet")
EXPERIMENT_RATIOS = ["real-only", "1:1", "2:1", "3:1", "4:1", "8:1"]
VALID_KINDS = {"point", "ablation", "ratio-sweep", "interval-sweep"}
VALID_PREDICTORS = {"metastnet", "persistence", "seasonal"}
