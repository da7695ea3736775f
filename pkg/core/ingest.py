import logging
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

from core.exceptions import IngestionError
from db.models import SeriesFrame

logger = logging.getLogger(__name__)

TRAFFIC_COLUMNS = ["timestamp", "cell_id", "volume"]
IMAGE_COLUMNS = ["w", "h", "c", "value"]
CELL_COLUMNS = ["cell_id", "x", "y"]
TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
FLOAT_FORMAT = "%.17g"


def _read_csv(path, expected: list[str]) -> pd.DataFrame:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise IngestionError(f"{path}: unreadable CSV ({e})")
    if list(df.columns) != expected:
        raise IngestionError(f"{path}: header must be {','.join(expected)}, got {','.join(df.columns)}")
    return df


def _file_row(index: int) -> int:
    # 1-based line number in the file, counting the header
    return int(index) + 2


def _to_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        return np.nan


def _numeric(df: pd.DataFrame, column: str, path) -> pd.Series:
    # Python's float() is correctly rounded, so %.17g text reads back bit-exact.
    values = df[column].map(_to_float).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any():
        idx = bad.idxmax()
        raise IngestionError(f"{path}: row {_file_row(idx)} has non-numeric {column} {df[column][idx]!r}")
    return values.astype(np.float64)


def _timestamps(df: pd.DataFrame, path) -> pd.Series:
    parsed = pd.to_datetime(df["timestamp"], errors="coerce", format="mixed")
    if parsed.isna().any():
        idx = parsed.isna().idxmax()
        raise IngestionError(f"{path}: row {_file_row(idx)} has unparseable timestamp {df['timestamp'][idx]!r}")
    return parsed


def _check_hourly(index: pd.DatetimeIndex, path):
    if len(index) > 1:
        steps = np.diff(index.asi8)
        hour = pd.Timedelta(hours=1).value
        if np.any(steps != hour):
            pos = int(np.argmax(steps != hour)) + 1
            raise IngestionError(f"{path}: series is not gap-free hourly at {index[pos]}")


# --- Traffic ---

def load_traffic_csv(path) -> SeriesFrame:
    """Long `timestamp,cell_id,volume` rows into a dense T x D frame."""
    df = _read_csv(path, TRAFFIC_COLUMNS)
    if df.empty:
        raise IngestionError(f"{path}: no traffic rows")
    ts = _timestamps(df, path)
    volume = _numeric(df, "volume", path)
    cell = df["cell_id"].str.strip()

    backwards = ts.diff() < pd.Timedelta(0)
    if backwards.any():
        idx = backwards.idxmax()
        raise IngestionError(f"{path}: row {_file_row(idx)} has a timestamp earlier than the row before it")
    dup = pd.DataFrame({"ts": ts, "cell": cell}).duplicated()
    if dup.any():
        idx = dup.idxmax()
        raise IngestionError(f"{path}: row {_file_row(idx)} duplicates ({df['timestamp'][idx]}, {cell[idx]})")

    long = pd.DataFrame({"timestamp": ts, "cell_id": cell, "volume": volume})
    cell_ids = list(dict.fromkeys(cell))
    wide = long.pivot(index="timestamp", columns="cell_id", values="volume").reindex(columns=cell_ids)
    if wide.isna().any().any():
        t_missing, c_missing = np.argwhere(wide.isna().to_numpy())[0]
        raise IngestionError(
            f"{path}: ragged data, no row for ({wide.index[t_missing]}, {cell_ids[c_missing]})"
        )
    index = pd.DatetimeIndex(wide.index)
    _check_hourly(index, path)
    cell_ids = [int(c) if c.lstrip("-").isdigit() else c for c in cell_ids]
    logger.info(f"Loaded {len(index)} hours x {len(cell_ids)} cells from {path}")
    return SeriesFrame(index, wide.to_numpy(dtype=np.float64), cell_ids)


def write_traffic_csv(path, frame: SeriesFrame):
    n_rows, n_cells = frame.values.shape
    df = pd.DataFrame({
        "timestamp": np.repeat(frame.timestamps.strftime(TIMESTAMP_FORMAT).to_numpy(), n_cells),
        "cell_id": np.tile(np.asarray(frame.cell_ids, dtype=object), n_rows),
        "volume": frame.values.reshape(-1),
    })
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


# --- Events ---

def write_events_csv(path, timestamps: pd.DatetimeIndex, flags: np.ndarray):
    flags = np.asarray(flags, dtype=np.float64)
    df = pd.DataFrame(flags, columns=[f"event_{i}" for i in range(flags.shape[1])])
    df.insert(0, "timestamp", pd.DatetimeIndex(timestamps).strftime(TIMESTAMP_FORMAT))
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def load_events_csv(path) -> tuple[pd.DatetimeIndex, np.ndarray]:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if not len(df.columns) or df.columns[0] != "timestamp":
        raise IngestionError(f"{path}: first column must be timestamp")
    ts = _timestamps(df, path)
    columns = [_numeric(df, c, path) for c in df.columns[1:]]
    flags = np.stack(columns, axis=1) if columns else np.zeros((len(df), 0))
    return pd.DatetimeIndex(ts), flags


# --- Image ---

def write_image_csv(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.float64)
    w, h, c = np.indices(image.shape)
    df = pd.DataFrame({"w": w.ravel(), "h": h.ravel(), "c": c.ravel(), "value": image.ravel()})
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def load_image_csv(path) -> np.ndarray:
    df = _read_csv(path, IMAGE_COLUMNS)
    coords = {col: _numeric(df, col, path).astype(int).to_numpy() for col in ("w", "h", "c")}
    values = _numeric(df, "value", path)
    shape = tuple(int(coords[col].max()) + 1 for col in ("w", "h", "c"))
    image = np.full(shape, np.nan)
    image[coords["w"], coords["h"], coords["c"]] = values
    if np.isnan(image).any():
        raise IngestionError(f"{path}: image grid {shape} is incomplete")
    return image


# --- Cells / holidays ---

def write_cells_csv(path, positions: np.ndarray, cell_ids=None):
    positions = np.asarray(positions, dtype=np.float64)
    ids = list(range(len(positions))) if cell_ids is None else list(cell_ids)
    pd.DataFrame({"cell_id": ids, "x": positions[:, 0], "y": positions[:, 1]}).to_csv(
        path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )


def load_cells_csv(path) -> np.ndarray:
    df = _read_csv(path, CELL_COLUMNS)
    return np.stack([_numeric(df, "x", path), _numeric(df, "y", path)], axis=1)


def load_holidays(path) -> frozenset:
    """Newline-delimited ISO-8601 dates; blank lines and '#' comments are skipped."""
    days = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            days.add(date.fromisoformat(line))
        except ValueError:
            raise IngestionError(f"{path}: line {lineno} is not an ISO date: {line!r}")
    return frozenset(days)
