import logging
import math
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from core.data_pipeline import (
    build_adjacency,
    build_exogenous,
    fit_normalizer,
    make_windows,
    split_support_query,
    support_count,
)
from core.exceptions import ConfigurationError
from db.models import (
    MetaDataset,
    ShiftSpec,
    SeriesFrame,
    SimConfig,
    SimOutput,
    TaskDataset,
    UserState,
    WindowSpec,
)
from utils.rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

SECTOR_WIDTH_DEG = 120.0

# RNG substreams of one simulation run
_USERS, _EVENTS, _NOISE = 0, 1, 2


# --- Geometry ---

def bearing_deg(dx: float, dy: float) -> float:
    """Compass bearing of (dx, dy): 0 = north (+y), clockwise, in [0, 360)."""
    return math.degrees(math.atan2(dx, dy)) % 360.0


def sector_of(bearing: float) -> int:
    # Sector k is centred on k * 120 degrees.
    return int(((bearing + SECTOR_WIDTH_DEG / 2) % 360.0) // SECTOR_WIDTH_DEG)


def place_base_stations(cfg: SimConfig) -> np.ndarray:
    side = cfg.grid_side
    positions = [
        ((idx % side + 0.5) * cfg.spacing, (idx // side + 0.5) * cfg.spacing)
        for idx in range(cfg.n_base_stations)
    ]
    return np.asarray(positions, dtype=np.float64)


def sector_positions(bs_positions: np.ndarray, spacing: float, sectors: int = 3) -> np.ndarray:
    """Nominal cell location: the BS shifted a quarter spacing along the sector azimuth."""
    offset = spacing / 4.0
    rows = []
    for x, y in bs_positions:
        for k in range(sectors):
            az = math.radians(k * SECTOR_WIDTH_DEG)
            rows.append((x + offset * math.sin(az), y + offset * math.cos(az)))
    return np.asarray(rows, dtype=np.float64)


def handover(user: UserState, bs_positions: np.ndarray) -> int:
    """
    Cell serving `user`: nearest base station (lowest id on ties), sector whose
    120 degree wedge contains the bearing from the station to the user.
    """
    bs_positions = np.asarray(bs_positions, dtype=np.float64).reshape(-1, 2)
    if bs_positions.shape[0] == 0:
        raise ConfigurationError("handover needs at least one base station")
    dist2 = (bs_positions[:, 0] - user.x) ** 2 + (bs_positions[:, 1] - user.y) ** 2
    bs = int(np.argmin(dist2))      # first minimum
    dx, dy = user.x - bs_positions[bs, 0], user.y - bs_positions[bs, 1]
    return 3 * bs + sector_of(bearing_deg(dx, dy))


# --- Users ---

def user_traffic(t: float, user: UserState, sigma: float, rng: np.random.Generator) -> float:
    """Seasonal plus Gaussian term, clipped at zero. One normal draw per call, also when sigma is 0."""
    noise = rng.normal(0.0, sigma)
    # Reduce t first so that t and t + 24 evaluate identically.
    seasonal = user.amplitude * math.sin(2.0 * math.pi * (math.fmod(t, 24.0) + user.phase) / 24.0)
    return max(0.0, user.base_load + seasonal + noise)


def _fold(value: float, extent: float) -> tuple[float, bool]:
    # Mirror a coordinate back into [0, extent]; True after an odd number of wall hits.
    if 0.0 <= value <= extent:
        return value, False
    period = 2.0 * extent
    value = value % period
    if value > extent:
        return period - value, True
    return value, False


def is_working_hour(hour_of_day: int, cfg: SimConfig) -> bool:
    return cfg.work_start <= hour_of_day % 24 < cfg.work_end


def step_mobility(user: UserState, hour_of_day: int, dt: float, cfg: SimConfig) -> UserState:
    """
    Move a user for `dt` hours. Users walk only during working hours; a user
    crossing the boundary is mirrored back inside and its heading is reflected
    off the wall it hit.
    """
    if dt <= 0:
        raise ConfigurationError(f"mobility step must be positive, got {dt}")
    if not is_working_hour(hour_of_day, cfg) or cfg.speed == 0:
        return user

    extent = cfg.extent
    x = user.x + cfg.speed * dt * math.cos(user.heading)
    y = user.y + cfg.speed * dt * math.sin(user.heading)
    x, flip_x = _fold(x, extent)
    y, flip_y = _fold(y, extent)
    heading = user.heading
    if flip_x or flip_y:
        vx, vy = math.cos(heading), math.sin(heading)
        heading = math.atan2(-vy if flip_y else vy, -vx if flip_x else vx) % (2.0 * math.pi)
    return user.moved(x=x, y=y, heading=heading)


def spawn_users(cfg: SimConfig, bs_positions: np.ndarray, rng: np.random.Generator) -> list[UserState]:
    """U users per sector, placed within half a spacing of their station inside the sector wedge."""
    users = []
    for bs, (bx, by) in enumerate(bs_positions):
        for sector in range(cfg.sectors_per_bs):
            centre = sector * SECTOR_WIDTH_DEG
            for _ in range(cfg.users_per_sector):
                radius = 0.5 * cfg.spacing * math.sqrt(rng.uniform())
                bearing = math.radians(centre + rng.uniform(-60.0, 60.0))
                user = UserState(
                    x=bx + radius * math.sin(bearing),
                    y=by + radius * math.cos(bearing),
                    heading=rng.uniform(0.0, 2.0 * math.pi),
                    amplitude=rng.uniform(cfg.amplitude_lo, cfg.amplitude_hi),
                    phase=rng.uniform(0.0, 24.0),
                    base_load=rng.uniform(cfg.base_load_lo, cfg.base_load_hi),
                )
                users.append(user.moved(cell_id=handover(user, bs_positions)))
    return users


# --- Exogenous modalities ---

def draw_events(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """T x B flags; per day a Poisson number of one-hour events at random stations."""
    flags = np.zeros((cfg.horizon_hours, cfg.n_base_stations), dtype=np.float64)
    n_days = math.ceil(cfg.horizon_hours / 24)
    for day in range(n_days):
        for _ in range(rng.poisson(cfg.event_rate)):
            t = day * 24 + int(rng.integers(0, 24))
            bs = int(rng.integers(0, cfg.n_base_stations))
            if t < cfg.horizon_hours:
                flags[t, bs] = 1.0
    return flags


def render_image(cfg: SimConfig, bs_positions: np.ndarray) -> np.ndarray:
    """W x H x 2 map: channel 0 base-station density, channel 1 road mask along the grid lines."""
    size, extent = cfg.image_size, cfg.extent
    centres = (np.arange(size) + 0.5) * extent / size
    gx, gy = np.meshgrid(centres, centres, indexing="ij")

    density = np.zeros((size, size))
    bandwidth = 0.5 * cfg.spacing
    for bx, by in bs_positions:
        density += np.exp(-((gx - bx) ** 2 + (gy - by) ** 2) / (2.0 * bandwidth ** 2))
    density /= density.max()

    lines = np.arange(cfg.grid_side + 1) * cfg.spacing
    pixel = extent / size
    near_x = np.min(np.abs(gx[..., None] - lines), axis=-1) < pixel
    near_y = np.min(np.abs(gy[..., None] - lines), axis=-1) < pixel
    roads = (near_x | near_y).astype(np.float64)

    return np.stack([density, roads], axis=-1)


# --- Simulation ---

def run(cfg: SimConfig, users: Optional[Sequence[UserState]] = None) -> SimOutput:
    """
    Hour-by-hour simulation. Each hour every user emits traffic into its
    attached cell, bursts scale users behind a station with an active event,
    then users move and hand over.
    """
    bs_positions = place_base_stations(cfg)
    users = list(users) if users is not None else spawn_users(cfg, bs_positions, make_rng(cfg.seed, _USERS))
    users = [u.moved(cell_id=handover(u, bs_positions)) for u in users]
    events = draw_events(cfg, make_rng(cfg.seed, _EVENTS))
    noise_rng = make_rng(cfg.seed, _NOISE)

    timestamps = pd.date_range(cfg.start, periods=cfg.horizon_hours, freq="h")
    start_hour = timestamps[0].hour
    traffic = np.zeros((cfg.horizon_hours, cfg.n_cells))
    user_totals = np.zeros(cfg.horizon_hours)

    for t in range(cfg.horizon_hours):
        volumes = []
        for user in users:
            volume = user_traffic(t, user, cfg.noise_sigma, noise_rng)
            if events[t, user.cell_id // 3]:
                volume *= cfg.burst_multiplier
            traffic[t, user.cell_id] += volume
            volumes.append(volume)
        user_totals[t] = math.fsum(volumes)
        hour_of_day = (start_hour + t) % 24
        users = [step_mobility(u, hour_of_day, 1.0, cfg) for u in users]
        users = [u.moved(cell_id=handover(u, bs_positions)) for u in users]

    logger.info(
        f"Simulated {cfg.horizon_hours} h over {cfg.n_cells} cells "
        f"({len(users)} users, {int(events.sum())} events)"
    )
    return SimOutput(
        timestamps=timestamps,
        traffic=traffic,
        event_flags=events,
        image=render_image(cfg, bs_positions),
        cell_positions=sector_positions(bs_positions, cfg.spacing, cfg.sectors_per_bs),
        bs_positions=bs_positions,
        user_totals=user_totals,
    )


def to_series_frame(out: SimOutput) -> SeriesFrame:
    return SeriesFrame(out.timestamps, out.traffic, out.cell_ids)


# --- Meta tasks ---

def perturb_config(cfg: SimConfig, shift: ShiftSpec, rng: np.random.Generator, seed: int) -> SimConfig:
    """Scale amplitude range, base load range and noise by factors drawn from 1 +/- shift."""
    def factor(width: float) -> float:
        return 1.0 + rng.uniform(-width, width) if width > 0 else 1.0

    amp, load, noise = factor(shift.amplitude), factor(shift.base_load), factor(shift.noise)
    return replace(
        cfg,
        amplitude_lo=cfg.amplitude_lo * amp,
        amplitude_hi=cfg.amplitude_hi * amp,
        base_load_lo=cfg.base_load_lo * load,
        base_load_hi=cfg.base_load_hi * load,
        noise_sigma=cfg.noise_sigma * noise,
        seed=seed,
    )


def simulate_task(name: str, cfg: SimConfig, spec: WindowSpec, support_ratio: float,
                  holidays=frozenset(), length_scale: float = 500.0) -> TaskDataset:
    out = run(cfg)
    frame = to_series_frame(out)
    exog = build_exogenous(out.event_flags, out.timestamps, holidays)
    n_windows = len(frame) - spec.min_length() + 1
    n_support = support_count(n_windows, support_ratio)
    # Scale from the rows the support windows can see.
    support_rows = spec.first_anchor + spec.horizon + max(n_support, 1)
    normalizer = fit_normalizer(frame.slice(0, support_rows))
    windows = make_windows(normalizer.apply_frame(frame), exog, spec, image=out.image)
    support, query = split_support_query(windows, support_ratio)
    return TaskDataset(
        name=name,
        support=support,
        query=query,
        adjacency=build_adjacency(out.cell_positions, length_scale).matrix,
        normalizer=normalizer,
    )


def make_meta_tasks(cfg: SimConfig, n_tasks: int, shift: ShiftSpec, spec: WindowSpec,
                    support_ratio: float = 0.8, holidays=frozenset(),
                    length_scale: float = 500.0) -> MetaDataset:
    """
    N auxiliary tasks from perturbed copies of `cfg`. Task i simulates on its
    own seed derived from (cfg.seed, i), so the RNG streams never overlap.
    """
    if n_tasks < 1:
        raise ConfigurationError(f"need at least one auxiliary task, got {n_tasks}")
    tasks = []
    for i in range(n_tasks):
        task_seed = derive_seed(cfg.seed, 100, i)
        task_cfg = perturb_config(cfg, shift, make_rng(cfg.seed, 101, i), task_seed)
        tasks.append(simulate_task(f"sim-{i}", task_cfg, spec, support_ratio, holidays, length_scale))
        logger.info(
            f"Task sim-{i}: amplitude [{task_cfg.amplitude_lo:.3f}, {task_cfg.amplitude_hi:.3f}], "
            f"sigma {task_cfg.noise_sigma:.3f}, {len(tasks[-1].support)}/{len(tasks[-1].query)} windows"
        )
    return MetaDataset(tasks=tasks)
