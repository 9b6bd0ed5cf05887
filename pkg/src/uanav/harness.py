"""Closed-loop evaluation: predict -> plan -> step at 0.4 s, plus metrics and trace I/O."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics
from .planner import PlannerConfig, plan_step
from .predictor import (
    FUTURE_LEN,
    HISTORY_LEN,
    Ensemble,
    GaussianForecast,
    observations_from_positions,
    predict_batch,
)
from .tracks import PedTrack

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "uanav-trace/1"
COLD_START_STD = 0.05
METRIC_FIELDS = (
    "trajectory_length",
    "total_time",
    "min_distance",
    "avg_compute_ms",
    "success",
    "failure_reason",
)


@dataclass
class Scenario:
    name: str
    tracks: list[PedTrack]
    start: np.ndarray
    goal: np.ndarray
    max_sim_time: float = 30.0
    seed: int = 0
    y_bounds: tuple | None = None

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.goal = np.asarray(self.goal, dtype=float)
        if self.start.shape != (dynamics.STATE_DIM,):
            raise ValueError("scenario start must be a 7-state vector")
        if self.goal.shape != (2,) or not np.all(np.isfinite(self.goal)):
            raise ValueError("scenario goal must be a finite 2-vector")


@dataclass
class EpisodeTrace:
    header: dict
    records: list[dict] = field(default_factory=list)


@dataclass
class MetricsReport:
    trajectory_length: float
    total_time: float
    min_distance: float
    avg_compute_ms: float
    success: bool
    failure_reason: str | None = None

    def as_row(self) -> dict:
        return asdict(self)


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario sampling from recorded tracks


def spawn_scenario(
    tracks: list[PedTrack],
    count: int = 20,
    seed: int = 0,
    start=(0.0, 0.0),
    goal=(12.0, 0.0),
    max_sim_time: float = 30.0,
    dt: float = 0.4,
    name: str = "dataset",
) -> Scenario:
    """Pick ``count`` usable tracks and place them around the start-goal segment.

    Each selected track is time-shifted to enter within the episode window
    (possibly with pre-roll so it already has history at t = 0) and
    translated so its mid-point lands near a random point of the robot's
    straight path. Selection and placement depend only on ``seed``.
    """
    usable = [t for t in tracks if len(t) >= HISTORY_LEN + 1]
    if len(usable) < count:
        raise ScenarioError(f"requested {count} pedestrian tracks but only {len(usable)} are usable")
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(usable), size=count, replace=False))
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    max_steps = int(round(max_sim_time / dt))
    robot = np.zeros(dynamics.STATE_DIM)
    robot[:2] = start
    robot[dynamics.PHI] = math.atan2(*(goal - start)[::-1])
    out = []
    for new_id, idx in enumerate(chosen):
        tr = usable[idx]
        n = len(tr)
        for _attempt in range(100):
            mid_step = int(rng.integers(0, max(1, max_steps - 10)))
            first = mid_step - n // 2
            anchor = start + rng.uniform(0.1, 0.9) * (goal - start) + rng.normal(0.0, 1.0, size=2)
            offset = anchor - tr.positions[n // 2]
            cand = PedTrack(new_id, tr.positions + offset, first)
            if not cand.active(0) or np.hypot(*(cand.position(0) - start)) > 1.5:
                break
        out.append(cand)
    return Scenario(name, out, robot, goal, max_sim_time, seed)


# ---------------------------------------------------------------------------
# forecasting inside the loop


def constant_velocity_forecast(observed: np.ndarray, ped_id: int, step: int, horizon: int, dt: float) -> GaussianForecast:
    last = observed[-1]
    vel = (observed[-1] - observed[-2]) / dt if len(observed) >= 2 else np.zeros(2)
    k = np.arange(1, horizon + 1)
    means = last + (k * dt)[:, None] * vel
    covs = np.zeros((horizon, 2, 2))
    covs[:, 0, 0] = covs[:, 1, 1] = COLD_START_STD**2 * k
    return GaussianForecast(means, covs, ped_id, step, current=last)


def forecast_pedestrians(
    tracks: list[PedTrack],
    step: int,
    ensemble: Ensemble | None,
    dt: float = 0.4,
    deterministic: bool = False,
) -> list[GaussianForecast]:
    """Forecasts for every pedestrian active at ``step``.

    Pedestrians with at least 8 observations go through the ensemble; the
    rest (or all of them when ``ensemble`` is None) get a constant-velocity
    forecast with a small growing covariance.
    """
    out: list[GaussianForecast | None] = []
    nn_idx, nn_hist = [], []
    active = [t for t in tracks if t.active(step)]
    for tr in active:
        obs = tr.observed(step)
        if ensemble is not None and len(obs) >= HISTORY_LEN:
            nn_idx.append(len(out))
            nn_hist.append(observations_from_positions(obs[-(HISTORY_LEN + 1) :], dt)[-HISTORY_LEN:])
            out.append(None)
        else:
            out.append(constant_velocity_forecast(obs, tr.ped_id, step, FUTURE_LEN, dt))
    if nn_idx:
        mu, var = predict_batch(ensemble, np.stack(nn_hist))
        for j, i in enumerate(nn_idx):
            covs = np.zeros((mu.shape[1], 2, 2))
            covs[:, 0, 0] = var[j, :, 0]
            covs[:, 1, 1] = var[j, :, 1]
            tr = active[i]
            out[i] = GaussianForecast(mu[j], covs, tr.ped_id, step, current=nn_hist[j][-1, :2])
    if deterministic:
        out = [f.deterministic() for f in out]
    return out


# ---------------------------------------------------------------------------
# episode loop


def _ped_positions(tracks, step) -> dict[int, list[float]]:
    return {str(t.ped_id): [float(v) for v in t.position(step)] for t in tracks if t.active(step)}


def run_episode(
    scenario: Scenario,
    ensemble: Ensemble | None,
    config: PlannerConfig,
    deterministic: bool = False,
    header_extra: dict | None = None,
) -> tuple[EpisodeTrace, MetricsReport]:
    cfg = config.with_(
        goal=tuple(float(v) for v in scenario.goal),
        y_bounds=scenario.y_bounds if scenario.y_bounds is not None else config.y_bounds,
    )
    geo = cfg.geometry
    header = {
        "schema": TRACE_SCHEMA,
        "scenario": scenario.name,
        "seed": scenario.seed,
        "mode": cfg.mode.kind,
        "horizon": cfg.horizon,
        "deterministic": bool(deterministic),
        "dt": cfg.dt,
        "goal": [float(v) for v in scenario.goal],
        "goal_tolerance": cfg.goal_tolerance,
        "min_safe_distance": cfg.min_safe_distance,
        "collision_distance": geo.robot_radius + geo.ped_radius,
        "max_sim_time": scenario.max_sim_time,
        "y_bounds": list(cfg.y_bounds) if cfg.y_bounds is not None else None,
        "model_hash": model_hash(ensemble),
    }
    header.update(header_extra or {})
    trace = EpisodeTrace(header)
    max_steps = int(round(scenario.max_sim_time / cfg.dt))
    x = scenario.start.copy()
    warm = None
    u_prev = np.zeros(dynamics.INPUT_DIM)
    aborted = False
    for t in range(max_steps + 1):
        peds = _ped_positions(scenario.tracks, t)
        rec = {"step": t, "time": t * cfg.dt, "state": [float(v) for v in x], "peds": peds}
        dists = [math.hypot(p[0] - x[0], p[1] - x[1]) for p in peds.values()]
        collided = any(d < header["collision_distance"] for d in dists)
        at_goal = math.hypot(*(x[:2] - scenario.goal)) <= cfg.goal_tolerance
        if collided or at_goal or aborted or t == max_steps:
            trace.records.append(rec)
            break
        forecasts = forecast_pedestrians(scenario.tracks, t, ensemble, cfg.dt, deterministic)
        u, res = plan_step(x, forecasts, cfg, warm, u_prev)
        rec.update(
            control=[float(v) for v in u],
            status=res.status,
            wall_ms=res.wall_ms,
            iterations=res.iterations,
            max_violation=res.max_violation,
            fallback=res.fallback,
            plan=res.states[:, :2].tolist(),
            forecasts={
                str(f.ped_id): {"means": f.means.tolist(), "covs": f.covs.tolist()} for f in forecasts
            },
        )
        trace.records.append(rec)
        if res.fallback:
            logger.warning("solver failure at step %d: %s", t, res.message)
            aborted = True
        x = dynamics.step(x, u, cfg.dt, cfg.vehicle)
        warm = res.shifted()
        u_prev = u
    return trace, compute_metrics(trace)


def compute_metrics(trace: EpisodeTrace) -> MetricsReport:
    records = trace.records
    if not records:
        raise ValueError("trace has no records")
    h = trace.header
    pos = np.array([r["state"][:2] for r in records])
    length = float(np.sum(np.hypot(*np.diff(pos, axis=0).T))) if len(pos) > 1 else 0.0
    controls = [r for r in records if "control" in r]
    total_time = len(controls) * h["dt"]
    min_d = math.inf
    for r, p in zip(records, pos):
        for q in r["peds"].values():
            min_d = min(min_d, math.hypot(q[0] - p[0], q[1] - p[1]))
    avg_ms = float(np.mean([r["wall_ms"] for r in controls])) if controls else 0.0
    final_goal = math.hypot(pos[-1][0] - h["goal"][0], pos[-1][1] - h["goal"][1])
    collided = min_d < h["collision_distance"]
    solver_failed = any(r.get("fallback") for r in controls)
    reached = final_goal <= h["goal_tolerance"]
    success = reached and not collided and min_d >= h["min_safe_distance"]
    if success:
        reason = None
    elif collided or min_d < h["min_safe_distance"]:
        reason = "collision"
    elif solver_failed:
        reason = "solver"
    else:
        reason = "timeout"
    return MetricsReport(length, total_time, min_d, avg_ms, success, reason)


# ---------------------------------------------------------------------------
# persistence


def model_hash(ensemble: Ensemble | None) -> str:
    if ensemble is None:
        return "constant-velocity"
    digest = hashlib.sha256()
    for m in ensemble.members:
        digest.update(np.ascontiguousarray(m.theta).tobytes())
    return digest.hexdigest()[:16]


def save_trace(trace: EpisodeTrace, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(json.dumps(trace.header) + "\n")
        for rec in trace.records:
            fh.write(json.dumps(rec) + "\n")
    return path


def load_trace(path) -> EpisodeTrace:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("schema") != TRACE_SCHEMA:
        raise ValueError(f"{path} is not a {TRACE_SCHEMA} trace")
    return EpisodeTrace(lines[0], lines[1:])


def write_metrics_csv(rows: list[dict], path, fields=METRIC_FIELDS) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path
