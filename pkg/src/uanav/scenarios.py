"""Canonical synthetic scenarios: head-on, corridor, and a 20-pedestrian crossing field.

Pedestrians walk straight lines with a seeded, mean-reverting lateral wobble
and slight speed variation, so different seeds give different but
comparable episodes. Every track starts 8 steps before t = 0 so the
predictor has a full history from the first control step.
"""

from __future__ import annotations

import math

import numpy as np

from .dynamics import STATE_DIM
from .harness import Scenario
from .tracks import PedTrack

DT = 0.4
PRE_ROLL = 8
NAMES = ("head_on", "corridor", "crowd")


def _walker(rng, ped_id, origin, heading, speed, first_step, n_steps, wobble=0.03) -> PedTrack:
    direction = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-direction[1], direction[0]])
    lateral = 0.0
    along = 0.0
    pts = np.empty((n_steps, 2))
    for j in range(n_steps):
        pts[j] = origin + along * direction + lateral * normal
        lateral = 0.8 * lateral + rng.normal(0.0, wobble)
        along += DT * speed * (1.0 + rng.normal(0.0, 0.03))
    return PedTrack(ped_id, pts, first_step)


def _robot_start(goal) -> np.ndarray:
    x = np.zeros(STATE_DIM)
    x[2] = math.atan2(goal[1], goal[0])
    return x


def head_on(seed: int = 0, max_sim_time: float = 30.0) -> Scenario:
    """One pedestrian walking straight at the robot along the corridor axis at 1.2 m/s."""
    rng = np.random.default_rng(seed)
    goal = np.array([10.0, 0.0])
    n = PRE_ROLL + int(max_sim_time / DT) + 1
    speed = 1.2
    origin = np.array([12.0 + PRE_ROLL * DT * speed, rng.uniform(-0.1, 0.1)])
    ped = _walker(rng, 0, origin, math.pi, speed, -PRE_ROLL, n)
    return Scenario("head_on", [ped], _robot_start(goal), goal, max_sim_time, seed)


def corridor(seed: int = 0, max_sim_time: float = 30.0) -> Scenario:
    """Two pedestrians walking the same way, one ahead of the other, in a 3 m corridor."""
    rng = np.random.default_rng(seed)
    goal = np.array([10.0, 0.0])
    n = PRE_ROLL + int(max_sim_time / DT) + 1
    peds = []
    for pid, (x0, y0, speed) in enumerate([(8.0, 0.55, 1.0), (11.0, -0.5, 1.1)]):
        origin = np.array([x0 + PRE_ROLL * DT * speed, y0 + rng.uniform(-0.1, 0.1)])
        peds.append(_walker(rng, pid, origin, math.pi, speed, -PRE_ROLL, n))
    return Scenario("corridor", peds, _robot_start(goal), goal, max_sim_time, seed, y_bounds=(-1.5, 1.5))


def crowd(seed: int = 0, max_sim_time: float = 30.0, count: int = 20) -> Scenario:
    """``count`` pedestrians crossing the robot's 12 m path at random times and angles."""
    rng = np.random.default_rng(seed)
    goal = np.array([12.0, 0.0])
    start = _robot_start(goal)
    peds = []
    while len(peds) < count:
        cross = np.array([rng.uniform(1.5, 11.0), rng.uniform(-1.5, 1.5)])
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(0.8, 1.4)
        t_cross = rng.uniform(0.0, 15.0)
        half = int(rng.integers(12, 25))
        first = int(round(t_cross / DT)) - half
        origin = cross - half * DT * speed * np.array([math.cos(heading), math.sin(heading)])
        first_clamped = max(first, -PRE_ROLL)
        skip = first_clamped - first
        track = _walker(rng, len(peds), origin, heading, speed, first, 2 * half + 1)
        track = PedTrack(track.ped_id, track.positions[skip:], first_clamped)
        if len(track) < 2:
            continue
        if track.active(0) and np.hypot(*track.position(0)) < 1.5:
            continue
        peds.append(track)
    return Scenario("crowd", peds, start, goal, max_sim_time, seed)


def make(name: str, seed: int = 0, max_sim_time: float = 30.0) -> Scenario:
    try:
        builder = {"head_on": head_on, "corridor": corridor, "crowd": crowd}[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(NAMES)}") from None
    return builder(seed, max_sim_time)
