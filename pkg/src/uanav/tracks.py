"""Pedestrian tracks: ETH/UCY-style annotation files and synthetic generators."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DT = 0.4


class TrackFormatError(ValueError):
    pass


@dataclass
class PedTrack:
    """Positions sampled every 0.4 s; sample ``j`` is at simulation step ``start_step + j``."""

    ped_id: int
    positions: np.ndarray
    start_step: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def end_step(self) -> int:
        return self.start_step + len(self.positions) - 1

    def active(self, step: int) -> bool:
        return self.start_step <= step <= self.end_step

    def position(self, step: int) -> np.ndarray:
        return self.positions[step - self.start_step]

    def observed(self, step: int) -> np.ndarray:
        """All samples up to and including ``step``."""
        return self.positions[: step - self.start_step + 1]

    def shifted(self, steps: int = 0, offset=(0.0, 0.0)) -> "PedTrack":
        return PedTrack(self.ped_id, self.positions + np.asarray(offset, dtype=float), self.start_step + steps)


def load_tracks(path) -> list[PedTrack]:
    """Parse whitespace-separated ``frame_id ped_id x y`` rows.

    Rows are grouped by pedestrian and sorted by frame. The frame stride of
    the file (smallest positive gap within any pedestrian) is taken as one
    0.4 s step; gaps larger than one stride are filled by linear
    interpolation.
    """
    path = Path(path)
    rows: dict[int, list[tuple[float, float, float]]] = {}
    order: list[int] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) < 4:
                raise TrackFormatError(f"{path}:{lineno}: expected 'frame_id ped_id x y', got {text!r}")
            try:
                frame, pid, x, y = float(parts[0]), float(parts[1]), float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise TrackFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in (frame, pid, x, y)) or pid != int(pid):
                raise TrackFormatError(f"{path}:{lineno}: invalid values in {text!r}")
            pid = int(pid)
            if pid not in rows:
                rows[pid] = []
                order.append(pid)
            rows[pid].append((frame, x, y))
    if not rows:
        return []

    stride = None
    for pid in order:
        frames = np.array([r[0] for r in rows[pid]])
        if np.any(np.diff(frames) < 0):
            warnings.warn(f"{path}: frames of pedestrian {pid} out of order; sorted", stacklevel=2)
        gaps = np.diff(np.unique(frames))
        if gaps.size:
            g = gaps.min()
            stride = g if stride is None else min(stride, g)
    stride = stride or 1.0

    tracks = []
    for pid in order:
        data = np.array(sorted(rows[pid], key=lambda r: r[0]))
        _, keep = np.unique(data[:, 0], return_index=True)
        if len(keep) != len(data):
            warnings.warn(f"{path}: duplicate frames for pedestrian {pid}; first kept", stacklevel=2)
            data = data[np.sort(keep)]
        steps = np.rint((data[:, 0] - data[0, 0]) / stride).astype(int)
        full = np.arange(steps[-1] + 1)
        xs = np.interp(full, steps, data[:, 1])
        ys = np.interp(full, steps, data[:, 2])
        start = int(np.rint(data[0, 0] / stride))
        tracks.append(PedTrack(pid, np.column_stack([xs, ys]), start))
    return tracks


def write_tracks(tracks, path, frame_stride: int = 10) -> Path:
    path = Path(path)
    lines = []
    for tr in tracks:
        for j, (x, y) in enumerate(tr.positions):
            lines.append((tr.start_step + j, tr.ped_id, x, y))
    lines.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w") as fh:
        for step, pid, x, y in lines:
            fh.write(f"{step * frame_stride} {pid} {x:.4f} {y:.4f}\n")
    return path


def synthetic_walkers(n_peds: int = 300, seed: int = 0, min_len: int = 20, max_len: int = 40) -> list[PedTrack]:
    """Smoothly wandering pedestrians with measurement noise, for training data.

    Each walker keeps a preferred speed in [0.5, 1.6] m/s with slowly drifting
    heading; a fraction slow down or turn noticeably mid-track.
    """
    rng = np.random.default_rng(seed)
    tracks = []
    for pid in range(n_peds):
        n = int(rng.integers(min_len, max_len + 1))
        speed = rng.uniform(0.5, 1.6)
        heading = rng.uniform(-math.pi, math.pi)
        turn_rate = rng.normal(0.0, 0.08)
        pos = rng.uniform(-10, 10, size=2)
        out = np.empty((n, 2))
        for j in range(n):
            out[j] = pos
            heading += turn_rate * DT + rng.normal(0.0, 0.05)
            speed = float(np.clip(speed + rng.normal(0.0, 0.05), 0.2, 1.8))
            pos = pos + DT * speed * np.array([math.cos(heading), math.sin(heading)])
        out += rng.normal(0.0, 0.02, size=out.shape)
        tracks.append(PedTrack(pid, out, start_step=int(rng.integers(0, 200))))
    return tracks
