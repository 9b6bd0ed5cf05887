"""Run configuration: a nested YAML file mapped onto dataclasses.

Layout (every key optional; defaults shown)::

    paths:
      dataset: <bundled synthetic_tracks.txt>
      model: <bundled default_model.npz>
      output: runs
    predictor:
      members: 3
      epochs: 100
      batch_size: 64
      hidden: 64
      lr: 0.008
      seed: 0
    planner:
      horizon: 12
      mode: cbf          # hard | chance | cbf
      delta: 0.1         # chance-constraint risk level
      gamma: 0.4         # CBF decay rate
      q: [2, 2, 1, 1, 1, 1.0e-5, 1.0e-5]
      r: [0.01, 0.01]
      cruise_speed: 1.0
      goal_tolerance: 0.6
      min_safe_distance: 0.2
      prune_radius: 10.0
      max_outer: 10
      max_inner: 50
      tol: 1.0e-4
    scenario:
      name: head_on      # head_on | corridor | crowd | dataset
      seed: 0
      pedestrians: 20    # dataset scenarios only
      max_sim_time: 30.0
      deterministic: false
      constant_velocity: false
    bench:
      seeds: [0, 1, 2, 3, 4]
      modes: [hard, chance, cbf]
      horizons: [12]
      predictions: [stochastic]   # stochastic | deterministic
      workers: 1

Environment variables ``UANAV_DATASET``, ``UANAV_MODEL`` and ``UANAV_OUT``
override the three paths (and nothing else).
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .constraints import ConstraintMode
from .planner import DEFAULT_Q, DEFAULT_R, PlannerConfig
from .predictor import TrainConfig

DATA_DIR = Path(__file__).resolve().parent / "data"
BUNDLED_DATASET = DATA_DIR / "synthetic_tracks.txt"
BUNDLED_MODEL = DATA_DIR / "default_model.npz"
MODES = ("hard", "chance", "cbf")
SCENARIOS = ("head_on", "corridor", "crowd", "dataset")
PREDICTIONS = ("stochastic", "deterministic")
ENV_OVERRIDES = {"UANAV_DATASET": "dataset", "UANAV_MODEL": "model", "UANAV_OUT": "output"}


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    dataset: str = str(BUNDLED_DATASET)
    model: str = str(BUNDLED_MODEL)
    output: str = "runs"


@dataclass
class PredictorSection:
    members: int = 3
    epochs: int = 100
    batch_size: int = 64
    hidden: int = 64
    lr: float = 8e-3
    seed: int = 0

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            members=self.members,
            epochs=self.epochs,
            batch_size=self.batch_size,
            hidden=self.hidden,
            lr=self.lr,
            seed=self.seed,
        )


@dataclass
class PlannerSection:
    horizon: int = 12
    mode: str = "cbf"
    delta: float = 0.1
    gamma: float = 0.4
    q: list = field(default_factory=lambda: list(DEFAULT_Q))
    r: list = field(default_factory=lambda: list(DEFAULT_R))
    cruise_speed: float = 1.0
    goal_tolerance: float = 0.6
    min_safe_distance: float = 0.2
    prune_radius: float = 10.0
    max_outer: int = 10
    max_inner: int = 50
    tol: float = 1e-4

    def constraint_mode(self) -> ConstraintMode:
        return ConstraintMode(self.mode, delta=self.delta, gamma=self.gamma)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            horizon=self.horizon,
            q=tuple(float(v) for v in self.q),
            r=tuple(float(v) for v in self.r),
            mode=self.constraint_mode(),
            cruise_speed=self.cruise_speed,
            goal_tolerance=self.goal_tolerance,
            min_safe_distance=self.min_safe_distance,
            prune_radius=self.prune_radius,
            max_outer=self.max_outer,
            max_inner=self.max_inner,
            tol=self.tol,
        )


@dataclass
class ScenarioSection:
    name: str = "head_on"
    seed: int = 0
    pedestrians: int = 20
    max_sim_time: float = 30.0
    deterministic: bool = False
    constant_velocity: bool = False


@dataclass
class BenchSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    modes: list = field(default_factory=lambda: ["hard", "chance", "cbf"])
    horizons: list = field(default_factory=lambda: [12])
    predictions: list = field(default_factory=lambda: ["stochastic"])
    workers: int = 1


SECTIONS = {
    "paths": PathsSection,
    "predictor": PredictorSection,
    "planner": PlannerSection,
    "scenario": ScenarioSection,
    "bench": BenchSection,
}


@dataclass
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    planner: PlannerSection = field(default_factory=PlannerSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping of sections")
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            raw = data.get(name) or {}
            if not isinstance(raw, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            known = {f.name for f in fields(section_cls)}
            extra = set(raw) - known
            if extra:
                raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(sorted(extra))}")
            parts[name] = section_cls(**raw)
        cfg = cls(**parts)
        cfg.check_values()
        return cfg

    def check_values(self):
        """Validate everything except path existence (see ``require_paths``)."""
        pl = self.planner
        if pl.mode not in MODES:
            raise ConfigError(f"unknown mode {pl.mode!r}; valid modes: {', '.join(MODES)}")
        if self.scenario.name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario.name!r}; valid: {', '.join(SCENARIOS)}")
        for m in self.bench.modes:
            if m not in MODES:
                raise ConfigError(f"unknown bench mode {m!r}; valid modes: {', '.join(MODES)}")
        for p in self.bench.predictions:
            if p not in PREDICTIONS:
                raise ConfigError(f"unknown prediction kind {p!r}; valid: {', '.join(PREDICTIONS)}")
        if not self.bench.seeds or not self.bench.modes or not self.bench.horizons or not self.bench.predictions:
            raise ConfigError("bench seeds, modes, horizons and predictions must be non-empty")
        if any(int(h) < 1 for h in [pl.horizon, *self.bench.horizons]):
            raise ConfigError("horizons must be >= 1")
        if self.predictor.members < 1 or self.predictor.epochs < 1:
            raise ConfigError("predictor needs at least one member and one epoch")
        try:
            self.planner.planner_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def require_paths(self, dataset: bool = False, model: bool = False):
        for flag, key in ((dataset, "dataset"), (model, "model")):
            if flag and not Path(getattr(self.paths, key)).is_file():
                raise ConfigError(f"{key} path does not exist: {getattr(self.paths, key)}")


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    for var, key in ENV_OVERRIDES.items():
        if environ.get(var):
            setattr(cfg.paths, key, environ[var])
    return cfg


def load_config(path=None, environ=None) -> RunConfig:
    """Read a YAML config (or defaults when ``path`` is None) and apply env overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file does not exist: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return apply_env(RunConfig.from_dict(data), environ)


def dump_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
