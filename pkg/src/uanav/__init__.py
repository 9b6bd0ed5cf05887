"""Uncertainty-aware crowd navigation: ensemble prediction plus constrained NMPC."""

from .constraints import ConstraintMode, SafetyGeometry
from .dynamics import RobotState, ControlInput, VehicleParams
from .harness import EpisodeTrace, MetricsReport, Scenario, compute_metrics, run_episode
from .planner import PlannerConfig, SolveResult, plan_step
from .predictor import Ensemble, GaussianForecast, ensemble_predict, load_ensemble

__version__ = "0.1.0"

__all__ = [
    "ConstraintMode",
    "ControlInput",
    "Ensemble",
    "EpisodeTrace",
    "GaussianForecast",
    "MetricsReport",
    "PlannerConfig",
    "RobotState",
    "SafetyGeometry",
    "Scenario",
    "SolveResult",
    "VehicleParams",
    "compute_metrics",
    "ensemble_predict",
    "load_ensemble",
    "plan_step",
    "run_episode",
]
