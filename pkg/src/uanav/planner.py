"""Receding-horizon NMPC over the kinematic car with pedestrian avoidance.

The optimal control problem is transcribed by single shooting: the N
controls are the only decision variables and states come from the RK4
rollout, whose forward sensitivities give exact objective and constraint
gradients. Inequalities are handled by an augmented Lagrangian outer loop
around a bounded quasi-Newton (L-BFGS-B) inner minimisation.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import constraints as cons
from .constraints import ConstraintMode, SafetyGeometry
from .dynamics import (
    INPUT_DIM,
    PHI,
    STATE_DIM,
    VX,
    VehicleParams,
    input_bounds,
    rollout_with_sensitivities,
)
from .predictor import GaussianForecast

DEFAULT_Q = (2.0, 2.0, 1.0, 1.0, 1.0, 1e-5, 1e-5)
DEFAULT_R = (0.01, 0.01)

CONVERGED = "converged"
MAX_ITER = "max-iter"
INFEASIBLE = "infeasible-relaxed"
SOLVER_ERROR = "solver-error"


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 12
    dt: float = 0.4
    q: tuple = DEFAULT_Q
    p: tuple | None = None  # defaults to 10 q
    r: tuple = DEFAULT_R
    s: tuple | None = None  # defaults to 100 r
    goal: tuple = (10.0, 0.0)
    mode: ConstraintMode = field(default_factory=ConstraintMode)
    geometry: SafetyGeometry = field(default_factory=SafetyGeometry)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    goal_tolerance: float = 0.6
    min_safe_distance: float = 0.2
    cruise_speed: float = 1.0
    prune_radius: float | None = 10.0
    y_bounds: tuple | None = None
    hold_inflation: float = 0.1
    hard_slack: float = 1e-6
    max_outer: int = 10
    max_inner: int = 50
    tol: float = 1e-4
    stall_tol: float = 1e-8
    rho_init: float = 100.0
    rho_max: float = 1e8

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for name in ("q", "r"):
            w = getattr(self, name)
            if any(v < 0 for v in w):
                raise ValueError(f"weights {name} must be non-negative")
        if len(self.q) != STATE_DIM or len(self.r) != INPUT_DIM:
            raise ValueError("q needs 7 entries and r needs 2")

    @property
    def q_weights(self) -> np.ndarray:
        return np.asarray(self.q, dtype=float)

    @property
    def p_weights(self) -> np.ndarray:
        return np.asarray(self.p if self.p is not None else 10.0 * np.asarray(self.q), dtype=float)

    @property
    def r_weights(self) -> np.ndarray:
        return np.asarray(self.r, dtype=float)

    @property
    def s_weights(self) -> np.ndarray:
        return np.asarray(self.s if self.s is not None else 100.0 * np.asarray(self.r), dtype=float)

    def with_(self, **kwargs) -> "PlannerConfig":
        return replace(self, **kwargs)


@dataclass
class SolveResult:
    controls: np.ndarray  # (N, 2)
    states: np.ndarray  # (N, 7), states 1..N
    objective: float
    status: str
    iterations: int
    wall_ms: float
    max_violation: float = 0.0
    kkt: float = float("nan")
    fallback: bool = False
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def shifted(self) -> np.ndarray:
        """Warm start for the next control period: drop the first input, repeat the last."""
        return np.vstack([self.controls[1:], self.controls[-1:]])


# ---------------------------------------------------------------------------
# costs


def _wq(v, w) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.sum(np.asarray(w, dtype=float) * v * v))


def stage_cost(x, x_ref, u, u_prev, q, r, s) -> float:
    """Weighted squared state error plus input and input-rate penalties (diagonal weights)."""
    u = np.asarray(u, dtype=float)
    return _wq(np.asarray(x) - np.asarray(x_ref), q) + _wq(u, r) + _wq(u - np.asarray(u_prev), s)


def terminal_cost(x_n, x_ref_n, p) -> float:
    return _wq(np.asarray(x_n) - np.asarray(x_ref_n), p)


# ---------------------------------------------------------------------------
# problem construction


def reference_states(x0, config: PlannerConfig) -> np.ndarray:
    """Straight-line reference toward the goal at cruise speed, (N+1, 7)."""
    N = config.horizon
    x0 = np.asarray(x0, dtype=float)
    goal = np.asarray(config.goal, dtype=float)
    d = goal - x0[:2]
    dist = float(np.hypot(*d))
    refs = np.zeros((N + 1, STATE_DIM))
    if dist < 1e-9:
        refs[:, :2] = x0[:2]
        refs[:, PHI] = x0[PHI]
        return refs
    direction = d / dist
    bearing = math.atan2(d[1], d[0])
    heading = x0[PHI] + math.remainder(bearing - x0[PHI], 2 * math.pi)
    travel = config.cruise_speed * config.dt * np.arange(N + 1)
    along = np.minimum(travel, dist)
    refs[:, :2] = x0[:2] + along[:, None] * direction
    refs[:, PHI] = heading
    refs[:, VX] = np.where(travel < dist, config.cruise_speed, 0.0)
    return refs


def pad_forecast(forecast: GaussianForecast, n: int, inflation: float = 0.1):
    """Means (n, 2) and covariances (n, 2, 2); short forecasts hold the last step, inflating it."""
    means, covs = forecast.means, forecast.covs
    if len(means) >= n:
        return means[:n], covs[:n]
    extra = n - len(means)
    growth = (1.0 + inflation) ** np.arange(1, extra + 1)
    means = np.vstack([means, np.repeat(means[-1:], extra, axis=0)])
    covs = np.concatenate([covs, covs[-1][None] * growth[:, None, None]])
    return means, covs


@dataclass
class OcpProblem:
    x0: np.ndarray
    u_prev: np.ndarray
    refs: np.ndarray
    config: PlannerConfig
    ped_ids: list
    means: np.ndarray  # (P, N, 2)
    covs: np.ndarray  # (P, N, 2, 2)
    current: np.ndarray  # (P, 2)
    radius: np.ndarray  # (P, N) clearance used by hard / CBF residuals

    def __post_init__(self):
        cfg = self.config
        N = cfg.horizon
        self._q, self._p = cfg.q_weights, cfg.p_weights
        self._r, self._s = cfg.r_weights, cfg.s_weights
        self._W = np.vstack([np.tile(self._q, (N - 1, 1)), self._p[None]])
        self._erfinv = cons.erf_inv(1.0 - 2.0 * cfg.mode.delta) if cfg.mode.kind == "chance" else 0.0
        self._h0 = self._initial_barrier()

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def n_collision(self) -> int:
        return self.means.shape[0] * self.means.shape[1]

    def rollout(self, U):
        U = np.asarray(U, dtype=float).reshape(self.horizon, INPUT_DIM)
        return rollout_with_sensitivities(self.x0, U, self.config.dt, self.config.vehicle)

    def objective(self, U, X=None, S=None):
        U = np.asarray(U, dtype=float).reshape(self.horizon, INPUT_DIM)
        if X is None:
            X, S = self.rollout(U)
        q, p, r, s = self._q, self._p, self._r, self._s
        E = X - self.refs
        J = float(np.sum(q * E[:-1] ** 2) + np.sum(p * E[-1] ** 2))
        dU = np.diff(np.vstack([self.u_prev, U]), axis=0)
        J += float(np.sum(r * U**2) + np.sum(s * dU**2))
        g = (2.0 * self._W * E[1:]).ravel() @ S[1:].reshape(-1, S.shape[-1])
        gu = 2.0 * r * U + 2.0 * s * dU
        gu[:-1] -= 2.0 * s * dU[1:]
        return J, g + gu.ravel()

    def residuals(self, U, X=None, S=None):
        """Collision (and corridor) residuals and their Jacobian wrt the flattened controls."""
        cfg = self.config
        if X is None:
            X, S = self.rollout(U)
        pos = X[1:, :2]
        dpos = S[1:, :2, :]
        parts, jacs = [], []
        if self.means.shape[0]:
            kind = cfg.mode.kind
            if kind == "chance":
                geo = cfg.geometry
                setback = geo.robot_radius + geo.ped_radius + geo.safety_margin
                res, grad = cons.chance_residual_batch(pos[None], self.means, self.covs, setback, self._erfinv)
            else:
                res, grad = cons.hard_residual_batch(pos[None], self.means, self.radius)
            jac = grad[..., 0, None] * dpos[None, :, 0, :] + grad[..., 1, None] * dpos[None, :, 1, :]
            if kind == "hard":
                res = res - cfg.hard_slack
            elif kind == "cbf":
                h0 = self._h0
                decay = 1.0 - cfg.mode.gamma
                res_prev = np.concatenate([h0[:, None], res[:, :-1]], axis=1)
                jac_prev = np.concatenate([np.zeros_like(jac[:, :1]), jac[:, :-1]], axis=1)
                res = res - decay * res_prev
                jac = jac - decay * jac_prev
            parts.append(res.ravel())
            jacs.append(jac.reshape(-1, jac.shape[-1]))
        if cfg.y_bounds is not None:
            lo, hi = cfg.y_bounds
            rr = cfg.geometry.robot_radius
            parts += [pos[:, 1] - (lo + rr), (hi - rr) - pos[:, 1]]
            jacs += [dpos[:, 1, :], -dpos[:, 1, :]]
        if not parts:
            return np.zeros(0), np.zeros((0, INPUT_DIM * self.horizon))
        return np.concatenate(parts), np.vstack(jacs)

    def _initial_barrier(self) -> np.ndarray:
        geo = self.config.geometry
        clearance = geo.robot_radius + geo.ped_radius + geo.safety_margin
        d = self.x0[:2] - self.current
        return np.sqrt(np.sum(d * d, axis=1) + cons.SMOOTH_EPS**2) - clearance

    def evaluate(self, U):
        X, S = self.rollout(U)
        J, gJ = self.objective(U, X, S)
        c, Jc = self.residuals(U, X, S)
        return J, gJ, c, Jc, X


def build_ocp(x0, forecasts: list[GaussianForecast], config: PlannerConfig, u_prev=None) -> OcpProblem:
    """Assemble the horizon-N problem against every (non-pruned) forecast."""
    x0 = np.asarray(x0, dtype=float)
    N = config.horizon
    geo = config.geometry
    kept = []
    for f in forecasts:
        if config.prune_radius is not None:
            if np.hypot(*(np.asarray(f.current) - x0[:2])) > config.prune_radius:
                continue
        kept.append(f)
    P = len(kept)
    means = np.zeros((P, N, 2))
    covs = np.zeros((P, N, 2, 2))
    current = np.zeros((P, 2))
    for i, f in enumerate(kept):
        means[i], covs[i] = pad_forecast(f, N, config.hold_inflation)
        current[i] = f.current
    radius = geo.robot_radius + geo.ped_radius + geo.safety_margin + np.sqrt(cons.major_variance(covs))
    return OcpProblem(
        x0=x0,
        u_prev=np.zeros(INPUT_DIM) if u_prev is None else np.asarray(u_prev, dtype=float),
        refs=reference_states(x0, config),
        config=config,
        ped_ids=[f.ped_id for f in kept],
        means=means,
        covs=covs,
        current=current,
        radius=radius,
    )


# ---------------------------------------------------------------------------
# solver


def _projected_gradient(U, g, lo, hi):
    pg = g.copy()
    at_lo = (U <= lo + 1e-10) & (g > 0)
    at_hi = (U >= hi - 1e-10) & (g < 0)
    pg[at_lo | at_hi] = 0.0
    return pg


def solve_ocp(problem: OcpProblem, warm_start=None) -> SolveResult:
    """Augmented-Lagrangian solve of ``problem`` starting from ``warm_start`` (N, 2)."""
    t0 = time.perf_counter()
    cfg = problem.config
    N = problem.horizon
    lo1, hi1 = input_bounds()
    lo = np.tile(lo1, N)
    hi = np.tile(hi1, N)
    if warm_start is None:
        U = np.zeros(N * INPUT_DIM)
    else:
        U = np.clip(np.asarray(warm_start, dtype=float).reshape(-1), lo, hi)
        if U.size != N * INPUT_DIM:
            raise ValueError(f"warm start must hold {N} inputs")

    J, gJ, c, Jc, X = problem.evaluate(U)
    if not (np.isfinite(J) and np.all(np.isfinite(gJ))):
        U = np.zeros(N * INPUT_DIM)
        J, gJ, c, Jc, X = problem.evaluate(U)
        if not (np.isfinite(J) and np.all(np.isfinite(gJ))):
            raise SolverError("objective is not finite at the zero-control start")

    m = c.size
    best = None  # lowest-objective feasible iterate seen so far

    def remember(J, U, X, c):
        nonlocal best
        if float(np.max(-c, initial=0.0)) <= cfg.tol and (best is None or J < best[0]):
            best = (J, U.copy(), X.copy(), c.copy())

    remember(J, U, X, c)
    lam = np.zeros(m)
    rho = cfg.rho_init
    bounds = list(zip(lo, hi))
    iterations = 0
    status = MAX_ITER
    kkt = float("inf")
    prev_merit = None
    prev_viol = np.inf

    def merit(u):
        J, gJ, c, Jc, _ = problem.evaluate(u)
        if m == 0:
            return J, gJ
        t = c - lam / rho
        act = t < 0
        val = J + np.sum(np.where(act, -lam * c + 0.5 * rho * c * c, -0.5 * lam * lam / rho))
        w = np.where(act, -lam + rho * c, 0.0)
        return val, gJ + Jc.T @ w

    for _outer in range(cfg.max_outer):
        res = minimize(
            merit,
            U,
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": cfg.max_inner, "ftol": 1e-12, "gtol": 0.1 * cfg.tol * (1.0 + abs(J))},
        )
        iterations += int(res.nit)
        U = np.clip(res.x, lo, hi)
        J, gJ, c, Jc, X = problem.evaluate(U)
        if not np.isfinite(J):
            raise SolverError("objective became non-finite during the solve")
        remember(J, U, X, c)
        viol = float(np.max(-c, initial=0.0))
        if m:
            lam = np.maximum(0.0, lam - rho * c)
        grad_lag = gJ - (Jc.T @ lam if m else 0.0)
        kkt = float(np.max(np.abs(_projected_gradient(U, grad_lag, lo, hi)), initial=0.0))
        feasible = viol <= cfg.tol
        merit_val = float(res.fun)
        stalled = prev_merit is not None and abs(prev_merit - merit_val) <= cfg.stall_tol * (1.0 + abs(merit_val))
        if feasible and (kkt <= cfg.tol * (1.0 + abs(J)) or stalled):
            status = CONVERGED
            break
        if m == 0 and stalled:
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, cfg.rho_max)
        prev_viol = viol
        prev_merit = merit_val

    if best is not None and best[0] < J:
        J, U, X, c = best
    viol = float(np.max(-c, initial=0.0))
    if viol > cfg.tol:
        status = INFEASIBLE
    controls = U.reshape(N, INPUT_DIM)
    return SolveResult(
        controls=controls,
        states=X[1:].copy(),
        objective=J,
        status=status,
        iterations=iterations,
        wall_ms=1000.0 * (time.perf_counter() - t0),
        max_violation=viol,
        kkt=kkt,
    )


def braking_control(x, config: PlannerConfig) -> np.ndarray:
    vx = float(np.asarray(x)[VX])
    force = -math.copysign(min(abs(vx) * config.vehicle.mass / config.dt, 4.0), vx) if vx else 0.0
    return np.array([force, 0.0])


def plan_step(x, forecasts, config: PlannerConfig, warm_start=None, u_prev=None):
    """Solve the OCP from state ``x`` and return ``(first control, SolveResult)``.

    On solver failure a braking control is returned and the result is
    flagged with ``fallback=True``.
    """
    t0 = time.perf_counter()
    try:
        problem = build_ocp(x, forecasts, config, u_prev)
        result = solve_ocp(problem, warm_start)
    except SolverError as exc:
        u = braking_control(x, config)
        N = config.horizon
        return u, SolveResult(
            controls=np.tile(u, (N, 1)),
            states=np.tile(np.asarray(x, dtype=float), (N, 1)),
            objective=float("nan"),
            status=SOLVER_ERROR,
            iterations=0,
            wall_ms=1000.0 * (time.perf_counter() - t0),
            max_violation=float("nan"),
            fallback=True,
            message=str(exc),
        )
    return result.controls[0].copy(), result
