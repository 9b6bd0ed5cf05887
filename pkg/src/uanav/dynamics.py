"""Kinematic-car robot model with RK4 integration.

State vector layout (7): ``p_x, p_y, phi, v_x, v_y, r, steer``.
Input vector layout (2): ``F`` (net driving force), ``steer_rate``.

The right-hand side is implemented literally, including the reuse of
``dv_x/dt`` inside the lateral velocity and yaw-rate rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

STATE_DIM = 7
INPUT_DIM = 2

PX, PY, PHI, VX, VY, R, STEER = range(STATE_DIM)

FORCE_BOUND = 4.0
STEER_RATE_BOUND = 0.3 * math.pi


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 10.0
    l_rear: float = 0.25
    l_front: float = 0.25
    radius: float = 0.3
    steer_bound: float = 0.6

    def __post_init__(self):
        if self.mass <= 0 or self.l_rear <= 0 or self.l_front <= 0 or self.radius <= 0:
            raise ValueError(f"vehicle parameters must be positive: {self}")
        if self.steer_bound <= 0:
            raise ValueError("steer_bound must be positive")


@dataclass(frozen=True)
class RobotState:
    p_x: float = 0.0
    p_y: float = 0.0
    phi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    r: float = 0.0
    steer: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.r, self.steer],
            dtype=float,
        )

    @classmethod
    def from_array(cls, x) -> "RobotState":
        x = np.asarray(x, dtype=float)
        if x.shape != (STATE_DIM,):
            raise ValueError(f"expected state of shape (7,), got {x.shape}")
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class ControlInput:
    force: float = 0.0
    steer_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.force, self.steer_rate], dtype=float)


def input_bounds() -> tuple[np.ndarray, np.ndarray]:
    hi = np.array([FORCE_BOUND, STEER_RATE_BOUND])
    return -hi, hi


def derivative(x, u, params: VehicleParams = VehicleParams()) -> np.ndarray:
    """Continuous-time state derivative."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    phi, vx, vy, r, steer = x[PHI], x[VX], x[VY], x[R], x[STEER]
    c, s = math.cos(phi), math.sin(phi)
    wheelbase = params.l_rear + params.l_front
    ax = u[0] / params.mass
    lateral = ax + steer * vx
    return np.array(
        [
            vx * c - vy * s,
            vx * s + vy * c,
            r,
            ax,
            lateral * params.l_rear / wheelbase,
            lateral / wheelbase,
            u[1],
        ]
    )


def step(x, u, dt: float, params: VehicleParams = VehicleParams()) -> np.ndarray:
    """One classical RK4 step with the input held constant over ``dt``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    k1 = derivative(x, u, params)
    k2 = derivative(x + 0.5 * dt * k1, u, params)
    k3 = derivative(x + 0.5 * dt * k2, u, params)
    k4 = derivative(x + dt * k3, u, params)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[STEER] = min(max(out[STEER], -params.steer_bound), params.steer_bound)
    return out


def rollout(x0, controls, dt: float, params: VehicleParams = VehicleParams()) -> np.ndarray:
    """States 1..N obtained by stepping ``x0`` through ``controls`` (shape (N, 2))."""
    controls = np.asarray(controls, dtype=float).reshape(-1, INPUT_DIM)
    states = np.empty((len(controls), STATE_DIM))
    x = np.asarray(x0, dtype=float)
    for k, u in enumerate(controls):
        x = step(x, u, dt, params)
        states[k] = x
    return states


# ---------------------------------------------------------------------------
# Compiled rollout with forward sensitivities, used by the planner.


@numba.njit(cache=True)
def _rhs_jac(x, u, m, l_rear, wheelbase, f, A, B):
    phi = x[2]
    vx = x[3]
    vy = x[4]
    steer = x[6]
    c = math.cos(phi)
    s = math.sin(phi)
    ax = u[0] / m
    lat = ax + steer * vx
    f[0] = vx * c - vy * s
    f[1] = vx * s + vy * c
    f[2] = x[5]
    f[3] = ax
    f[4] = lat * l_rear / wheelbase
    f[5] = lat / wheelbase
    f[6] = u[1]
    A[:, :] = 0.0
    B[:, :] = 0.0
    A[0, 2] = -vx * s - vy * c
    A[0, 3] = c
    A[0, 4] = -s
    A[1, 2] = vx * c - vy * s
    A[1, 3] = s
    A[1, 4] = c
    A[2, 5] = 1.0
    A[4, 3] = steer * l_rear / wheelbase
    A[4, 6] = vx * l_rear / wheelbase
    A[5, 3] = steer / wheelbase
    A[5, 6] = vx / wheelbase
    B[3, 0] = 1.0 / m
    B[4, 0] = l_rear / (wheelbase * m)
    B[5, 0] = 1.0 / (wheelbase * m)
    B[6, 1] = 1.0


@numba.njit(cache=True)
def _rollout_sens(x0, U, dt, m, l_rear, wheelbase, steer_bound):
    N = U.shape[0]
    n = 7
    X = np.empty((N + 1, n))
    S = np.zeros((N + 1, n, 2 * N))
    X[0] = x0
    f = np.empty(n)
    A = np.empty((n, n))
    B = np.empty((n, 2))
    xs = np.empty(n)
    Kx = np.empty((n, n))
    Ku = np.empty((n, 2))
    Kx_new = np.empty((n, n))
    Ku_new = np.empty((n, 2))
    Sx = np.empty((n, n))
    Su = np.empty((n, 2))
    ksum = np.empty(n)
    prev_k = np.empty(n)
    Phi_x = np.empty((n, n))
    Phi_u = np.empty((n, 2))
    coef = (0.0, 0.5, 0.5, 1.0)
    weight = (1.0, 2.0, 2.0, 1.0)
    for k in range(N):
        x = X[k]
        u = U[k]
        Kx[:, :] = 0.0
        Ku[:, :] = 0.0
        Sx[:, :] = 0.0
        Su[:, :] = 0.0
        ksum[:] = 0.0
        prev_k[:] = 0.0
        for stage in range(4):
            a = coef[stage] * dt
            for i in range(n):
                xs[i] = x[i] + a * prev_k[i]
            _rhs_jac(xs, u, m, l_rear, wheelbase, f, A, B)
            # K_new = A (I + a Kx), Ku_new = A (a Ku) + B
            for i in range(n):
                for j in range(n):
                    acc = A[i, j]
                    for l in range(n):
                        acc += a * A[i, l] * Kx[l, j]
                    Kx_new[i, j] = acc
                for j in range(2):
                    acc = B[i, j]
                    for l in range(n):
                        acc += a * A[i, l] * Ku[l, j]
                    Ku_new[i, j] = acc
            w = weight[stage]
            for i in range(n):
                prev_k[i] = f[i]
                ksum[i] += w * f[i]
                for j in range(n):
                    Kx[i, j] = Kx_new[i, j]
                    Sx[i, j] += w * Kx_new[i, j]
                for j in range(2):
                    Ku[i, j] = Ku_new[i, j]
                    Su[i, j] += w * Ku_new[i, j]
        h6 = dt / 6.0
        for i in range(n):
            X[k + 1, i] = x[i] + h6 * ksum[i]
            for j in range(n):
                Phi_x[i, j] = h6 * Sx[i, j]
            Phi_x[i, i] += 1.0
            for j in range(2):
                Phi_u[i, j] = h6 * Su[i, j]
        if X[k + 1, 6] > steer_bound or X[k + 1, 6] < -steer_bound:
            X[k + 1, 6] = min(max(X[k + 1, 6], -steer_bound), steer_bound)
            Phi_x[6, :] = 0.0
            Phi_u[6, :] = 0.0
        for i in range(n):
            for j in range(2 * k):
                acc = 0.0
                for l in range(n):
                    acc += Phi_x[i, l] * S[k, l, j]
                S[k + 1, i, j] = acc
            S[k + 1, i, 2 * k] = Phi_u[i, 0]
            S[k + 1, i, 2 * k + 1] = Phi_u[i, 1]
    return X, S


def rollout_with_sensitivities(x0, controls, dt: float, params: VehicleParams = VehicleParams()):
    """Rollout returning states 0..N and ``dX[k]/dU`` for the flattened controls.

    Returns ``(X, S)`` with ``X`` of shape (N+1, 7) and ``S`` of shape (N+1, 7, 2N).
    """
    U = np.ascontiguousarray(np.asarray(controls, dtype=float).reshape(-1, INPUT_DIM))
    return _rollout_sens(
        np.ascontiguousarray(np.asarray(x0, dtype=float)),
        U,
        float(dt),
        float(params.mass),
        float(params.l_rear),
        float(params.l_rear + params.l_front),
        float(params.steer_bound),
    )
