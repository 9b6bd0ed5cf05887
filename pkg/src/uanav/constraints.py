"""Collision-avoidance residuals: hard, chance and discrete CBF.

Every residual follows the convention ``feasible <=> residual >= 0``.
Scalar functions are the public surface; the ``*_batch`` variants evaluate
many (robot position, forecast step) pairs at once and also return the
gradient with respect to the robot position, which the planner chains
through the rollout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT_PI = math.sqrt(math.pi)
SMOOTH_EPS = 1e-6


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class DegenerateGeometryError(DomainError):
    """Robot position coincides with the pedestrian mean; direction undefined."""


@dataclass(frozen=True)
class SafetyGeometry:
    ped_radius: float = 0.15
    robot_radius: float = 0.3
    safety_margin: float = 0.0

    def __post_init__(self):
        if min(self.ped_radius, self.robot_radius, self.safety_margin) < 0:
            raise ValueError(f"geometry entries must be >= 0: {self}")


@dataclass(frozen=True)
class ConstraintMode:
    kind: str = "cbf"
    delta: float = 0.1
    gamma: float = 0.4

    KINDS = ("hard", "chance", "cbf")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown constraint mode {self.kind!r}; valid modes: {', '.join(self.KINDS)}")
        if not 0.0 < self.delta <= 0.5:
            raise ValueError(f"delta must lie in (0, 0.5], got {self.delta}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")

    @classmethod
    def hard(cls) -> "ConstraintMode":
        return cls("hard")

    @classmethod
    def chance(cls, delta: float = 0.1) -> "ConstraintMode":
        return cls("chance", delta=delta)

    @classmethod
    def cbf(cls, gamma: float = 0.4) -> "ConstraintMode":
        return cls("cbf", gamma=gamma)


@dataclass(frozen=True)
class EllipseDecomposition:
    rotation: np.ndarray
    eigenvalues: np.ndarray  # descending

    @property
    def semi_axes(self) -> np.ndarray:
        return np.sqrt(self.eigenvalues)


# ---------------------------------------------------------------------------
# error function and its inverse


def erf(x: float) -> float:
    """Error function from a positive-term series (|x| < 3) or a continued fraction."""
    x = float(x)
    if x < 0:
        return -erf(-x)
    if x == 0.0:
        return 0.0
    if x < 3.0:
        # erf(x) = 2/sqrt(pi) exp(-x^2) sum_n 2^n x^(2n+1) / (1*3*...*(2n+1))
        term = x
        total = x
        x2 = 2.0 * x * x
        n = 0
        while term > 1e-17 * total:
            n += 1
            term *= x2 / (2 * n + 1)
            total += term
        return 2.0 / SQRT_PI * math.exp(-x * x) * total
    return 1.0 - _erfc_cf(x)


def _erfc_cf(x: float) -> float:
    # erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))), modified Lentz
    tiny = 1e-300
    f = x
    C = x
    D = 0.0
    for k in range(1, 500):
        a = 0.5 * k
        D = x + a * D
        D = 1.0 / (D if D != 0 else tiny)
        C = x + a / (C if C != 0 else tiny)
        delta = C * D
        f *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x * x) / SQRT_PI / f


def erf_inv(y: float) -> float:
    """Inverse error function, refined by Newton steps to |erf(x) - y| < 1e-12."""
    y = float(y)
    if not -1.0 < y < 1.0:
        raise DomainError(f"erf_inv requires |y| < 1, got {y}")
    if y == 0.0:
        return 0.0
    # closed-form starting point (Winitzki)
    a = 0.147
    ln = math.log((1.0 - y) * (1.0 + y))
    t = 2.0 / (math.pi * a) + 0.5 * ln
    x = math.copysign(math.sqrt(math.sqrt(t * t - ln / a) - t), y)
    for _ in range(50):
        err = erf(x) - y
        slope = 2.0 / SQRT_PI * math.exp(-x * x)
        dx = err / slope
        # Halley correction: erf'' = -2x erf'
        dx = dx / (1.0 + x * dx)
        x -= dx
        if abs(dx) <= 1e-16 * max(1.0, abs(x)):
            break
    return x


# ---------------------------------------------------------------------------
# covariance geometry


def eigendecompose_2x2(cov) -> EllipseDecomposition:
    """Closed-form eigendecomposition of a symmetric PSD 2x2 matrix."""
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (2, 2):
        raise DomainError(f"expected a 2x2 matrix, got shape {cov.shape}")
    a, b, b2, c = cov[0, 0], cov[0, 1], cov[1, 0], cov[1, 1]
    if abs(b - b2) > 1e-9:
        raise DomainError(f"covariance not symmetric: off-diagonals {b} vs {b2}")
    b = 0.5 * (b + b2)
    mid = 0.5 * (a + c)
    disc = math.hypot(0.5 * (a - c), b)
    lam = np.array([mid + disc, mid - disc])
    if lam[1] < -1e-12:
        raise DomainError(f"covariance indefinite: eigenvalues {lam}")
    lam = np.maximum(lam, 0.0)
    # both candidates are eigenvectors of lam[0]; keep the better-conditioned one
    v1 = np.array([lam[0] - c, b])
    v2 = np.array([b, lam[0] - a])
    v = v1 if np.linalg.norm(v1) >= np.linalg.norm(v2) else v2
    n = np.linalg.norm(v)
    if n <= 1e-150 or disc <= 1e-15 * max(abs(mid), 1e-300):
        v = np.array([1.0, 0.0]) if a >= c else np.array([0.0, 1.0])  # isotropic or zero
    else:
        v = v / n
    Q = np.array([[v[0], -v[1]], [v[1], v[0]]])
    return EllipseDecomposition(rotation=Q, eigenvalues=lam)


def major_variance(cov) -> np.ndarray:
    """Largest eigenvalue of one or many 2x2 covariances (shape (..., 2, 2))."""
    cov = np.asarray(cov, dtype=float)
    a, b, c = cov[..., 0, 0], 0.5 * (cov[..., 0, 1] + cov[..., 1, 0]), cov[..., 1, 1]
    lam = 0.5 * (a + c) + np.hypot(0.5 * (a - c), b)
    return np.maximum(lam, 0.0)


def bounding_radius(cov, geometry: SafetyGeometry = SafetyGeometry()) -> float:
    """Circular over-approximation of the pedestrian's bounding ellipse."""
    dec = eigendecompose_2x2(cov)
    return geometry.ped_radius + math.sqrt(dec.eigenvalues[0])


# ---------------------------------------------------------------------------
# scalar residuals


def _distance(p, mu) -> float:
    d = np.asarray(p, dtype=float) - np.asarray(mu, dtype=float)
    return math.hypot(d[0], d[1])


def hard_residual(p, mean, cov, geometry: SafetyGeometry = SafetyGeometry()) -> float:
    """Distance to the predicted mean minus robot radius and inflated pedestrian radius."""
    r_th = bounding_radius(cov, geometry)
    return _distance(p, mean) - (geometry.robot_radius + r_th + geometry.safety_margin)


def cbf_h(p, mean, cov, geometry: SafetyGeometry = SafetyGeometry()) -> float:
    """Barrier value h; numerically identical to :func:`hard_residual`."""
    return hard_residual(p, mean, cov, geometry)


def cbf_residual(h_now: float, h_next: float, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    return h_next - (1.0 - gamma) * h_now


def chance_tightening(direction, cov, delta: float) -> float:
    """sqrt(2 k^T S k) * erfinv(1 - 2 delta) for a unit direction k."""
    k = np.asarray(direction, dtype=float)
    var = float(k @ np.asarray(cov, dtype=float) @ k)
    return math.sqrt(max(2.0 * var, 0.0)) * erf_inv(1.0 - 2.0 * delta)


def chance_residual(p, mean, cov, delta: float, geometry: SafetyGeometry = SafetyGeometry()) -> float:
    """Linearised chance constraint along the mean-to-robot direction."""
    if not 0.0 < delta <= 0.5:
        raise DomainError(f"delta must lie in (0, 0.5], got {delta}")
    d = np.asarray(p, dtype=float) - np.asarray(mean, dtype=float)
    dist = math.hypot(d[0], d[1])
    if dist < 1e-9:
        raise DegenerateGeometryError("robot position coincides with the pedestrian mean")
    kappa = d / dist
    setback = geometry.robot_radius + geometry.ped_radius + geometry.safety_margin
    return float(kappa @ d) - setback - chance_tightening(kappa, cov, delta)


# ---------------------------------------------------------------------------
# vectorised residuals with position gradients (planner use)


def distance_batch(p, mean):
    """Smoothed distance sqrt(|p-mu|^2 + eps^2) and its gradient wrt ``p``."""
    d = p - mean
    dist = np.sqrt(np.einsum("...i,...i->...", d, d) + SMOOTH_EPS**2)
    return dist, d / dist[..., None]


def hard_residual_batch(p, mean, radius):
    """``radius`` is the total clearance (robot + inflated pedestrian + margin)."""
    dist, grad = distance_batch(p, mean)
    return dist - radius, grad


def chance_residual_batch(p, mean, cov, setback, erfinv_term):
    """Chance residual for arrays ``p, mean`` (..., 2) and ``cov`` (..., 2, 2).

    ``erfinv_term`` is ``erf_inv(1 - 2 delta)``.
    """
    dist, kappa = distance_batch(p, mean)
    Sk = np.einsum("...ij,...j->...i", cov, kappa)
    var = np.einsum("...i,...i->...", kappa, Sk)
    root = np.sqrt(2.0 * var + 1e-18)
    res = dist - setback - erfinv_term * root
    # d kappa / dp = (I - k k^T) / dist; d var / dp = 2 (I - k k^T) S k / dist
    proj = Sk - var[..., None] * kappa
    dvar = 2.0 * proj / dist[..., None]
    grad = kappa - erfinv_term * dvar / root[..., None]
    return res, grad
