import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uanav import constraints as C

GEO = C.SafetyGeometry()  # a0 = 0.15, r_o = 0.3


def rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def bisect_erf_inv(y):
    """Oracle: bisection on mpmath's erf."""
    lo, hi = mpmath.mpf(-10), mpmath.mpf(10)
    for _ in range(200):
        mid = (lo + hi) / 2
        if mpmath.erf(mid) < y:
            lo = mid
        else:
            hi = mid
    return float((lo + hi) / 2)


cov_strategy = st.builds(
    lambda l1, l2, th: rot(th) @ np.diag([l1, l2]) @ rot(th).T,
    st.floats(0.0, 5.0),
    st.floats(0.0, 5.0),
    st.floats(-math.pi, math.pi),
)


# --- erf / erf_inv --------------------------------------------------------


@pytest.mark.parametrize("x", [-6.0, -2.5, -1.0, -0.3, 0.0, 1e-8, 0.5, 1.0, 2.9, 3.0, 3.1, 4.5, 7.0])
def test_erf_matches_high_precision(x):
    assert C.erf(x) == pytest.approx(float(mpmath.erf(x)), abs=1e-15)


def test_erf_inv_zero_exact():
    assert C.erf_inv(0.0) == 0.0


def test_erf_inv_examples():
    assert C.erf_inv(0.8427007929) == pytest.approx(bisect_erf_inv(0.8427007929), abs=1e-12)
    assert C.erf_inv(0.8427007929) == pytest.approx(1.0, abs=1e-8)
    assert C.erf_inv(0.8) == pytest.approx(bisect_erf_inv(0.8), abs=1e-12)
    assert C.erf_inv(0.8) == pytest.approx(0.9061938, abs=1e-6)


@pytest.mark.parametrize("y", [1.0, -1.0, 1.5, float("nan")])
def test_erf_inv_domain(y):
    with pytest.raises(C.DomainError):
        C.erf_inv(y)


@given(st.floats(-0.999999, 0.999999))
def test_erf_inv_round_trip(y):
    assert abs(C.erf(C.erf_inv(y)) - y) < 1e-10


@given(st.floats(0.0, 0.99))
def test_erf_inv_odd(y):
    assert C.erf_inv(-y) == -C.erf_inv(y)


# --- eigendecomposition and bounding radius -----------------------------


def test_eig_diagonal():
    dec = C.eigendecompose_2x2(np.diag([4.0, 1.0]))
    np.testing.assert_array_equal(dec.eigenvalues, [4.0, 1.0])
    np.testing.assert_array_equal(dec.rotation, np.eye(2))
    np.testing.assert_array_equal(dec.semi_axes, [2.0, 1.0])


def test_eig_coupled():
    dec = C.eigendecompose_2x2([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(dec.eigenvalues, [3.0, 1.0], atol=1e-15)
    v1, v2 = dec.rotation[:, 0], dec.rotation[:, 1]
    assert abs(v1 @ np.array([1, 1]) / math.sqrt(2)) == pytest.approx(1.0, abs=1e-15)
    assert abs(v2 @ np.array([1, -1]) / math.sqrt(2)) == pytest.approx(1.0, abs=1e-15)


def test_eig_zero():
    dec = C.eigendecompose_2x2(np.zeros((2, 2)))
    np.testing.assert_array_equal(dec.eigenvalues, [0.0, 0.0])
    np.testing.assert_array_equal(dec.rotation, np.eye(2))


def test_eig_rejects_bad_input():
    with pytest.raises(C.DomainError):
        C.eigendecompose_2x2([[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(C.DomainError):
        C.eigendecompose_2x2([[1.0, 2.0], [2.0, 1.0]])
    C.eigendecompose_2x2([[1.0, 1.0 + 5e-13], [1.0 + 5e-13, 1.0]])  # tiny negative eigenvalue clamps


@given(cov_strategy)
def test_eig_reconstruction(cov):
    dec = C.eigendecompose_2x2(cov)
    Q, lam = dec.rotation, dec.eigenvalues
    np.testing.assert_allclose(Q.T @ Q, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(Q @ np.diag(lam) @ Q.T, cov, atol=1e-10)
    assert lam[0] >= lam[1] >= 0
    np.testing.assert_allclose(lam, np.sort(np.linalg.eigvalsh(cov).clip(0))[::-1], atol=1e-10)


@given(cov_strategy, st.floats(-math.pi, math.pi))
def test_bounding_radius_rotation_invariant(cov, theta):
    R = rot(theta)
    assert C.bounding_radius(R @ cov @ R.T) == pytest.approx(C.bounding_radius(cov), abs=1e-9)


def test_bounding_radius_examples():
    assert C.bounding_radius(np.zeros((2, 2))) == pytest.approx(0.15)
    assert C.bounding_radius(np.diag([0.04, 0.01])) == pytest.approx(0.35, abs=1e-15)
    no_ped = C.SafetyGeometry(ped_radius=0.0)
    assert C.bounding_radius([[2.0, 1.0], [1.0, 2.0]], no_ped) == pytest.approx(math.sqrt(3), abs=1e-15)


def test_major_variance_batch(rng):
    covs = np.array([rot(t) @ np.diag([a, b]) @ rot(t).T for t, a, b in rng.uniform(0, 2, (20, 3))])
    np.testing.assert_allclose(C.major_variance(covs), np.linalg.eigvalsh(covs)[:, -1], atol=1e-12)


# --- residuals ------------------------------------------------------------


def test_hard_residual_examples():
    zero_ped = C.SafetyGeometry(ped_radius=0.2, robot_radius=0.3)
    assert C.hard_residual([0, 0], [1, 0], np.zeros((2, 2)), zero_ped) == pytest.approx(0.5)
    assert C.hard_residual([1, 1], [1, 1], np.zeros((2, 2)), zero_ped) == pytest.approx(-0.5)
    assert C.hard_residual([1, 0], [0, 0], np.diag([0.04, 0.01]), GEO) == pytest.approx(0.35, abs=1e-15)


def test_cbf_h_examples():
    g = C.SafetyGeometry(ped_radius=0.7, robot_radius=0.3)
    assert C.cbf_h([3, 0], [0, 0], np.zeros((2, 2)), g) == pytest.approx(2.0)
    assert C.cbf_h([1, 0], [0, 0], np.zeros((2, 2)), g) == pytest.approx(0.0)
    assert C.cbf_h([0.5, 0], [0, 0], np.zeros((2, 2)), g) < 0


def test_cbf_residual_examples():
    assert C.cbf_residual(5.0, 0.7, 1.0) == 0.7
    assert C.cbf_residual(2.0, 1.6, 0.2) == pytest.approx(0.0, abs=1e-15)
    assert C.cbf_residual(2.0, 1.0, 0.2) == pytest.approx(-0.6, abs=1e-15)
    with pytest.raises(C.DomainError):
        C.cbf_residual(1.0, 1.0, 0.0)


def test_chance_zero_covariance_reduces_to_hard():
    p, mu = np.array([1.3, -0.4]), np.array([0.2, 0.5])
    assert C.chance_residual(p, mu, np.zeros((2, 2)), 0.1) == pytest.approx(
        C.hard_residual(p, mu, np.zeros((2, 2))), abs=1e-12
    )


def test_chance_half_delta_has_no_tightening():
    cov = np.array([[0.3, 0.1], [0.1, 0.2]])
    assert C.chance_tightening([0.6, 0.8], cov, 0.5) == 0.0


def test_chance_isotropic_tightening():
    sigma2 = 0.09
    for ang in np.linspace(0, 2 * math.pi, 7):
        k = [math.cos(ang), math.sin(ang)]
        expected = math.sqrt(2 * sigma2) * float(mpmath.erfinv(0.8))
        assert C.chance_tightening(k, sigma2 * np.eye(2), 0.1) == pytest.approx(expected, abs=1e-12)


def test_chance_degenerate_geometry():
    with pytest.raises(C.DegenerateGeometryError):
        C.chance_residual([1.0, 1.0], [1.0, 1.0], np.eye(2), 0.1)
    with pytest.raises(C.DomainError):
        C.chance_residual([2.0, 1.0], [1.0, 1.0], np.eye(2), 0.0)


@settings(max_examples=200)
@given(
    cov_strategy.filter(lambda c: np.trace(c) > 1e-6),
    st.floats(0.01, 0.49),
    st.floats(0.3, 5.0),
    st.floats(-math.pi, math.pi),
)
def test_chance_tighter_and_monotone(cov, delta, dist, ang):
    p = dist * np.array([math.cos(ang), math.sin(ang)])
    mu = np.zeros(2)
    k = p / np.linalg.norm(p)
    if k @ cov @ k < 1e-9:
        return  # no uncertainty along the line of sight
    base = np.linalg.norm(p) - (GEO.robot_radius + GEO.ped_radius)
    r = C.chance_residual(p, mu, cov, delta)
    assert r < base
    assert C.chance_residual(p, mu, 1.5 * cov, delta) < r
    assert C.chance_residual(p, mu, cov, min(delta * 1.5, 0.5)) > r


def test_batch_residuals_match_scalar(rng):
    P_, M_ = rng.normal(size=(30, 2)) * 3, rng.normal(size=(30, 2))
    covs = np.array([rot(t) @ np.diag([a, b]) @ rot(t).T for t, a, b in rng.uniform(0.01, 1, (30, 3))])
    erfinv = C.erf_inv(0.8)
    setback = GEO.robot_radius + GEO.ped_radius
    res, grad = C.chance_residual_batch(P_, M_, covs, setback, erfinv)
    for i in range(30):
        assert res[i] == pytest.approx(C.chance_residual(P_[i], M_[i], covs[i], 0.1), abs=1e-9)
    # gradient against finite differences
    eps = 1e-6
    for j in range(2):
        dp = np.zeros(2)
        dp[j] = eps
        up, _ = C.chance_residual_batch(P_ + dp, M_, covs, setback, erfinv)
        dn, _ = C.chance_residual_batch(P_ - dp, M_, covs, setback, erfinv)
        np.testing.assert_allclose(grad[:, j], (up - dn) / (2 * eps), atol=1e-7)
    radius = setback + np.sqrt(C.major_variance(covs))
    hres, _ = C.hard_residual_batch(P_, M_, radius)
    for i in range(30):
        assert hres[i] == pytest.approx(C.hard_residual(P_[i], M_[i], covs[i]), abs=1e-9)


def test_mode_validation():
    assert C.ConstraintMode.chance(0.2).delta == 0.2
    assert C.ConstraintMode.cbf(0.7).gamma == 0.7
    assert C.ConstraintMode.hard().kind == "hard"
    for bad in (dict(kind="soft"), dict(kind="chance", delta=0.0), dict(kind="chance", delta=0.6), dict(kind="cbf", gamma=1.5)):
        with pytest.raises(ValueError):
            C.ConstraintMode(**bad)
    with pytest.raises(ValueError):
        C.SafetyGeometry(ped_radius=-0.1)
