"""Monotone basis: closed-form values, derivative consistency, inversion."""

import numpy as np
import pytest

from empcid.basis import (
    BasisConfig,
    MonotoneSubmodel,
    OutputRange,
    alpha,
    basis_deriv,
    basis_eval,
    gamma_eval,
    gamma_inverse,
    gamma_span,
    min_grid_slope,
    verify_monotonicity,
)

# fixed-point values computed symbolically (sympy, 20 digits) and frozen
ALPHA_BETA_HALF = [0.0, -0.39346934028736657640, -0.63212055882855767840]
B_AT_QUARTER = [1.0, 0.16817565603641963385, 0.25, 0.35466124439244339273]
DB_AT_QUARTER = [0.0, 0.74609389201674403318, 1.0, 1.2206754459650503085]
GAMMA_AT_ZERO = 2.3818409671345304820


def test_alpha_closed_form():
    cfg = BasisConfig(n_m=3, beta=0.5)
    np.testing.assert_allclose(alpha(cfg), ALPHA_BETA_HALF, rtol=0, atol=1e-15)
    assert np.all(alpha(cfg) > -1.0) and np.all(alpha(cfg) <= 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        BasisConfig(n_m=0)
    with pytest.raises(ValueError):
        BasisConfig(beta=0.0)
    with pytest.raises(ValueError):
        BasisConfig(epsilon=-1.0)
    with pytest.raises(ValueError):
        BasisConfig(eta_grid=np.array([0.5]))
    with pytest.raises(ValueError):
        BasisConfig(eta_grid=np.array([0.3, 0.3, 0.9]))
    with pytest.raises(ValueError):
        BasisConfig(eta_grid=np.array([0.0, 1.5]))
    assert BasisConfig(n_m=4).n_b == 8
    assert BasisConfig().n_grid == 50


def test_basis_values_frozen():
    cfg = BasisConfig(n_m=2, beta=0.5)
    np.testing.assert_allclose(basis_eval(cfg, 0.25), B_AT_QUARTER, atol=1e-15)
    np.testing.assert_allclose(basis_deriv(cfg, 0.25), DB_AT_QUARTER, atol=1e-14)


def test_basis_endpoints_exact():
    for n_m in (1, 2, 5, 10):
        cfg = BasisConfig(n_m=n_m, beta=0.7)
        at0 = basis_eval(cfg, 0.0)
        at1 = basis_eval(cfg, 1.0)
        expected0 = np.zeros(cfg.n_b)
        expected0[0] = 1.0
        assert np.array_equal(at0, expected0)
        assert np.array_equal(at1, np.ones(cfg.n_b))


def test_basis_domain_error():
    cfg = BasisConfig(n_m=2)
    with pytest.raises(ValueError):
        basis_eval(cfg, 1.001)
    with pytest.raises(ValueError):
        basis_deriv(cfg, -0.2)
    # within tolerance of the endpoints is clamped, not rejected
    basis_eval(cfg, 1.0 + 5e-13)
    basis_eval(cfg, -5e-13)


def test_basis_vectorized_shapes():
    cfg = BasisConfig(n_m=3)
    eta = np.linspace(0, 1, 7).reshape(7)
    assert basis_eval(cfg, eta).shape == (7, 6)
    assert basis_deriv(cfg, eta).shape == (7, 6)
    grid = np.linspace(0, 1, 6).reshape(2, 3)
    assert basis_eval(cfg, grid).shape == (2, 3, 6)


def test_derivative_matches_finite_differences():
    # central differences at h=1e-6 as the independent oracle
    rs = np.random.default_rng(7)
    h = 1e-6
    for n_m, beta in [(1, 0.5), (3, 0.5), (10, 0.5), (5, 1.0)]:
        cfg = BasisConfig(n_m=n_m, beta=beta)
        eta = rs.uniform(h, 1 - h, size=40)
        fd = (basis_eval(cfg, eta + h) - basis_eval(cfg, eta - h)) / (2 * h)
        np.testing.assert_allclose(basis_deriv(cfg, eta), fd, atol=1e-6, rtol=1e-6)


def test_derivative_positive_except_constant():
    cfg = BasisConfig(n_m=10, beta=0.5)
    d = basis_deriv(cfg, np.linspace(0, 1, 101))
    assert np.all(d[:, 0] == 0.0)
    assert np.all(d[:, 1:] > 0.0)


def test_output_range():
    rng = OutputRange(-1.0, 3.0)
    assert rng.span == 4.0
    assert rng.normalize(0.0) == 0.25
    assert rng.denormalize(0.25) == 0.0
    with pytest.raises(ValueError):
        OutputRange(1.0, 1.0)
    with pytest.raises(ValueError):
        OutputRange(2.0, -2.0)


def test_gamma_eval_frozen_value():
    cfg = BasisConfig(n_m=2, beta=0.5)
    mu = np.array([2.0, 1.0, 0.5, 0.25])
    rng = OutputRange(-1.0, 3.0)
    assert abs(gamma_eval(cfg, mu, rng, 0.0) - GAMMA_AT_ZERO) < 1e-14
    assert gamma_span(cfg, mu) == pytest.approx(1.75, abs=1e-15)


def test_gamma_inverse_round_trip():
    rs = np.random.default_rng(3)
    for trial in range(20):
        n_m = int(rs.integers(1, 8))
        cfg = BasisConfig(n_m=n_m, beta=float(rs.uniform(0.2, 1.2)))
        mu = np.concatenate([[rs.normal()], rs.uniform(0.3, 2.0, cfg.n_b - 1)])
        assert min_grid_slope(cfg, mu) > 0.0
        rng = OutputRange(float(rs.uniform(-3, 0)), float(rs.uniform(1, 4)))
        span = gamma_span(cfg, mu)
        v = mu[0] + span * rs.uniform(0.0, 1.0, size=50)
        q = gamma_inverse(cfg, mu, rng, v)
        back = gamma_eval(cfg, mu, rng, q)
        assert np.max(np.abs(back - v)) <= 1e-10 * span


def test_gamma_inverse_saturates():
    cfg = BasisConfig(n_m=3, beta=0.5)
    mu = np.array([1.0, 0.5, 0.5, 1.0, 0.5, 0.5])
    rng = OutputRange(0.0, 2.0)
    span = gamma_span(cfg, mu)
    assert gamma_inverse(cfg, mu, rng, mu[0] - 1.0) == rng.q_lo
    assert gamma_inverse(cfg, mu, rng, mu[0] + span + 1.0) == rng.q_hi
    assert gamma_inverse(cfg, mu, rng, mu[0]) == rng.q_lo
    assert gamma_inverse(cfg, mu, rng, mu[0] + span) == rng.q_hi


def test_gamma_inverse_rejects_flat_model():
    cfg = BasisConfig(n_m=2, beta=0.5)
    rng = OutputRange(0.0, 1.0)
    with pytest.raises(ValueError):
        gamma_inverse(cfg, np.array([1.0, 0.0, 0.0, 0.0]), rng, 0.5)
    with pytest.raises(ValueError):
        gamma_inverse(cfg, np.array([1.0, -0.5, 0.2, 0.2]), rng, 0.5)


def test_monotonicity_report_catches_dip():
    # slope 1.208 at both endpoint grid nodes but 0.0217 mid-interval
    # (constructed symbolically); the two-point grid cannot see the dip
    cfg = BasisConfig(n_m=2, beta=3.0, epsilon=1.0, eta_grid=np.array([0.0, 1.0]))
    mu = np.array([0.0, 0.06, 0.0, 0.06])
    assert min_grid_slope(cfg, mu) == pytest.approx(1.20811943949, abs=1e-9)
    report = verify_monotonicity(cfg, mu, refine=64)
    assert report["grid_min"] >= cfg.epsilon
    assert report["fine_min"] < 0.1
    assert not report["ok"]
    # a genuinely monotone mu passes the refined check
    cfg2 = BasisConfig(n_m=3, beta=0.5)
    mu2 = np.array([0.0, 1.0, 1.0, 1.0, 1.0, 1.0])
    assert verify_monotonicity(cfg2, mu2)["ok"]


def test_submodel_container():
    sm = MonotoneSubmodel(mu=[1.0, 2.0], linear_weights=[0.5, 0.5, 0.5])
    assert sm.mu.shape == (2,)
    assert not sm.mu.flags.writeable
    with pytest.raises(ValueError):
        MonotoneSubmodel(mu=[[1.0]], linear_weights=[1.0])
    with pytest.raises(ValueError):
        MonotoneSubmodel(mu=[np.nan], linear_weights=[1.0])
