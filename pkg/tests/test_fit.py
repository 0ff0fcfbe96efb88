"""Region fitting: recovery, certificates, monotone cost growth."""

import numpy as np
import pytest

from empcid.basis import (
    BasisConfig,
    MonotoneSubmodel,
    OutputRange,
    gamma_inverse,
    min_grid_slope,
)
from empcid.fit import fit_region, make_report, normalized_residuals, predict


def in_structure_truth(rs, cfg, rng, n, n_z):
    """A map the fitted family contains exactly, plus samples of it."""
    mu = np.concatenate([[0.0], rs.uniform(0.9, 1.4, cfg.n_b - 1)])
    assert min_grid_slope(cfg, mu) >= cfg.epsilon
    span = float(np.sum(mu[1:]))
    weights = rs.uniform(0.2, 0.8, size=n_z)
    L = span * weights / weights.sum()          # L . z stays inside [0, span]
    z = rs.uniform(0, 1, size=(n, n_z))
    q = gamma_inverse(cfg, mu, rng, z @ L)
    return MonotoneSubmodel(mu, L), z, q


def test_exact_recovery_zero_noise():
    rs = np.random.default_rng(12)
    cfg = BasisConfig(n_m=3, beta=0.5, epsilon=1.0)
    rng = OutputRange(0.2, 0.8)
    truth, z, q = in_structure_truth(rs, cfg, rng, 200, 2)
    sub, rep = fit_region(z, q, np.ones(200), cfg, rng)
    assert rep.J <= 1e-6
    assert rep.gamma <= 1e-6
    assert rep.bound_ok
    # the recovered law reproduces the truth pointwise, not just on data
    grid = np.stack(np.meshgrid(np.linspace(0, 1, 21),
                                np.linspace(0, 1, 21)), axis=-1).reshape(-1, 2)
    np.testing.assert_allclose(predict(sub, grid, cfg, rng),
                               predict(truth, grid, cfg, rng), atol=1e-5)


def test_cost_monotone_under_inclusion():
    rs = np.random.default_rng(8)
    cfg = BasisConfig(n_m=2, beta=0.5, eta_grid=np.linspace(0, 1, 11))
    rng = OutputRange(0.0, 1.0)
    z = rs.uniform(0, 1, size=(80, 3))
    q = np.clip(0.3 + 0.2 * z[:, 0] + 0.3 * z[:, 1] ** 2
                + 0.1 * rs.normal(size=80), 0, 1)
    w = np.ones(80)
    prev = 0.0
    for n in (20, 40, 60, 80):
        _, rep = fit_region(z[:n], q[:n], w[:n], cfg, rng)
        assert rep.J >= prev - 1e-9
        prev = rep.J


def test_certificate_on_noisy_data():
    rs = np.random.default_rng(77)
    for trial in range(5):
        n_z = int(rs.integers(1, 4))
        n = int(rs.integers(30, 90))
        cfg = BasisConfig(n_m=4, beta=0.5)
        rng = OutputRange(-1.0, 2.0)
        z = rs.uniform(0, 1, size=(n, n_z))
        q = rs.uniform(-1.0, 2.0, size=n)
        w = np.where(rs.uniform(size=n) < 0.2, 10.0, 1.0)
        sub, rep = fit_region(z, q, w, cfg, rng)
        assert rep.bound_ok
        assert rep.n_samples == n
        # heavy samples individually honor the tighter per-sample bound
        res = normalized_residuals(sub, z, q, cfg, rng)
        heavy = w == 10.0
        if heavy.any():
            assert np.max(res[heavy]) <= rep.J / (cfg.epsilon * 10.0) + 1e-8


def test_report_matches_lp_objective():
    rs = np.random.default_rng(2)
    cfg = BasisConfig(n_m=3, beta=0.5)
    rng = OutputRange(0.0, 1.0)
    z = rs.uniform(0, 1, size=(60, 2))
    q = rs.uniform(0.1, 0.9, size=60)
    w = np.ones(60)
    from empcid.lp import build_fit_lp, solve_lp
    sol = solve_lp(build_fit_lp(z, q, w, cfg, rng))
    sub, rep = fit_region(z, q, w, cfg, rng)
    assert rep.J == pytest.approx(sol.objective, abs=1e-7)
    assert rep.gamma <= rep.J / cfg.epsilon + 1e-8


def test_fitted_slope_respects_floor():
    rs = np.random.default_rng(6)
    cfg = BasisConfig(n_m=3, beta=0.5, epsilon=2.5)
    rng = OutputRange(0.0, 1.0)
    z = rs.uniform(0, 1, size=(40, 2))
    q = rs.uniform(0.1, 0.9, size=40)
    sub, _ = fit_region(z, q, np.ones(40), cfg, rng)
    assert min_grid_slope(cfg, sub.mu) >= cfg.epsilon - 1e-7
