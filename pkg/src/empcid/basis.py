"""Monotone rational basis and the invertible output nonlinearity.

The static nonlinearity of each submodel is a linear combination
``gamma(q) = B(xi(q)) @ mu`` of fixed rational basis functions evaluated
at the normalized output ``xi(q) = (q - q_lo) / (q_hi - q_lo)``.  The
basis consists of a constant, a family bending upward near 0, and a
family bending upward near 1:

    B1_i(eta) = (1 + a_i) * eta / (1 + a_i * eta),        i = 2..n_m
    B2_i(eta) = eta / (1 + a_i * (1 - eta)),              i = 1..n_m

with curvature coefficients ``a_i = exp(beta * (1 - i)) - 1`` in
(-1, 0].  ``B1_1`` would duplicate ``B2_1 = eta`` (a_1 = 0), so it is
dropped and the stacked basis has ``n_b = 2 * n_m`` entries ordered

    [1, B1_2, ..., B1_{n_m}, B2_1, ..., B2_{n_m}].

Every non-constant entry is 0 at eta=0, 1 at eta=1, and strictly
increasing, so a coefficient vector ``mu`` whose directional slope
``dB/deta(eta) @ mu`` stays >= epsilon on a grid yields an invertible
nonlinearity that bisection can invert to machine resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# eta values this far outside [0, 1] are clamped instead of rejected;
# anything farther is a domain error.
_DOMAIN_TOL = 1e-12

# Fixed bisection depth: halving [0, 1] 52 times reaches the spacing of
# adjacent doubles around 0.5, i.e. the finest bracket float64 can hold.
_BISECT_ITERS = 52


def _uniform_grid(n: int) -> np.ndarray:
    g = np.linspace(0.0, 1.0, n)
    g.setflags(write=False)
    return g


@dataclass(frozen=True)
class BasisConfig:
    """Shape of the monotone basis and its monotonicity safeguard.

    Attributes
    ----------
    n_m : int
        Number of curvature levels per family; the stacked basis has
        ``2 * n_m`` entries.
    beta : float
        Curvature decay rate (> 0).  Larger beta concentrates the
        high-index basis functions near the interval ends.
    epsilon : float
        Slope floor enforced on ``dB/deta @ mu`` at the grid points.
    eta_grid : numpy.ndarray
        Sorted grid in [0, 1] (at least two points) where the slope
        floor is imposed.  Defaults to 50 uniform points.
    """

    n_m: int = 10
    beta: float = 0.5
    epsilon: float = 1.0
    eta_grid: np.ndarray = field(default_factory=lambda: _uniform_grid(50))

    def __post_init__(self):
        if int(self.n_m) != self.n_m or self.n_m < 1:
            raise ValueError(f"n_m must be a positive integer, got {self.n_m}")
        object.__setattr__(self, "n_m", int(self.n_m))
        if not self.beta > 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        grid = np.asarray(self.eta_grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("eta_grid must be a 1-D array with >= 2 points")
        if np.any(np.diff(grid) <= 0.0):
            raise ValueError("eta_grid must be strictly increasing")
        if grid[0] < -_DOMAIN_TOL or grid[-1] > 1.0 + _DOMAIN_TOL:
            raise ValueError("eta_grid must lie within [0, 1]")
        grid = np.clip(grid, 0.0, 1.0)
        grid.setflags(write=False)
        object.__setattr__(self, "eta_grid", grid)

    @property
    def n_b(self) -> int:
        return 2 * self.n_m

    @property
    def n_grid(self) -> int:
        return self.eta_grid.size


@dataclass(frozen=True)
class OutputRange:
    """Closed output interval [q_lo, q_hi] the nonlinearity is defined on."""

    q_lo: float
    q_hi: float

    def __post_init__(self):
        if not np.isfinite(self.q_lo) or not np.isfinite(self.q_hi):
            raise ValueError("output range bounds must be finite")
        if not self.q_lo < self.q_hi:
            raise ValueError(
                f"output range needs q_lo < q_hi, got [{self.q_lo}, {self.q_hi}]"
            )

    @property
    def span(self) -> float:
        return self.q_hi - self.q_lo

    def normalize(self, q):
        """Map q in [q_lo, q_hi] to eta in [0, 1]."""
        return (np.asarray(q, dtype=float) - self.q_lo) / self.span

    def denormalize(self, eta):
        """Map eta in [0, 1] back to q in [q_lo, q_hi]."""
        return self.q_lo + self.span * np.asarray(eta, dtype=float)


@dataclass(frozen=True)
class MonotoneSubmodel:
    """Parameters of one region's inverse law: mu for the nonlinearity,
    linear_weights for the regressor combination it is matched against."""

    mu: np.ndarray
    linear_weights: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        lw = np.asarray(self.linear_weights, dtype=float)
        if mu.ndim != 1 or lw.ndim != 1:
            raise ValueError("mu and linear_weights must be 1-D arrays")
        if not np.all(np.isfinite(mu)) or not np.all(np.isfinite(lw)):
            raise ValueError("submodel parameters must be finite")
        mu = mu.copy()
        lw = lw.copy()
        mu.setflags(write=False)
        lw.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "linear_weights", lw)


def alpha(cfg: BasisConfig) -> np.ndarray:
    """Curvature coefficients a_i = exp(beta*(1-i)) - 1, i = 1..n_m."""
    i = np.arange(1, cfg.n_m + 1, dtype=float)
    return np.exp(cfg.beta * (1.0 - i)) - 1.0


def _check_domain(eta: np.ndarray) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < -_DOMAIN_TOL) or np.any(eta > 1.0 + _DOMAIN_TOL):
        bad = eta[(eta < -_DOMAIN_TOL) | (eta > 1.0 + _DOMAIN_TOL)]
        raise ValueError(f"eta outside [0, 1]: {bad.flat[0]!r}")
    return np.clip(eta, 0.0, 1.0)


def basis_eval(cfg: BasisConfig, eta) -> np.ndarray:
    """Stacked basis values B(eta), shape ``eta.shape + (n_b,)``.

    ``basis_eval(cfg, 0.0) == [1, 0, ..., 0]`` and
    ``basis_eval(cfg, 1.0) == [1, 1, ..., 1]`` exactly.
    """
    eta = _check_domain(eta)
    a = alpha(cfg)
    e = eta[..., None]
    out = np.empty(eta.shape + (cfg.n_b,), dtype=float)
    out[..., 0] = 1.0
    # first-family entries for i >= 2 (i = 1 duplicates the linear B2_1)
    a1 = a[1:]
    out[..., 1:cfg.n_m] = (1.0 + a1) * e / (1.0 + a1 * e)
    out[..., cfg.n_m:] = e / (1.0 + a * (1.0 - e))
    return out


def basis_deriv(cfg: BasisConfig, eta) -> np.ndarray:
    """Elementwise derivative dB/deta, same layout as :func:`basis_eval`.

    The constant entry differentiates to 0; every other entry has
    strictly positive derivative (1+a_i)/(1+a_i*eta)^2 resp.
    (1+a_i)/(1+a_i*(1-eta))^2 on [0, 1].
    """
    eta = _check_domain(eta)
    a = alpha(cfg)
    e = eta[..., None]
    out = np.empty(eta.shape + (cfg.n_b,), dtype=float)
    out[..., 0] = 0.0
    a1 = a[1:]
    out[..., 1:cfg.n_m] = (1.0 + a1) / (1.0 + a1 * e) ** 2
    out[..., cfg.n_m:] = (1.0 + a) / (1.0 + a * (1.0 - e)) ** 2
    return out


def gamma_eval(cfg: BasisConfig, mu: np.ndarray, rng: OutputRange, q) -> np.ndarray:
    """Nonlinearity value gamma(q) = B(xi(q)) @ mu for q in [q_lo, q_hi]."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (cfg.n_b,):
        raise ValueError(f"mu must have shape ({cfg.n_b},), got {mu.shape}")
    eta = rng.normalize(q)
    return basis_eval(cfg, eta) @ mu


def gamma_span(cfg: BasisConfig, mu: np.ndarray) -> float:
    """gamma(q_hi) - gamma(q_lo) = sum(mu[1:]); range-independent."""
    mu = np.asarray(mu, dtype=float)
    return float(np.sum(mu[1:]))


def gamma_inverse(cfg: BasisConfig, mu: np.ndarray, rng: OutputRange, v) -> np.ndarray:
    """Invert the nonlinearity: q in [q_lo, q_hi] with gamma(q) = v.

    Values outside [gamma(q_lo), gamma(q_hi)] saturate to the matching
    endpoint.  Inside, bisection on the normalized output runs to the
    resolution of float64, which puts |gamma(q) - v| well below
    1e-10 * (gamma(q_hi) - gamma(q_lo)) for any practical basis.

    Raises
    ------
    ValueError
        If gamma(q_hi) <= gamma(q_lo) with this mu (nothing to invert).
    """
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (cfg.n_b,):
        raise ValueError(f"mu must have shape ({cfg.n_b},), got {mu.shape}")
    span = gamma_span(cfg, mu)
    if not span > 0.0:
        raise ValueError(
            f"nonlinearity is not invertible: gamma span {span} is not positive"
        )
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    v_lo = float(mu[0])          # gamma at eta = 0: B = [1, 0, ..., 0]
    v_hi = v_lo + span           # gamma at eta = 1: B = all ones

    lo = np.zeros_like(v)
    hi = np.ones_like(v)
    # saturate out-of-range targets by collapsing their bracket
    hi[v <= v_lo] = 0.0
    lo[v >= v_hi] = 1.0
    for _ in range(_BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        gm = basis_eval(cfg, mid) @ mu
        take_hi = gm < v
        lo = np.where(take_hi, mid, lo)
        hi = np.where(take_hi, hi, mid)
    eta = 0.5 * (lo + hi)
    q = rng.denormalize(np.clip(eta, 0.0, 1.0))
    return float(q[0]) if scalar else q


def min_grid_slope(cfg: BasisConfig, mu: np.ndarray) -> float:
    """Smallest directional slope dB/deta @ mu over the config grid."""
    mu = np.asarray(mu, dtype=float)
    return float(np.min(basis_deriv(cfg, cfg.eta_grid) @ mu))


def verify_monotonicity(cfg: BasisConfig, mu: np.ndarray, refine: int = 10) -> dict:
    """Report the slope floor on the enforcement grid and on a finer one.

    The slope constraint is imposed only at ``cfg.eta_grid``; between
    grid points the slope of a fitted mu can in principle dip below
    epsilon.  This check densifies the grid ``refine``-fold and reports
    the worst slope found, without raising: the caller decides whether a
    dip matters.

    Returns
    -------
    dict
        ``grid_min``: worst slope on the enforcement grid;
        ``fine_min``: worst slope on the refined grid;
        ``fine_argmin``: eta achieving ``fine_min``;
        ``ok``: whether ``fine_min >= epsilon`` (up to 1e-9 slack).
    """
    mu = np.asarray(mu, dtype=float)
    fine = np.linspace(0.0, 1.0, refine * (cfg.n_grid - 1) + 1)
    slopes = basis_deriv(cfg, fine) @ mu
    k = int(np.argmin(slopes))
    return {
        "grid_min": min_grid_slope(cfg, mu),
        "fine_min": float(slopes[k]),
        "fine_argmin": float(fine[k]),
        "ok": bool(slopes[k] >= cfg.epsilon - 1e-9),
    }
