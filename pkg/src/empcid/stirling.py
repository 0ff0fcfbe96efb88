"""Desk-scale Stirling-engine study: plant, sampled NMPC, closed loop.

The plant is a four-state nonlinear model of a Stirling engine driving a
generator; the manipulated variable u in [0, 1] throttles the working
gas and enters bilinearly.  A soft-constrained tracking NMPC serves as
the expert controller: it minimizes a quadratic tracking cost plus a
quadratic penalty on the smallest shared slack that makes the predicted
trajectory satisfy affine state bounds.  The optimizer is a
deterministic coarse-to-fine sampled search, which keeps the oracle
dependency-free and bit-reproducible.

Closed-loop simulation steps the true plant with RK4 at the control
period T_s while the NMPC predicts at the coarser period tau_u, so the
expert plans on an under-sampled model of the plant it steers.  Logged
trajectories convert into learning datasets whose regressor stacks
state, state reference, steady input and tracking error.

The prediction step defaults to tau_u/T_s RK4 substeps because the
plant's fastest mode is too stiff for a single RK4 step at tau_u (the
step amplifies instead of decaying; see the substep test).  A single
coarse step remains available through ``MpcProblem.n_substeps = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import TAG_STATIONARY, Dataset

_X_DIM = 4


@dataclass(frozen=True)
class StirlingParams:
    """Plant coefficients; a1 is the x1 damping rate (enters as -a1*x1).

    The damping sign is configuration, not hard-coded: a negative a1
    runs an unstable x1 channel for what-if studies.
    """

    a1: float = 0.183
    a2: float = 558.11
    a3: float = 118.4453
    a4: float = 9615.4
    a6: float = 5101.1
    a7: float = 641.02
    a8: float = 425.53
    a9: float = 6666.7
    k: float = 0.5
    x5_st: float = 50.0

    def __post_init__(self):
        vals = [self.a1, self.a2, self.a3, self.a4, self.a6, self.a7,
                self.a8, self.a9, self.k, self.x5_st]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("plant parameters must be finite")
        if self.k == 0.0:
            raise ValueError("k must be nonzero")


def stirling_deriv(x, u, p: StirlingParams) -> np.ndarray:
    """State derivative; accepts batched states (..., 4) and matching u."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
    out = np.empty_like(x)
    out[..., 0] = -p.a1 * x1 - p.a3 * x2 + p.a2
    out[..., 1] = -p.a4 * x2 + p.a6 * x1 - p.a7 * x3
    out[..., 2] = p.a8 * (x2 - p.k * x4 * u)
    out[..., 3] = p.a9 * (-p.x5_st + p.k * x3 * u)
    return out


def rk4_step(f, x, u, dt: float):
    """Classical fourth-order Runge-Kutta step with zero-order-hold u."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = f(x, u)
    k2 = f(x + (0.5 * dt) * k1, u)
    k3 = f(x + (0.5 * dt) * k2, u)
    k4 = f(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass(frozen=True)
class RefPoint:
    """Steady operating point: full state reference and its steady input."""

    x_ref: np.ndarray
    u_ref: float

    def __post_init__(self):
        x = np.asarray(self.x_ref, dtype=float).copy()
        if x.shape != (_X_DIM,):
            raise ValueError("x_ref must be a 4-vector")
        x.setflags(write=False)
        object.__setattr__(self, "x_ref", x)
        object.__setattr__(self, "u_ref", float(self.u_ref))


def _steady_residual(u: float, x4_ref: float, p: StirlingParams) -> float:
    """x2-equation residual along the manifold where the other three
    state equations are solved exactly for a given x4 and input."""
    x3 = p.x5_st / (p.k * u)
    x2 = p.k * x4_ref * u
    x1 = (p.a2 - p.a3 * x2) / p.a1
    return -p.a4 * x2 + p.a6 * x1 - p.a7 * x3


def equilibrium(x4_ref: float, p: StirlingParams, u_hi: float = 1.0,
                u_lo: float = 0.02, scan: int = 200) -> RefPoint:
    """Largest admissible steady input holding x4 at the reference.

    Scans downward from u_hi for the first sign change of the steady
    residual and polishes the bracket with Brent's method; raises when
    no admissible steady input exists in (u_lo, u_hi].
    """
    if p.a1 == 0.0:
        raise ValueError("a1 must be nonzero to place the x1 equilibrium")
    grid = np.linspace(u_hi, u_lo, scan)
    res = [_steady_residual(u, x4_ref, p) for u in grid]
    u_star = None
    for a, b, ra, rb in zip(grid[:-1], grid[1:], res[:-1], res[1:]):
        if ra == 0.0:
            u_star = float(a)
            break
        if ra * rb < 0.0:
            u_star = float(brentq(_steady_residual, b, a,
                                  args=(x4_ref, p), xtol=1e-13))
            break
    if u_star is None:
        raise ValueError(
            f"no steady input in ({u_lo}, {u_hi}] holds x4 = {x4_ref}; "
            "the reference is untrackable for this plant"
        )
    x3 = p.x5_st / (p.k * u_star)
    x2 = p.k * x4_ref * u_star
    x1 = (p.a2 - p.a3 * x2) / p.a1
    return RefPoint(np.array([x1, x2, x3, x4_ref]), u_star)


def _soft_rows():
    # lo(d) = lo - lo_scale*d ; hi(d) = hi + hi_scale*d, shared scalar d
    lo = np.array([0.0, 4.5, 55.0, 1.0])
    hi = np.array([40.0, 5.5, 200.0, 25.0])
    scale = np.array([1.0, 0.1, 1.0, 1.0])
    return lo, hi, scale


@dataclass(frozen=True)
class MpcProblem:
    """Soft-constrained tracking NMPC over a short horizon.

    Predicted states must satisfy lo - scale*delta <= x <= hi +
    scale*delta for one shared nonnegative slack delta; the x2 rows
    relax ten times slower than the rest.  Inputs saturate hard to
    [0, 1].  Each of the n_p prediction steps spans tau_u, integrated
    with n_substeps RK4 stages (default tau_u/T_s, i.e. substeps at the
    control period; 1 gives the coarse single-step prediction).
    """

    n_p: int = 3
    q_diag: np.ndarray = field(default_factory=lambda: np.ones(_X_DIM))
    r_weight: float = 1.0
    rho: float = 1e4
    t_s: float = 1e-4
    tau_u: float = 1e-3
    n_substeps: int = 10
    soft_lo: np.ndarray = field(default_factory=lambda: _soft_rows()[0])
    soft_hi: np.ndarray = field(default_factory=lambda: _soft_rows()[1])
    soft_scale: np.ndarray = field(default_factory=lambda: _soft_rows()[2])

    def __post_init__(self):
        if int(self.n_p) != self.n_p or self.n_p < 1:
            raise ValueError(f"n_p must be a positive integer, got {self.n_p}")
        object.__setattr__(self, "n_p", int(self.n_p))
        if not self.rho > 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.t_s > 0.0 and self.tau_u > 0.0):
            raise ValueError("sampling periods must be positive")
        ratio = self.tau_u / self.t_s
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError(
                f"tau_u = {self.tau_u} must be an integer multiple of "
                f"t_s = {self.t_s}"
            )
        if int(self.n_substeps) != self.n_substeps or self.n_substeps < 1:
            raise ValueError("n_substeps must be a positive integer")
        object.__setattr__(self, "n_substeps", int(self.n_substeps))
        q = np.asarray(self.q_diag, dtype=float).copy()
        lo = np.asarray(self.soft_lo, dtype=float).copy()
        hi = np.asarray(self.soft_hi, dtype=float).copy()
        sc = np.asarray(self.soft_scale, dtype=float).copy()
        for name, arr in (("q_diag", q), ("soft_lo", lo), ("soft_hi", hi),
                          ("soft_scale", sc)):
            if arr.shape != (_X_DIM,):
                raise ValueError(f"{name} must be a 4-vector")
        if np.any(hi < lo):
            raise ValueError("soft upper bounds must not fall below lower")
        if np.any(sc <= 0.0):
            raise ValueError("slack scales must be positive")
        if np.any(q < 0.0) or self.r_weight < 0.0:
            raise ValueError("cost weights must be nonnegative")
        for name, arr in (("q_diag", q), ("soft_lo", lo), ("soft_hi", hi),
                          ("soft_scale", sc)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def steps_per_tau(self) -> int:
        return int(round(self.tau_u / self.t_s))


def required_slack(states, prob: MpcProblem) -> float:
    """Smallest nonnegative shared slack making every state row feasible.

    Closed form: each bound row demands delta >= violation / scale, and
    the shared slack is the largest demand, floored at zero.
    """
    x = np.asarray(states, dtype=float).reshape(-1, _X_DIM)
    under = (prob.soft_lo - x) / prob.soft_scale
    over = (x - prob.soft_hi) / prob.soft_scale
    return float(max(0.0, under.max(), over.max()))


def predict_trajectories(x0, u_seqs, prob: MpcProblem, p: StirlingParams
                         ) -> np.ndarray:
    """Predicted states (m, n_p, 4) for candidate sequences (m, n_p).

    Each horizon step holds its input for tau_u and integrates
    n_substeps RK4 stages of length tau_u/n_substeps.
    """
    u_seqs = np.atleast_2d(np.asarray(u_seqs, dtype=float))
    m, n_p = u_seqs.shape
    if n_p != prob.n_p:
        raise ValueError(f"candidate sequences must have {prob.n_p} inputs")
    x = np.broadcast_to(np.asarray(x0, dtype=float), (m, _X_DIM)).copy()
    dt = prob.tau_u / prob.n_substeps
    out = np.empty((m, n_p, _X_DIM))
    f = lambda xx, uu: stirling_deriv(xx, uu, p)
    for i in range(n_p):
        u = u_seqs[:, i][:, None]
        for _ in range(prob.n_substeps):
            x = rk4_step(f, x, u[:, 0], dt)
        out[:, i, :] = x
    return out


def _soft_cost_batch(u_seqs, x0, ref: RefPoint, prob: MpcProblem,
                     p: StirlingParams):
    """Vectorized Eq-cost over candidate input sequences."""
    u_seqs = np.atleast_2d(np.asarray(u_seqs, dtype=float))
    if np.any(u_seqs < 0.0) or np.any(u_seqs > 1.0):
        raise ValueError("input sequences must lie in [0, 1]")
    traj = predict_trajectories(x0, u_seqs, prob, p)
    err = traj - ref.x_ref
    track = np.einsum("mij,j->m", err ** 2, prob.q_diag)
    effort = prob.r_weight * np.sum((u_seqs - ref.u_ref) ** 2, axis=1)
    under = (prob.soft_lo - traj) / prob.soft_scale
    over = (traj - prob.soft_hi) / prob.soft_scale
    delta = np.maximum(np.max(under, axis=(1, 2)),
                       np.max(over, axis=(1, 2)))
    delta = np.maximum(delta, 0.0)
    return track + effort + prob.rho * delta ** 2, delta


def soft_cost(u_seq, x0, ref: RefPoint, prob: MpcProblem,
              p: StirlingParams) -> tuple:
    """Tracking cost plus rho*delta^2 for one input sequence.

    delta is the exact smallest shared slack for the predicted states;
    raises ValueError when the sequence leaves the hard box [0, 1].
    """
    u_seq = np.asarray(u_seq, dtype=float).ravel()
    cost, delta = _soft_cost_batch(u_seq[None, :], x0, ref, prob, p)
    return float(cost[0]), float(delta[0])


@dataclass(frozen=True)
class SearchConfig:
    """Deterministic coarse-to-fine sampling of the input box."""

    grid_pts: int = 7
    refine_rounds: int = 3
    shrink: float = 0.3

    def __post_init__(self):
        if int(self.grid_pts) != self.grid_pts or self.grid_pts < 2:
            raise ValueError("grid_pts must be an integer >= 2")
        object.__setattr__(self, "grid_pts", int(self.grid_pts))
        if int(self.refine_rounds) != self.refine_rounds or self.refine_rounds < 0:
            raise ValueError("refine_rounds must be a nonnegative integer")
        object.__setattr__(self, "refine_rounds", int(self.refine_rounds))
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must be in (0, 1)")


def _axis_grid(center: float, width: float, pts: int) -> np.ndarray:
    lo = max(0.0, center - 0.5 * width)
    hi = min(1.0, center + 0.5 * width)
    if hi < lo:
        lo = hi = min(1.0, max(0.0, center))
    return np.linspace(lo, hi, pts)


def sampled_search(cost_fn, n_dims: int, search: SearchConfig,
                   inject=None):
    """Minimize a batched cost over [0, 1]^{n_dims} by re-gridding.

    cost_fn maps an (m, n_dims) array to m costs.  Injected candidates
    (and the running incumbent) are prepended to each round's grid, so
    ties resolve in their favor and the incumbent cost never increases.
    """
    center = np.full(n_dims, 0.5)
    width = 1.0
    best_u = None
    best_cost = np.inf
    for rnd in range(search.refine_rounds + 1):
        axes = [_axis_grid(center[j], width, search.grid_pts)
                for j in range(n_dims)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"),
                        axis=-1).reshape(-1, n_dims)
        extra = []
        if best_u is not None:
            extra.append(best_u)
        if rnd == 0 and inject is not None:
            extra.extend(np.atleast_2d(np.asarray(inject, dtype=float)))
        cand = np.vstack([np.asarray(extra), grid]) if extra else grid
        costs = cost_fn(cand)
        k = int(np.argmin(costs))
        if costs[k] < best_cost or best_u is None:
            best_cost = float(costs[k])
            best_u = cand[k].copy()
        center = best_u
        width *= search.shrink
    return best_u, best_cost


def nmpc_oracle(x0, ref: RefPoint, prob: MpcProblem, p: StirlingParams,
                search: SearchConfig = SearchConfig()) -> float:
    """Receding-horizon expert input for the current state.

    Samples input sequences coarse-to-fine, always including the
    steady-input sequence as a candidate, and returns the first input
    of the cheapest sequence found.
    """
    x0 = np.asarray(x0, dtype=float)

    def batch(cand):
        return _soft_cost_batch(cand, x0, ref, prob, p)[0]

    u_ref_seq = np.full(prob.n_p, min(1.0, max(0.0, ref.u_ref)))
    best_u, _ = sampled_search(batch, prob.n_p, search,
                               inject=u_ref_seq[None, :])
    return float(best_u[0])


@dataclass(frozen=True)
class Scenario:
    """Piecewise-constant x4 reference program.

    Each reference value is held for its share of the duration: holds
    gives the fractions (None means equal shares).  Later holds are
    typically longer so the loop reaches near-steady state at each
    operating point; the closed loop settles with a time constant
    around 65 ms, so a window must span several times that to produce
    stationary samples.  x0 = None starts at the equilibrium of the
    first value.  seed tags the scenario for derived randomized
    variants.
    """

    duration: float = 0.5
    ref_values: tuple = (11.0, 13.0, 12.0)
    holds: tuple | None = (0.2, 0.45, 0.35)
    x0: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")
        vals = tuple(float(v) for v in self.ref_values)
        if not vals:
            raise ValueError("need at least one reference value")
        for v in vals:
            if not 7.0 <= v <= 13.0:
                raise ValueError(
                    f"reference {v} outside the studied range [7, 13]"
                )
        object.__setattr__(self, "ref_values", vals)
        if self.holds is None:
            holds = (1.0 / len(vals),) * len(vals)
        else:
            holds = tuple(float(h) for h in self.holds)
            if len(holds) != len(vals):
                raise ValueError("holds must match ref_values in length")
            if any(h <= 0.0 for h in holds):
                raise ValueError("holds must be positive fractions")
            if abs(sum(holds) - 1.0) > 1e-9:
                raise ValueError("holds must sum to 1")
        object.__setattr__(self, "holds", holds)
        if self.x0 is not None:
            x0 = np.asarray(self.x0, dtype=float).copy()
            if x0.shape != (_X_DIM,):
                raise ValueError("x0 must be a 4-vector")
            x0.setflags(write=False)
            object.__setattr__(self, "x0", x0)

    def n_steps(self, t_s: float) -> int:
        return int(round(self.duration / t_s))

    def ref_index(self, k: int, n_steps: int) -> int:
        edges = np.cumsum(self.holds)
        frac = k / n_steps
        return min(int(np.searchsorted(edges, frac, side="right")),
                   len(self.ref_values) - 1)


def permuted_scenario(sc: Scenario) -> Scenario:
    """Validation twin: same reference values in a seed-derived order."""
    rs = np.random.default_rng(sc.seed + 1)
    vals = tuple(np.array(sc.ref_values)[rs.permutation(len(sc.ref_values))])
    return Scenario(duration=sc.duration, ref_values=vals, holds=sc.holds,
                    x0=None, seed=sc.seed + 1)


@dataclass(frozen=True)
class SimLog:
    """Closed-loop record on the uniform T_s grid."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    x4r: np.ndarray
    ur: np.ndarray
    stationary: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).copy()
        x = np.asarray(self.x, dtype=float).copy()
        u = np.asarray(self.u, dtype=float).copy()
        x4r = np.asarray(self.x4r, dtype=float).copy()
        ur = np.asarray(self.ur, dtype=float).copy()
        st = np.asarray(self.stationary, dtype=bool).copy()
        n = t.size
        if n < 2:
            raise ValueError("a log needs at least two steps")
        if x.shape != (n, _X_DIM):
            raise ValueError("x must be (n, 4)")
        for name, arr in (("u", u), ("x4r", x4r), ("ur", ur),
                          ("stationary", st)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have one entry per step")
        dt = np.diff(t)
        if not np.allclose(dt, dt[0], rtol=0.0, atol=1e-12 * max(1.0, t[-1])):
            raise ValueError("log time grid must be uniform")
        for arr in (t, x, u, x4r, ur, st):
            arr.setflags(write=False)
        for name, arr in (("t", t), ("x", x), ("u", u), ("x4r", x4r),
                          ("ur", ur), ("stationary", st)):
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.t.size

    @property
    def t_s(self) -> float:
        return float(self.t[1] - self.t[0])


def make_controller(controller, prob: MpcProblem, p: StirlingParams,
                    search: SearchConfig = SearchConfig()):
    """Normalize a controller spec into a callable (x, ref) -> u.

    Accepts 'oracle' for the sampled NMPC, a PwnlModel or single-output
    MimoModel (evaluated on the stacked regressor [x, xr, ur, e]), or
    any callable already matching the protocol.
    """
    from .model import MimoModel, PwnlModel

    if controller == "oracle":
        return lambda x, ref: nmpc_oracle(x, ref, prob, p, search)
    if isinstance(controller, MimoModel):
        if len(controller.models) != 1:
            raise ValueError("scalar plant needs a single-output model")
        controller = controller.models[0]
    if isinstance(controller, PwnlModel):
        model = controller

        def from_model(x, ref):
            z = np.concatenate([x, ref.x_ref, [ref.u_ref], x - ref.x_ref])
            return model.eval(z)

        return from_model
    if callable(controller):
        return controller
    raise TypeError(f"cannot use {type(controller).__name__} as a controller")


def simulate_closed_loop(controller, sc: Scenario, prob: MpcProblem,
                         p: StirlingParams,
                         search: SearchConfig = SearchConfig(),
                         stat_tol: float = 1e-6,
                         stat_len: int = 10) -> SimLog:
    """Run the plant under a controller; log every step at T_s.

    The plant integrates one RK4 step of length T_s per control period
    with the input held.  A step is flagged stationary when the
    relative state change stayed at or below stat_tol for stat_len
    consecutive steps.  Controller failures abort with the step index.
    """
    ctrl = make_controller(controller, prob, p, search)
    n = sc.n_steps(prob.t_s)
    if n < 2:
        raise ValueError("scenario too short for the control period")
    refs = [equilibrium(v, p) for v in sc.ref_values]
    x = np.array(refs[0].x_ref if sc.x0 is None else sc.x0, dtype=float)

    t = np.arange(n) * prob.t_s
    xs = np.empty((n, _X_DIM))
    us = np.empty(n)
    x4r = np.empty(n)
    ur = np.empty(n)
    stat = np.zeros(n, dtype=bool)

    run = 0
    for k in range(n):
        ref = refs[sc.ref_index(k, n)]
        xs[k] = x
        x4r[k] = ref.x_ref[3]
        ur[k] = ref.u_ref
        try:
            u = float(ctrl(x, ref))
        except Exception as exc:
            raise RuntimeError(
                f"controller failed at step {k} (t = {t[k]:.6f} s): {exc}"
            ) from exc
        if not np.isfinite(u):
            raise RuntimeError(f"controller returned {u!r} at step {k}")
        us[k] = u
        x_next = rk4_step(lambda xx, uu: stirling_deriv(xx, uu, p), x, u,
                          prob.t_s)
        step = float(np.max(np.abs(x_next - x)))
        scale = max(1.0, float(np.max(np.abs(x))))
        run = run + 1 if step <= stat_tol * scale else 0
        stat[k] = run >= stat_len
        x = x_next
    return SimLog(t=t, x=xs, u=us, x4r=x4r, ur=ur, stationary=stat)


def save_simlog(log: SimLog, path) -> None:
    """Write the per-step record as CSV."""
    with open(path, "w") as f:
        f.write("t,x1,x2,x3,x4,u,x4r,ur,stationary\n")
        for k in range(log.n):
            row = [log.t[k], *log.x[k], log.u[k], log.x4r[k], log.ur[k]]
            f.write(",".join(repr(float(v)) for v in row))
            f.write(f",{int(log.stationary[k])}\n")


def load_simlog(path) -> SimLog:
    """Read a CSV written by :func:`save_simlog`."""
    header = "t,x1,x2,x3,x4,u,x4r,ur,stationary"
    with open(path) as f:
        first = f.readline().strip()
        if first != header:
            raise ValueError(
                f"unexpected log header {first!r}; want {header!r}"
            )
        rows = []
        for ln, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 9:
                raise ValueError(f"log row {ln}: expected 9 fields")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise ValueError(f"log row {ln}: {exc}") from exc
    arr = np.asarray(rows, dtype=float)
    if arr.size == 0:
        raise ValueError("log file has no data rows")
    return SimLog(t=arr[:, 0], x=arr[:, 1:5], u=arr[:, 5], x4r=arr[:, 6],
                  ur=arr[:, 7], stationary=arr[:, 8] != 0.0)


def build_learning_data(log: SimLog, p: StirlingParams) -> Dataset:
    """Stack [x, xr, ur, e] -> u samples; stationary flags become tags.

    Full state references are reconstructed from the logged x4
    reference through the steady-state solve, so a log round-tripped
    through CSV yields the identical dataset.
    """
    refs = {}
    for v in np.unique(log.x4r):
        refs[float(v)] = equilibrium(float(v), p)
    xr = np.stack([refs[float(v)].x_ref for v in log.x4r])
    e = log.x - xr
    z = np.hstack([log.x, xr, log.ur[:, None], e])
    tags = [frozenset([TAG_STATIONARY]) if s else frozenset()
            for s in log.stationary]
    return Dataset(z, log.u, tags=tags)
