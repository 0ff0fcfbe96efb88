"""Worst-first hyperrectangle partitioning of the regressor box.

The unit box is split recursively until every cell's fitted law meets
the accuracy target sigma (worst normalized residual).  Each iteration
takes the worst cell and tries one axis-orthogonal cut per axis: the cut
starts at the cell centroid's coordinate and is refined to the midpoint
of the data gap containing it (a maximum-margin cut that leaves the
induced sample assignment unchanged).  Cuts violating the minimum edge
length or minimum per-cell cardinality are rejected; among admissible
cuts the one with the largest residual reduction wins.  Cells that admit
no cut freeze; the loop also stops at the region cap.

Membership is half-open -- lo <= z < hi per axis -- with the upper face
closed on cells touching the domain boundary at 1, so every point of the
unit box belongs to exactly one cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisConfig, MonotoneSubmodel, OutputRange
from .fit import FitReport, fit_region

_EDGE_TOL = 1e-12

STATUS_CONVERGED = "converged"
STATUS_FROZEN = "frozen"
STATUS_MAX_REGIONS = "max_regions"


@dataclass(frozen=True)
class Hyperrectangle:
    """Axis-aligned box inside [0, 1]^{n_z} with positive edge lengths."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).copy()
        hi = np.asarray(self.hi, dtype=float).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lo and hi must be 1-D arrays of equal length")
        if np.any(lo < -_EDGE_TOL) or np.any(hi > 1.0 + _EDGE_TOL):
            raise ValueError("hyperrectangle must lie inside the unit box")
        if np.any(hi <= lo):
            raise ValueError("hyperrectangle needs positive edge lengths")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def n_z(self) -> int:
        return self.lo.size

    @property
    def edges(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, z_norm) -> np.ndarray:
        """Half-open membership; faces at the domain top stay closed."""
        z = np.atleast_2d(np.asarray(z_norm, dtype=float))
        upper_closed = self.hi >= 1.0 - _EDGE_TOL
        below = np.where(upper_closed, z <= self.hi, z < self.hi)
        return np.all((z >= self.lo) & below, axis=1)

    def split(self, axis: int, t: float) -> tuple["Hyperrectangle", "Hyperrectangle"]:
        if not self.lo[axis] < t < self.hi[axis]:
            raise ValueError("cut must fall strictly inside the cell")
        left_hi = self.hi.copy()
        left_hi[axis] = t
        right_lo = self.lo.copy()
        right_lo[axis] = t
        return Hyperrectangle(self.lo, left_hi), Hyperrectangle(right_lo, self.hi)


@dataclass(frozen=True)
class Cell:
    """A partition cell: geometry, its samples, and its fitted law."""

    rect: Hyperrectangle
    sample_idx: np.ndarray
    submodel_id: int
    report: FitReport

    def __post_init__(self):
        idx = np.asarray(self.sample_idx, dtype=np.intp).copy()
        idx.setflags(write=False)
        object.__setattr__(self, "sample_idx", idx)


@dataclass(frozen=True)
class PartitionConfig:
    """Targets and safeguards of the splitting loop.

    sigma: accuracy target on the worst normalized residual per cell.
    nu: minimum cell edge length (normalized units).
    kappa: minimum samples per cell; effectively floored at the number
        of fitted parameters n_b + n_z so every LP stays overdetermined.
    max_regions: hard cap on the number of cells.
    """

    sigma: float
    nu: float = 0.05
    kappa: int = 50
    max_regions: int = 256

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must be in (0, 1), got {self.sigma}")
        if not 0.0 < self.nu <= 0.5:
            raise ValueError(f"nu must be in (0, 0.5], got {self.nu}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")
        if self.max_regions < 1:
            raise ValueError(f"max_regions must be >= 1, got {self.max_regions}")

    def effective_kappa(self, n_b: int, n_z: int) -> int:
        return max(self.kappa, n_b + n_z)


@dataclass(frozen=True)
class FitInputs:
    """Everything a region fit needs, bundled once per identification run."""

    z_norm: np.ndarray
    q: np.ndarray
    weights: np.ndarray
    cfg: BasisConfig
    rng: OutputRange

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z_norm, dtype=float)).copy()
        q = np.asarray(self.q, dtype=float).ravel().copy()
        w = np.asarray(self.weights, dtype=float).ravel().copy()
        if z.shape[0] != q.size or w.size != q.size:
            raise ValueError("z_norm, q and weights must have matching lengths")
        for arr in (z, q, w):
            arr.setflags(write=False)
        object.__setattr__(self, "z_norm", z)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def n_z(self) -> int:
        return self.z_norm.shape[1]

    def fit(self, idx) -> tuple[MonotoneSubmodel, FitReport]:
        return fit_region(self.z_norm[idx], self.q[idx], self.weights[idx],
                          self.cfg, self.rng)


@dataclass(frozen=True)
class SplitOutcome:
    """Result of probing one cut: accepted geometry + fits, or a reason."""

    accepted: bool
    reason: str = ""
    axis: int = -1
    threshold: float = np.nan
    gain: float = np.nan
    left: tuple = ()
    right: tuple = ()


@dataclass(frozen=True)
class PartitionResult:
    cells: tuple
    submodels: tuple
    status: str
    n_fits: int

    @property
    def r(self) -> int:
        return len(self.cells)

    def worst_gamma(self) -> float:
        return max(c.report.gamma for c in self.cells)


def centroid(z_norm, idx) -> np.ndarray:
    """Mean of the selected samples; empty selections are an error."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("cannot take the centroid of an empty cell")
    return np.asarray(z_norm, dtype=float)[idx].mean(axis=0)


def max_margin_threshold(coords, t0: float) -> float:
    """Midpoint of the data gap straddling t0 along one axis.

    Samples with coordinate < t0 stay on the left of the returned cut,
    the rest on the right, so the refined cut never reassigns a sample;
    it only maximizes the distance to the nearest sample on each side.

    Raises
    ------
    ValueError
        If every sample falls on one side of t0 (nothing to separate).
    """
    coords = np.asarray(coords, dtype=float).ravel()
    left = coords[coords < t0]
    right = coords[coords >= t0]
    if left.size == 0 or right.size == 0:
        raise ValueError("threshold leaves one side empty")
    return 0.5 * (float(left.max()) + float(right.min()))


def try_split(cell: Cell, axis: int, inputs: FitInputs,
              pcfg: PartitionConfig) -> SplitOutcome:
    """Probe an axis-orthogonal cut of a cell through its data centroid.

    Rejection reasons: ``side_empty`` (all the cell's samples fall on
    one side), ``min_size`` (a child edge would undercut nu),
    ``min_cardinality`` (a child would hold fewer than kappa samples).
    On acceptance both children are fitted and the gain is the parent's
    worst residual minus the worse child residual.
    """
    idx = cell.sample_idx
    coords = inputs.z_norm[idx, axis]
    t0 = float(centroid(inputs.z_norm, idx)[axis])
    try:
        t = max_margin_threshold(coords, t0)
    except ValueError:
        return SplitOutcome(False, reason="side_empty", axis=axis)
    lo, hi = cell.rect.lo[axis], cell.rect.hi[axis]
    if t - lo < pcfg.nu - _EDGE_TOL or hi - t < pcfg.nu - _EDGE_TOL:
        return SplitOutcome(False, reason="min_size", axis=axis, threshold=t)
    mask = coords < t
    idx_left, idx_right = idx[mask], idx[~mask]
    kappa = pcfg.effective_kappa(inputs.cfg.n_b, inputs.n_z)
    if idx_left.size < kappa or idx_right.size < kappa:
        return SplitOutcome(False, reason="min_cardinality", axis=axis, threshold=t)
    rect_left, rect_right = cell.rect.split(axis, t)
    sub_l, rep_l = inputs.fit(idx_left)
    sub_r, rep_r = inputs.fit(idx_right)
    gain = cell.report.gamma - max(rep_l.gamma, rep_r.gamma)
    return SplitOutcome(
        True, axis=axis, threshold=t, gain=gain,
        left=(rect_left, idx_left, sub_l, rep_l),
        right=(rect_right, idx_right, sub_r, rep_r),
    )


def partition(inputs: FitInputs, pcfg: PartitionConfig) -> PartitionResult:
    """Split worst-first until every cell meets sigma or safeguards bind.

    Deterministic: the worst cell (ties: lowest index), the best axis
    (ties: lowest axis), and all fits are reproducible functions of the
    input.  Splits are applied as long as they are admissible even when
    the gain is not positive -- the safeguards guarantee termination and
    a zero-gain cut can still unlock progress deeper down.
    """
    kappa = pcfg.effective_kappa(inputs.cfg.n_b, inputs.n_z)
    if inputs.n < kappa:
        raise ValueError(
            f"dataset has {inputs.n} samples; at least {kappa} are needed"
        )
    root_rect = Hyperrectangle(np.zeros(inputs.n_z), np.ones(inputs.n_z))
    root_idx = np.arange(inputs.n, dtype=np.intp)
    sub, rep = inputs.fit(root_idx)
    n_fits = 1
    cells = [Cell(root_rect, root_idx, 0, rep)]
    submodels = [sub]
    frozen: set[int] = set()

    while True:
        active = [i for i, c in enumerate(cells)
                  if c.report.gamma > pcfg.sigma and i not in frozen]
        if not active:
            status = STATUS_CONVERGED if all(
                c.report.gamma <= pcfg.sigma for c in cells) else STATUS_FROZEN
            break
        if len(cells) >= pcfg.max_regions:
            status = STATUS_MAX_REGIONS
            break
        worst = max(active, key=lambda i: (cells[i].report.gamma, -i))
        cell = cells[worst]
        best = None
        for axis in range(inputs.n_z):
            out = try_split(cell, axis, inputs, pcfg)
            n_fits += 2 if out.accepted else 0
            if out.accepted and (best is None or out.gain > best.gain):
                best = out
        if best is None:
            frozen.add(worst)
            continue
        rect_l, idx_l, sub_l, rep_l = best.left
        rect_r, idx_r, sub_r, rep_r = best.right
        submodels[cells[worst].submodel_id] = None  # retired with its cell
        id_l, id_r = len(submodels), len(submodels) + 1
        submodels += [sub_l, sub_r]
        cells[worst] = Cell(rect_l, idx_l, id_l, rep_l)
        cells.append(Cell(rect_r, idx_r, id_r, rep_r))

    # compact submodel ids: drop retired entries, renumber cells
    keep = [i for i, s in enumerate(submodels) if s is not None]
    remap = {old: new for new, old in enumerate(keep)}
    cells = [replace(c, submodel_id=remap[c.submodel_id]) for c in cells]
    submodels = [submodels[i] for i in keep]
    return PartitionResult(tuple(cells), tuple(submodels), status, n_fits)
