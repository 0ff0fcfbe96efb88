"""Region merging: fewer submodels on an unchanged partition geometry.

After partitioning, neighboring regions often admit one common law.  A
joint LP refits a candidate group: every region keeps its own parameter
block and epigraph cost, and the regions in a trial subset are tied to
one shared block through componentwise equality constraints.  The
multipliers of those equalities price how much each region's tie bends
the fit, so when the shared law misses the accuracy target the region
with the largest multiplier block leaves the subset and the LP is
re-solved.  A subset that certifies the target with two or more members
merges: its cells are reassigned to the shared submodel, the partition
geometry stays untouched, and the model count drops.

Regions here are submodels together with every cell they serve, so a
merge always reduces the distinct-submodel count by at least one and
previously merged groups move as a unit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import MonotoneSubmodel
from .fit import FitReport, make_report
from .lp import build_joint_lp, joint_layout, solve_lp
from .partition import FitInputs, Hyperrectangle, PartitionResult

_TOUCH_TOL = 1e-12

STRATEGY_NEIGHBORS = "neighbors_of_worst"
STRATEGY_ALL_PAIRS = "all_pairs_adjacent"
# joint LPs stay tractable when a candidate group is bounded
_MAX_CANDIDATES = 6


@dataclass(frozen=True)
class MergeConfig:
    """Merge loop targets.

    sigma: accuracy bound every merged region must still certify.
    n_iter_max: cap on merge attempts (joint-LP searches); None means
        twice the initial submodel count.
    candidate_strategy: 'neighbors_of_worst' seeds each attempt at the
        currently worst submodel and pulls in its adjacent submodels;
        'all_pairs_adjacent' tries adjacent submodel pairs instead.
    """

    sigma: float
    n_iter_max: int | None = None
    candidate_strategy: str = STRATEGY_NEIGHBORS

    def __post_init__(self):
        if not 0.0 < self.sigma < 1.0:
            raise ValueError(f"sigma must be in (0, 1), got {self.sigma}")
        if self.n_iter_max is not None and self.n_iter_max < 0:
            raise ValueError("n_iter_max must be nonnegative")
        if self.candidate_strategy not in (STRATEGY_NEIGHBORS, STRATEGY_ALL_PAIRS):
            raise ValueError(
                f"unknown candidate strategy {self.candidate_strategy!r}"
            )


@dataclass(frozen=True)
class MergeEvent:
    """One successful merge: which candidates were tried, who stayed."""

    attempt: int
    seed: int
    candidates: tuple
    tied: tuple
    gamma: float


@dataclass(frozen=True)
class MergeOutcome:
    """Reduced model set on the original cells.

    assignment[c] is the submodel index serving cell c; reports[c] is
    that cell's residual report under its assigned submodel; s counts
    distinct submodels in use.
    """

    assignment: tuple
    submodels: tuple
    reports: tuple
    s: int
    history: tuple
    n_attempts: int


def adjacent(a: Hyperrectangle, b: Hyperrectangle) -> bool:
    """True when two boxes share a full-dimensional facet.

    Requires equal opposing bounds on exactly the touching axis and
    positive-measure overlap on every other axis; corner or edge contact
    does not count, nor does a box against itself.
    """
    if a is b:
        return False
    lo_a, hi_a = a.lo, a.hi
    lo_b, hi_b = b.lo, b.hi
    if np.array_equal(lo_a, lo_b) and np.array_equal(hi_a, hi_b):
        return False
    touch = (np.abs(hi_a - lo_b) <= _TOUCH_TOL) | (np.abs(hi_b - lo_a) <= _TOUCH_TOL)
    overlap = np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b)
    for j in np.nonzero(touch)[0]:
        others = np.arange(lo_a.size) != j
        if np.all(overlap[others] > _TOUCH_TOL):
            return True
    return False


def find_compatible_subset(blocks, inputs: FitInputs, sigma: float):
    """Largest-by-pruning subset of regions that one law can serve.

    Parameters
    ----------
    blocks : sequence of (label, sample_idx)
        Candidate regions with their sample index sets.
    inputs : FitInputs
        Shared data, basis config and command range.
    sigma : float
        Residual bound the shared law must certify on every kept region.

    Returns
    -------
    (tied, shared, reports) where ``tied`` is the list of kept labels,
    ``shared`` the common submodel, and ``reports`` a dict label ->
    FitReport of each kept region under the shared law.  Pruning stops
    as soon as every kept region certifies sigma, so the subset can
    shrink to a single label; callers after an actual merge must check
    ``len(tied) >= 2`` themselves.

    Starting from all candidates, each failing round removes the region
    whose equality-constraint multiplier block has the largest infinity
    norm (ties: smallest label), the LP-priced choice of which region
    obstructs the common fit most.
    """
    region_data = [
        (label, inputs.z_norm[idx], inputs.q[idx], inputs.weights[idx])
        for label, idx in blocks
    ]
    labels = [label for label, _ in blocks]
    lay = joint_layout(len(labels), inputs.cfg.n_b, inputs.n_z)
    tied = list(labels)
    while True:
        lp = build_joint_lp(region_data, tied, inputs.cfg, inputs.rng)
        sol = solve_lp(lp)
        if sol.status != "optimal":
            raise RuntimeError(f"joint merge LP unexpectedly {sol.status}")
        shared_x = sol.x[lay["shared"]]
        shared = MonotoneSubmodel(mu=shared_x[:inputs.cfg.n_b],
                                  linear_weights=shared_x[inputs.cfg.n_b:])
        reports = {}
        for label, idx in blocks:
            if label in tied:
                reports[label] = make_report(
                    shared, inputs.z_norm[idx], inputs.q[idx],
                    inputs.weights[idx], inputs.cfg, inputs.rng)
        worst = max(r.gamma for r in reports.values())
        # a single tied region reproduces its own fit, nothing to prune
        if worst <= sigma or len(tied) == 1:
            return tied, shared, reports
        # price each tied region by its equality-dual block
        lam = {label: 0.0 for label in tied}
        for dual, row_label in zip(sol.duals_eq, lp.labels_eq):
            lam[row_label[0]] = max(lam[row_label[0]], abs(float(dual)))
        lam_max = max(lam[lb] for lb in tied)
        drop = min(lb for lb in tied if lam[lb] >= lam_max)
        tied.remove(drop)


def _submodel_cells(assignment, sid):
    return [c for c, s in enumerate(assignment) if s == sid]


def _submodel_samples(cells, assignment, sid):
    idx = [cells[c].sample_idx for c in _submodel_cells(assignment, sid)]
    return np.concatenate(idx)


def reduce_regions(part: PartitionResult, inputs: FitInputs,
                   mcfg: MergeConfig) -> MergeOutcome:
    """Merge submodels until no candidate group certifies sigma.

    Each attempt seeds a candidate group, searches it for a compatible
    subset, and either merges (cells reassigned to the new shared
    submodel, count s strictly decreasing) or memoizes the failure.  The
    loop ends after a full pass without a merge or at n_iter_max
    attempts.  Cell geometry is never modified, and regions outside a
    merged subset keep their previous parameters, so a partition whose
    cells all certified sigma still certifies sigma afterwards.
    """
    cells = list(part.cells)
    submodels = list(part.submodels)
    assignment = [c.submodel_id for c in cells]
    reports = [c.report for c in cells]
    n_iter_max = (2 * len(set(assignment))
                  if mcfg.n_iter_max is None else mcfg.n_iter_max)

    cell_adj = _cell_adjacency(cells)
    failed: set = set()          # submodel-id groups already found unmergeable
    history = []
    attempts = 0

    def submodel_gamma(sid):
        return max(reports[c].gamma for c in _submodel_cells(assignment, sid))

    def adjacent_submodels(sid):
        mine = set(_submodel_cells(assignment, sid))
        out = set()
        for c in mine:
            for d in cell_adj[c]:
                if assignment[d] != sid:
                    out.add(assignment[d])
        return sorted(out)

    def candidate_groups():
        live = sorted(set(assignment))
        if mcfg.candidate_strategy == STRATEGY_NEIGHBORS:
            seeds = sorted(live, key=lambda s: (-submodel_gamma(s), s))
            for seed in seeds:
                group = [seed] + adjacent_submodels(seed)[:_MAX_CANDIDATES - 1]
                if len(group) >= 2:
                    yield seed, group
        else:
            pairs = set()
            for sid in live:
                for other in adjacent_submodels(sid):
                    pairs.add((min(sid, other), max(sid, other)))
            ordered = sorted(
                pairs,
                key=lambda p: (-max(submodel_gamma(p[0]), submodel_gamma(p[1])),
                               p[0], p[1]))
            for a, b in ordered:
                yield a, [a, b]

    while attempts < n_iter_max:
        progressed = False
        for seed, group in candidate_groups():
            # ids are append-only and parameters immutable, so a group that
            # failed once fails forever
            key = tuple(sorted(group))
            if key in failed:
                continue
            attempts += 1
            blocks = [(sid, _submodel_samples(cells, assignment, sid))
                      for sid in group]
            tied, shared, tied_reports = find_compatible_subset(
                blocks, inputs, mcfg.sigma)
            if len(tied) >= 2:
                new_id = len(submodels)
                submodels.append(shared)
                for sid in tied:
                    for c in _submodel_cells(assignment, sid):
                        assignment[c] = new_id
                        reports[c] = make_report(
                            shared, inputs.z_norm[cells[c].sample_idx],
                            inputs.q[cells[c].sample_idx],
                            inputs.weights[cells[c].sample_idx],
                            inputs.cfg, inputs.rng)
                history.append(MergeEvent(
                    attempt=attempts, seed=seed, candidates=tuple(group),
                    tied=tuple(tied),
                    gamma=max(r.gamma for r in tied_reports.values())))
                progressed = True
                break
            failed.add(key)
            if attempts >= n_iter_max:
                break
        if not progressed:
            break

    # renumber surviving submodels by first use across cells
    order = []
    for sid in assignment:
        if sid not in order:
            order.append(sid)
    remap = {sid: k for k, sid in enumerate(order)}
    return MergeOutcome(
        assignment=tuple(remap[sid] for sid in assignment),
        submodels=tuple(submodels[sid] for sid in order),
        reports=tuple(reports),
        s=len(order),
        history=tuple(history),
        n_attempts=attempts,
    )


def _cell_adjacency(cells):
    adj = {c: [] for c in range(len(cells))}
    for a in range(len(cells)):
        for b in range(a + 1, len(cells)):
            if adjacent(cells[a].rect, cells[b].rect):
                adj[a].append(b)
                adj[b].append(a)
    return adj
