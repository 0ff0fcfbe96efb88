"""Region merging: adjacency, multiplier-guided pruning, the merge loop."""

import numpy as np
import pytest

from empcid.basis import BasisConfig, OutputRange, gamma_inverse, min_grid_slope
from empcid.merge import (
    MergeConfig,
    MergeOutcome,
    adjacent,
    find_compatible_subset,
    reduce_regions,
)
from empcid.partition import (
    Cell,
    FitInputs,
    Hyperrectangle,
    PartitionConfig,
    PartitionResult,
    partition,
)

CFG = BasisConfig(n_m=2, beta=0.5, epsilon=1.0, eta_grid=np.linspace(0, 1, 11))
RNG = OutputRange(0.0, 1.0)
MU = np.array([0.0, 1.0, 1.2, 0.9])
SPAN = float(np.sum(MU[1:]))


def law(which, z):
    """Two laws sharing the nonlinearity but not the linear weights."""
    if which == "A":
        v = SPAN * (0.55 * z[:, 0] + 0.40 * z[:, 1])
    else:
        v = SPAN * (0.15 * z[:, 0] + 0.25 * z[:, 1] + 0.30)
    return gamma_inverse(CFG, MU, RNG, v)


def make_inputs(laws, n=600, seed=0, gap=None):
    """Samples on the unit square; law chosen per vertical strip.

    gap=(lo, hi) carves an empty band out of the first coordinate so a
    partitioner has a clean margin to cut through.
    """
    rs = np.random.default_rng(seed)
    z = rs.uniform(0, 1, size=(n, 2))
    if gap is not None:
        keep = (z[:, 0] < gap[0]) | (z[:, 0] >= gap[1])
        z = z[keep]
    k = len(laws)
    strip = np.minimum((z[:, 0] * k).astype(int), k - 1)
    q = np.empty(len(z))
    for i, which in enumerate(laws):
        m = strip == i
        q[m] = law(which, z[m])
    return FitInputs(z, q, np.ones(len(z)), CFG, RNG)


def strip_partition(inputs, k):
    """Hand-built k-strip partition, one submodel per strip."""
    cells, submodels = [], []
    for i in range(k):
        rect = Hyperrectangle(np.array([i / k, 0.0]), np.array([(i + 1) / k, 1.0]))
        idx = np.nonzero(rect.contains(inputs.z_norm))[0]
        sub, rep = inputs.fit(idx)
        cells.append(Cell(rect, idx, i, rep))
        submodels.append(sub)
    return PartitionResult(tuple(cells), tuple(submodels), "converged", k)


def test_adjacency_cases():
    a = Hyperrectangle([0.0, 0.0], [0.5, 0.5])
    b = Hyperrectangle([0.5, 0.0], [1.0, 0.5])     # shares the x=0.5 facet
    c = Hyperrectangle([0.5, 0.5], [1.0, 1.0])     # corner contact with a
    d = Hyperrectangle([0.0, 0.5], [0.5, 1.0])     # shares y=0.5 facet with a
    e = Hyperrectangle([0.5, 0.25], [1.0, 0.75])   # T-junction against a
    assert adjacent(a, b) and adjacent(b, a)
    assert not adjacent(a, c)
    assert adjacent(a, d)
    assert adjacent(a, e)
    assert not adjacent(a, a)
    assert not adjacent(a, Hyperrectangle([0.6, 0.0], [1.0, 0.5]))


def test_merge_identical_laws_to_one():
    inputs = make_inputs(["A", "A"])
    part = strip_partition(inputs, 2)
    assert part.worst_gamma() <= 0.01
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01))
    assert out.s == 1
    assert out.assignment == (0, 0)
    assert len(out.history) == 1
    assert out.history[0].gamma <= 0.01
    assert all(r.gamma <= 0.01 for r in out.reports)


def test_no_merge_when_laws_differ():
    inputs = make_inputs(["A", "B"])
    part = strip_partition(inputs, 2)
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01))
    assert out.s == 2
    assert out.history == ()
    # prior parameters survive untouched
    for sub_before, sub_after in zip(part.submodels, out.submodels):
        np.testing.assert_array_equal(sub_before.mu, sub_after.mu)


def test_merge_groups_by_law():
    inputs = make_inputs(["A", "A", "B", "B"], n=1200)
    part = strip_partition(inputs, 4)
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01))
    assert out.s == 2
    assert out.assignment[0] == out.assignment[1]
    assert out.assignment[2] == out.assignment[3]
    assert out.assignment[0] != out.assignment[2]
    # bookkeeping: s drops by sum(len(tied) - 1) over history
    drops = sum(len(ev.tied) - 1 for ev in out.history)
    assert out.s == 4 - drops
    assert all(r.gamma <= 0.01 for r in out.reports)


def test_all_pairs_strategy_matches():
    inputs = make_inputs(["A", "A", "B", "B"], n=1200)
    part = strip_partition(inputs, 4)
    out = reduce_regions(
        part, inputs,
        MergeConfig(sigma=0.01, candidate_strategy="all_pairs_adjacent"))
    assert out.s == 2


def test_reduce_idempotent():
    inputs = make_inputs(["A", "A", "B"], n=900)
    part = strip_partition(inputs, 3)
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01))
    assert out.s == 2
    cells2 = tuple(
        Cell(c.rect, c.sample_idx, out.assignment[i], out.reports[i])
        for i, c in enumerate(part.cells))
    part2 = PartitionResult(cells2, out.submodels, "converged", 0)
    out2 = reduce_regions(part2, inputs, MergeConfig(sigma=0.01))
    assert out2.s == out.s
    assert out2.history == ()
    assert out2.assignment == out.assignment


def test_geometry_untouched():
    inputs = make_inputs(["A", "A"], n=500)
    part = strip_partition(inputs, 2)
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01))
    assert isinstance(out, MergeOutcome)
    # merging only reassigns; the caller's cells still carry the geometry
    for cell, before in zip(part.cells, strip_partition(inputs, 2).cells):
        np.testing.assert_array_equal(cell.rect.lo, before.rect.lo)
        np.testing.assert_array_equal(cell.rect.hi, before.rect.hi)


def test_compatible_subset_prunes_the_outlier():
    inputs = make_inputs(["A", "B", "A", "A"], n=1200)
    part = strip_partition(inputs, 4)
    blocks = [(i, part.cells[i].sample_idx) for i in range(4)]
    tied, shared, reports = find_compatible_subset(blocks, inputs, sigma=0.01)
    assert tied == [0, 2, 3]
    assert shared is not None
    assert min_grid_slope(CFG, shared.mu) >= CFG.epsilon - 1e-7
    assert all(rep.gamma <= 0.01 for rep in reports.values())


def test_compatible_subset_collapses_to_singleton():
    inputs = make_inputs(["A", "B"], n=600)
    part = strip_partition(inputs, 2)
    blocks = [(i, part.cells[i].sample_idx) for i in range(2)]
    tied, shared, reports = find_compatible_subset(blocks, inputs, sigma=0.01)
    # incompatible laws prune down to one region, whose solo fit certifies
    assert len(tied) == 1
    assert shared is not None
    assert reports[tied[0]].gamma <= 0.01


def test_attempt_budget():
    inputs = make_inputs(["A", "A"], n=500)
    part = strip_partition(inputs, 2)
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01, n_iter_max=0))
    assert out.s == 2 and out.n_attempts == 0


def test_merge_after_partitioning_two_piece():
    # partition a two-law dataset at sigma, then verify the reducer keeps
    # exactly the two laws and certifies sigma on every cell
    inputs = make_inputs(["A", "A", "B", "B"], n=1700, seed=5, gap=(0.48, 0.52))
    part = partition(inputs, PartitionConfig(sigma=0.01, nu=0.05, kappa=20))
    assert part.status == "converged"
    out = reduce_regions(part, inputs, MergeConfig(sigma=0.01))
    assert out.s == 2
    assert out.s <= part.r
    assert all(r.gamma <= 0.01 for r in out.reports)


def test_merge_config_validation():
    with pytest.raises(ValueError):
        MergeConfig(sigma=0.0)
    with pytest.raises(ValueError):
        MergeConfig(sigma=0.01, n_iter_max=-1)
    with pytest.raises(ValueError):
        MergeConfig(sigma=0.01, candidate_strategy="bogus")
