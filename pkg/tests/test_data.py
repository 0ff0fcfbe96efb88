"""Dataset loading, scaling, tagging and weighting."""

import numpy as np
import pytest

from empcid.basis import BasisConfig, OutputRange, gamma_inverse
from empcid.data import (
    Dataset,
    Sample,
    WeightIndicator,
    gen_synthetic,
    load_dataset,
    save_dataset,
    tag_neighborhoods,
    weight_of,
)
from empcid.partition import Hyperrectangle


def test_scaler_round_trip():
    rs = np.random.default_rng(0)
    z = rs.normal(scale=[1e-3, 1.0, 1e4], size=(50, 3))
    ds = Dataset(z, rs.uniform(0, 1, 50))
    # round trip within 1e-12 at the scale of each coordinate
    err = np.abs(ds.unscale(ds.scale(z)) - z) / np.maximum(1.0, np.abs(z))
    assert err.max() <= 1e-12
    assert ds.z_norm.min() >= 0.0 and ds.z_norm.max() <= 1.0


def test_degenerate_dimension_maps_to_half(caplog):
    z = np.column_stack([np.full(10, 3.3), np.linspace(0, 1, 10)])
    with caplog.at_level("WARNING"):
        ds = Dataset(z, np.linspace(0, 1, 10))
    assert np.all(ds.z_norm[:, 0] == 0.5)
    assert "constant" in caplog.text


def test_constant_command_pads_range():
    ds = Dataset(np.random.default_rng(1).uniform(size=(5, 2)), np.full(5, 2.0))
    assert ds.rng.q_lo == 1.5 and ds.rng.q_hi == 2.5


def test_declared_range_must_contain_data():
    z = np.zeros((3, 1))
    with pytest.raises(ValueError):
        Dataset(z, [0.1, 0.5, 0.9], rng=OutputRange(0.2, 1.0))
    ds = Dataset(z, [0.1, 0.5, 0.9], rng=OutputRange(0.0, 1.0))
    assert ds.rng.q_hi == 1.0


def test_csv_round_trip(tmp_path):
    rs = np.random.default_rng(3)
    z = rs.normal(size=(20, 4))
    q = rs.uniform(2, 3, size=20)
    tags = [frozenset({"stationary"}) if i % 5 == 0 else frozenset()
            for i in range(20)]
    ds = Dataset(z, q, tags=tags)
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.n == 20 and back.n_z == 4
    np.testing.assert_array_equal(back.z_raw, ds.z_raw)
    np.testing.assert_array_equal(back.q, ds.q)
    assert back.tags == ds.tags


def test_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("z1,z2,q\n0,0,0\n")
    with pytest.raises(ValueError, match="header"):
        load_dataset(p)
    p.write_text("z1,z2,q,tag\n0.0,0.1,0.5,\n0.0,0.5,\n")
    with pytest.raises(ValueError, match="row 3"):
        load_dataset(p)
    p.write_text("z1,z2,q,tag\n0.0,abc,0.5,\n")
    with pytest.raises(ValueError, match="row 2"):
        load_dataset(p)
    p.write_text("z1,z2,q,tag\n0.0,0.1,0.5,weird\n")
    with pytest.raises(ValueError, match="tag"):
        load_dataset(p)
    p.write_text("z1,z2,q,tag\n0.0,0.1,0.5,\n")
    with pytest.raises(ValueError, match="n_z"):
        load_dataset(p, n_z=3)


def test_weight_priority():
    w = WeightIndicator(rho_st=100.0, rho_stab=10.0, rho_sw=2.0)
    assert weight_of(w, frozenset()) == 1.0
    assert weight_of(w, {"near_switch"}) == 2.0
    assert weight_of(w, {"near_switch", "near_stationary"}) == 10.0
    assert weight_of(w, {"stationary", "near_switch", "near_stationary"}) == 100.0
    with pytest.raises(ValueError):
        WeightIndicator(rho_sw=0.5)


def test_sample_validation():
    s = Sample([1.0, 2.0], 0.5, {"stationary"})
    assert s.tags == frozenset({"stationary"})
    with pytest.raises(ValueError):
        Sample([1.0], 0.5, {"bogus"})


def test_tag_neighborhoods_geometry():
    z = np.array([
        [0.50, 0.50],   # stationary anchor
        [0.51, 0.49],   # within 0.02 box of the anchor
        [0.55, 0.50],   # outside 0.02
        [0.496, 0.90],  # within 0.01 of the internal facet z1=0.5
        [0.52, 0.90],   # outside 0.01 of it
        [0.005, 0.30],  # near the domain boundary only: no switch tag
    ])
    tags = [frozenset({"stationary"})] + [frozenset()] * 5
    ds = Dataset(z, np.linspace(0.1, 0.9, 6), tags=tags,
                 scaler_lo=np.zeros(2), scaler_hi=np.ones(2))
    cells = [Hyperrectangle([0.0, 0.0], [0.5, 1.0]),
             Hyperrectangle([0.5, 0.0], [1.0, 1.0])]
    out = tag_neighborhoods(ds, r_stab=0.02, r_sw=0.01, cells=cells)
    assert "stationary" in out.tags[0]
    assert "near_stationary" in out.tags[1]
    assert "near_stationary" not in out.tags[2]
    assert "near_switch" in out.tags[3]
    assert "near_switch" not in out.tags[4]
    assert out.tags[5] == frozenset()
    # the anchor itself is near the facet too; stationary tag persists
    assert "stationary" in out.tags[0] and "near_switch" in out.tags[0]
    # without cells no switch tags appear
    out2 = tag_neighborhoods(ds, r_stab=0.02, r_sw=0.01)
    assert all("near_switch" not in t for t in out2.tags)


def test_tag_neighborhood_facet_extent():
    # a point level with an internal facet but far outside its rectangle
    # extent is not near the switching surface
    z = np.array([
        [0.50, 0.05],
        [0.495, 0.95],
    ])
    ds = Dataset(z, [0.2, 0.8], scaler_lo=np.zeros(2), scaler_hi=np.ones(2))
    cells = [Hyperrectangle([0.0, 0.5], [0.5, 1.0]),
             Hyperrectangle([0.5, 0.5], [1.0, 1.0]),
             Hyperrectangle([0.0, 0.0], [1.0, 0.5])]
    out = tag_neighborhoods(ds, r_sw=0.01, cells=cells)
    # first point: the z1=0.5 facet spans z2 in [0.5, 1]; z2=0.05 is 0.45
    # away from that extent, but the z2=0.5 facet of the bottom cell is
    # internal and 0.45 away too -- no switch tag
    assert "near_switch" not in out.tags[0]
    assert "near_switch" in out.tags[1]


class _LinearTruth:
    def __init__(self):
        self.n_z = 2
        self.rng = OutputRange(0.0, 1.0)

    def eval(self, z):
        return 0.2 + 0.3 * z[:, 0] + 0.4 * z[:, 1]


def test_gen_synthetic_deterministic():
    truth = _LinearTruth()
    a = gen_synthetic(truth, 100, noise=0.02, seed=5)
    b = gen_synthetic(truth, 100, noise=0.02, seed=5)
    c = gen_synthetic(truth, 100, noise=0.02, seed=6)
    np.testing.assert_array_equal(a.z_raw, b.z_raw)
    np.testing.assert_array_equal(a.q, b.q)
    assert not np.array_equal(a.q, c.q)
    assert a.rng == truth.rng
    assert a.q.min() >= 0.0 and a.q.max() <= 1.0
    # unit-box scaler: normalized coordinates equal the sampled ones
    np.testing.assert_array_equal(a.z_norm, a.z_raw)
