"""Datasets for inverse-law regression: loading, scaling, tagging, weights.

A learning dataset pairs regressor vectors ``z`` with the scalar command
``q`` an expert controller produced.  Regressors are min-max scaled to
the unit box once, at construction; every downstream stage (fitting,
partitioning, region lookup) works in normalized coordinates.  Samples
carry tags that mark where accuracy matters most -- exactly stationary
points, their neighborhoods, and neighborhoods of region switching
surfaces -- and a :class:`WeightIndicator` turns tags into the weights
used by the minimax fit.

CSV format: header ``z1,...,z<n_z>,q,tag`` with tag either empty or
``stationary``.  Derived tags (near_stationary, near_switch) are not
persisted; they are recomputed by :func:`tag_neighborhoods`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .basis import OutputRange

log = logging.getLogger(__name__)

TAG_STATIONARY = "stationary"
TAG_NEAR_STATIONARY = "near_stationary"
TAG_NEAR_SWITCH = "near_switch"
_KNOWN_TAGS = frozenset({TAG_STATIONARY, TAG_NEAR_STATIONARY, TAG_NEAR_SWITCH})

# Facets closer than this to the unit-box boundary count as domain faces,
# not switching surfaces.
_BOUNDARY_TOL = 1e-12


@dataclass(frozen=True)
class Sample:
    """One learning sample: raw regressor, command, and tags."""

    z_raw: np.ndarray
    q: float
    tags: frozenset = frozenset()

    def __post_init__(self):
        z = np.asarray(self.z_raw, dtype=float)
        if z.ndim != 1:
            raise ValueError("z_raw must be a 1-D array")
        z = z.copy()
        z.setflags(write=False)
        object.__setattr__(self, "z_raw", z)
        tags = frozenset(self.tags)
        unknown = tags - _KNOWN_TAGS
        if unknown:
            raise ValueError(f"unknown tags: {sorted(unknown)}")
        object.__setattr__(self, "tags", tags)


@dataclass(frozen=True)
class WeightIndicator:
    """Minimax weights by tag; untagged samples weigh 1.

    Priority when a sample carries several tags:
    stationary > near_stationary > near_switch.
    """

    rho_st: float = 100.0
    rho_stab: float = 10.0
    rho_sw: float = 2.0

    def __post_init__(self):
        for name in ("rho_st", "rho_stab", "rho_sw"):
            if not getattr(self, name) >= 1.0:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


def weight_of(w: WeightIndicator, tags) -> float:
    """Weight of a sample with the given tag set."""
    if TAG_STATIONARY in tags:
        return w.rho_st
    if TAG_NEAR_STATIONARY in tags:
        return w.rho_stab
    if TAG_NEAR_SWITCH in tags:
        return w.rho_sw
    return 1.0


class Dataset:
    """Immutable learning dataset with a fitted min-max scaler.

    Parameters
    ----------
    z_raw : (n, n_z) array
        Raw regressor rows.
    q : (n,) array
        Commands; must lie within ``rng``.
    tags : sequence of frozenset, optional
        Per-sample tag sets.
    rng : OutputRange, optional
        Command range.  Defaults to the data's [min q, max q], padded
        by 0.5 on each side when all commands are equal.
    scaler_lo, scaler_hi : (n_z,) arrays, optional
        Explicit scaler bounds; default to the per-dimension data
        min/max.  Dimensions with max == min map to the constant 0.5.
    """

    def __init__(self, z_raw, q, tags=None, rng=None, scaler_lo=None, scaler_hi=None):
        z_raw = np.atleast_2d(np.asarray(z_raw, dtype=float))
        q = np.asarray(q, dtype=float).ravel()
        if z_raw.shape[0] != q.size:
            raise ValueError(
                f"z_raw has {z_raw.shape[0]} rows but q has {q.size} entries"
            )
        if q.size == 0:
            raise ValueError("dataset must contain at least one sample")
        if not (np.all(np.isfinite(z_raw)) and np.all(np.isfinite(q))):
            raise ValueError("dataset contains non-finite values")

        if rng is None:
            q_lo, q_hi = float(q.min()), float(q.max())
            if q_hi <= q_lo:
                # constant command: pad so the output range stays a real
                # interval and the normalized command sits at 0.5
                q_lo, q_hi = q_lo - 0.5, q_hi + 0.5
            rng = OutputRange(q_lo, q_hi)
        else:
            if q.min() < rng.q_lo or q.max() > rng.q_hi:
                raise ValueError(
                    f"commands [{q.min()}, {q.max()}] fall outside the "
                    f"declared range [{rng.q_lo}, {rng.q_hi}]"
                )

        if tags is None:
            tags = [frozenset()] * q.size
        tags = tuple(frozenset(t) for t in tags)
        if len(tags) != q.size:
            raise ValueError("tags length does not match sample count")
        for t in tags:
            unknown = t - _KNOWN_TAGS
            if unknown:
                raise ValueError(f"unknown tags: {sorted(unknown)}")

        lo = np.asarray(
            z_raw.min(axis=0) if scaler_lo is None else scaler_lo, dtype=float
        ).copy()
        hi = np.asarray(
            z_raw.max(axis=0) if scaler_hi is None else scaler_hi, dtype=float
        ).copy()
        if lo.shape != (z_raw.shape[1],) or hi.shape != (z_raw.shape[1],):
            raise ValueError("scaler bounds must have one entry per z dimension")
        if np.any(hi < lo):
            raise ValueError("scaler upper bounds must not fall below lower bounds")
        degenerate = hi == lo
        if np.any(degenerate):
            log.warning(
                "z dimensions %s are constant; they normalize to 0.5",
                np.nonzero(degenerate)[0].tolist(),
            )

        self._z_raw = z_raw.copy()
        self._q = q.copy()
        self._tags = tags
        self._rng = rng
        self._lo = lo
        self._hi = hi
        self._degenerate = degenerate
        span = np.where(degenerate, 1.0, hi - lo)
        zn = (z_raw - lo) / span
        zn[:, degenerate] = 0.5
        self._z_norm = zn
        for arr in (self._z_raw, self._q, self._lo, self._hi, self._z_norm):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self._q.size

    @property
    def n_z(self) -> int:
        return self._z_raw.shape[1]

    @property
    def z_raw(self) -> np.ndarray:
        return self._z_raw

    @property
    def q(self) -> np.ndarray:
        return self._q

    @property
    def tags(self) -> tuple:
        return self._tags

    @property
    def rng(self) -> OutputRange:
        return self._rng

    @property
    def scaler_lo(self) -> np.ndarray:
        return self._lo

    @property
    def scaler_hi(self) -> np.ndarray:
        return self._hi

    @property
    def z_norm(self) -> np.ndarray:
        """Regressors scaled into [0, 1]^{n_z} by the fitted scaler."""
        return self._z_norm

    def scale(self, z_raw) -> np.ndarray:
        """Apply the fitted scaler to raw regressors (rows or a vector)."""
        z = np.asarray(z_raw, dtype=float)
        span = np.where(self._degenerate, 1.0, self._hi - self._lo)
        zn = (z - self._lo) / span
        if zn.ndim == 1:
            zn[self._degenerate] = 0.5
        else:
            zn[..., self._degenerate] = 0.5
        return zn

    def unscale(self, z_norm) -> np.ndarray:
        """Invert the scaler; degenerate dimensions return their constant."""
        z = np.asarray(z_norm, dtype=float)
        span = np.where(self._degenerate, 0.0, self._hi - self._lo)
        return self._lo + z * span

    def sample(self, i: int) -> Sample:
        return Sample(self._z_raw[i], float(self._q[i]), self._tags[i])

    def with_tags(self, tags) -> "Dataset":
        """Copy of the dataset with replaced tag sets (same scaler/range)."""
        return Dataset(
            self._z_raw,
            self._q,
            tags=tags,
            rng=self._rng,
            scaler_lo=self._lo,
            scaler_hi=self._hi,
        )

    def stationary_mask(self) -> np.ndarray:
        return np.array([TAG_STATIONARY in t for t in self._tags], dtype=bool)

    def weights(self, w: WeightIndicator) -> np.ndarray:
        """Per-sample minimax weights under the given indicator."""
        return np.array([weight_of(w, t) for t in self._tags], dtype=float)


def load_dataset(path, n_z=None, rng=None) -> Dataset:
    """Read a learning dataset from CSV (header ``z1..z<k>,q,tag``).

    Parameters
    ----------
    path : str or Path
        CSV file location.
    n_z : int, optional
        Expected regressor dimension; mismatch raises.
    rng : OutputRange, optional
        Declared command range; must contain the data.

    Raises
    ------
    ValueError
        On malformed header, wrong column counts, or unparsable numbers.
        Messages carry the 1-based row number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[-1] != "tag" or header[-2] != "q":
            raise ValueError(
                f"{path}: header must be z1,...,z<k>,q,tag, got {header!r}"
            )
        k = len(header) - 2
        expected = [f"z{i}" for i in range(1, k + 1)] + ["q", "tag"]
        if header != expected:
            raise ValueError(
                f"{path}: header must be z1,...,z<k>,q,tag, got {header!r}"
            )
        if n_z is not None and k != n_z:
            raise ValueError(f"{path}: expected n_z={n_z}, file has {k} z columns")

        zs, qs, tags = [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != k + 2:
                raise ValueError(
                    f"{path}: row {row_no}: expected {k + 2} columns, got {len(row)}"
                )
            try:
                zs.append([float(v) for v in row[:k]])
                qs.append(float(row[k]))
            except ValueError as exc:
                raise ValueError(f"{path}: row {row_no}: {exc}") from None
            tag = row[k + 1].strip()
            if tag == "":
                tags.append(frozenset())
            elif tag == TAG_STATIONARY:
                tags.append(frozenset({TAG_STATIONARY}))
            else:
                raise ValueError(
                    f"{path}: row {row_no}: unknown tag {tag!r} "
                    f"(expected empty or '{TAG_STATIONARY}')"
                )
    if not qs:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(zs), np.array(qs), tags=tags, rng=rng)


def save_dataset(ds: Dataset, path) -> None:
    """Write the raw regressors, commands and persistent tags to CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"z{i}" for i in range(1, ds.n_z + 1)] + ["q", "tag"])
        stat = ds.stationary_mask()
        for i in range(ds.n):
            tag = TAG_STATIONARY if stat[i] else ""
            writer.writerow(
                [repr(float(v)) for v in ds.z_raw[i]] + [repr(float(ds.q[i])), tag]
            )


def tag_neighborhoods(ds: Dataset, r_stab: float = 0.02, r_sw: float = 0.01,
                      cells=None) -> Dataset:
    """Derive near_stationary / near_switch tags from geometry.

    A non-stationary sample within ``r_stab`` (infinity norm, normalized
    coordinates) of any stationary sample becomes near_stationary.  When
    ``cells`` (objects with ``lo``/``hi`` unit-box bounds) are supplied,
    samples within ``r_sw`` of any *internal* cell facet -- one not on
    the domain boundary -- become near_switch.  Stationary tags persist;
    the returned dataset shares the scaler and range.
    """
    zn = ds.z_norm
    stat = ds.stationary_mask()
    near_stat = np.zeros(ds.n, dtype=bool)
    if stat.any():
        anchors = zn[stat]
        # chunk over anchors to bound the (n, n_anchor) distance matrix
        step = max(1, int(2e7) // max(ds.n, 1))
        for s in range(0, anchors.shape[0], step):
            d = np.max(np.abs(zn[:, None, :] - anchors[None, s:s + step, :]), axis=2)
            near_stat |= (d <= r_stab).any(axis=1)
        near_stat &= ~stat

    near_sw = np.zeros(ds.n, dtype=bool)
    if cells is not None:
        for cell in cells:
            lo = np.asarray(cell.lo, dtype=float)
            hi = np.asarray(cell.hi, dtype=float)
            for axis in range(ds.n_z):
                for plane in (lo[axis], hi[axis]):
                    if plane <= _BOUNDARY_TOL or plane >= 1.0 - _BOUNDARY_TOL:
                        continue
                    # infinity distance to the facet rectangle: offset along
                    # the axis, clamped overshoot on the remaining axes
                    d_axis = np.abs(zn[:, axis] - plane)
                    over = np.maximum(lo - zn, zn - hi)
                    over[:, axis] = 0.0
                    d_rest = np.max(np.maximum(over, 0.0), axis=1)
                    near_sw |= np.maximum(d_axis, d_rest) <= r_sw

    new_tags = []
    for i in range(ds.n):
        t = set()
        if stat[i]:
            t.add(TAG_STATIONARY)
        if near_stat[i]:
            t.add(TAG_NEAR_STATIONARY)
        if near_sw[i]:
            t.add(TAG_NEAR_SWITCH)
        new_tags.append(frozenset(t))
    return ds.with_tags(new_tags)


def gen_synthetic(truth, n: int, noise: float = 0.0, seed: int = 0) -> Dataset:
    """Sample a dataset from a known map on the unit box.

    ``truth`` must expose ``n_z``, ``rng`` (an :class:`OutputRange`) and
    ``eval(z)`` mapping (n, n_z) normalized regressors to commands.
    Regressors are uniform on [0, 1]^{n_z}; commands get additive
    uniform noise in [-noise, noise], clipped back into ``truth.rng``.
    The scaler is pinned to the unit box so normalized coordinates
    coincide with the sampled ones.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rs = np.random.default_rng(seed)
    z = rs.uniform(0.0, 1.0, size=(n, truth.n_z))
    q = np.asarray(truth.eval(z), dtype=float)
    if noise > 0.0:
        q = q + rs.uniform(-noise, noise, size=n)
    q = np.clip(q, truth.rng.q_lo, truth.rng.q_hi)
    return Dataset(
        z, q, rng=truth.rng,
        scaler_lo=np.zeros(truth.n_z), scaler_hi=np.ones(truth.n_z),
    )
