"""Deployable piecewise controller: cell lookup, evaluation, serialization.

A :class:`PwnlModel` packages the partition geometry, the per-region
monotone submodels and the raw-regressor scaler into one immutable
object.  Evaluation normalizes the regressor, clamps it into the unit
box, finds the unique half-open cell, forms the linear combination
``v = L . z`` of the cell's submodel and inverts the monotone
nonlinearity by fixed-depth bisection, saturating to the command range.

Two evaluation paths share one scalar routine: a pure-Python reference
and an optional numba-compiled version of the same function.  With
identical IEEE semantics (no fastmath) the two return bit-identical
results; the compiled path exists purely to keep per-call latency in
the microsecond range.

Models serialize to a versioned JSON schema.  Loading re-verifies every
structural invariant (cell coverage and disjointness, grid monotonicity
of each submodel), so a loaded model is as trustworthy as a freshly
assembled one.
"""

from __future__ import annotations

import importlib.util
import json
from dataclasses import dataclass, field

import numpy as np

from .basis import (
    BasisConfig,
    MonotoneSubmodel,
    OutputRange,
    alpha,
    gamma_inverse,
    gamma_span,
    min_grid_slope,
)
from .partition import Hyperrectangle

SCHEMA_VERSION = "pwnl-model/v1"

# cell volumes must tile the unit box up to accumulated rounding
_COVER_TOL = 1e-9
# same facet-closure tolerance as the partition geometry
_TOP_TOL = 1e-12
_SLOPE_TOL = 1e-9

_HAVE_NUMBA = importlib.util.find_spec("numba") is not None
_FAST_FN = None


class ModelFormatError(ValueError):
    """A model file failed schema or consistency checks."""


def _eval_scalar(z_raw, scal_lo, scal_hi, cells_lo, cells_hi, cell_sub,
                 mu_mat, lw_mat, alphas, q_lo, q_span):
    """Normalize, locate, combine, invert: one full evaluation.

    Written as plain scalar loops so numba can compile it unchanged;
    the pure-Python call is the reference semantics.
    """
    n_z = z_raw.shape[0]
    r = cells_lo.shape[0]
    n_b = mu_mat.shape[1]
    n_m = alphas.shape[0]

    # normalize into the unit box; constant dimensions pin to 0.5 and
    # out-of-domain states clamp to the nearest trained behavior
    zn = np.empty(n_z)
    for j in range(n_z):
        span = scal_hi[j] - scal_lo[j]
        if span > 0.0:
            t = (z_raw[j] - scal_lo[j]) / span
        else:
            t = 0.5
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        zn[j] = t

    # half-open membership scan; faces at the domain top stay closed
    ci = -1
    for c in range(r):
        ok = True
        for j in range(n_z):
            v = zn[j]
            if v < cells_lo[c, j]:
                ok = False
                break
            hi = cells_hi[c, j]
            if hi >= 1.0 - 1e-12:
                if v > hi:
                    ok = False
                    break
            elif v >= hi:
                ok = False
                break
        if ok:
            ci = c
            break
    if ci < 0:
        # numeric sliver between stored facets: nearest cell, first on ties
        best = np.inf
        ci = 0
        for c in range(r):
            d = 0.0
            for j in range(n_z):
                v = zn[j]
                e = 0.0
                if v < cells_lo[c, j]:
                    e = cells_lo[c, j] - v
                elif v > cells_hi[c, j]:
                    e = v - cells_hi[c, j]
                if e > d:
                    d = e
            if d < best:
                best = d
                ci = c

    s = cell_sub[ci]
    v = 0.0
    for j in range(n_z):
        v += lw_mat[s, j] * zn[j]

    # invert the nonlinearity: fixed-depth bisection on the normalized
    # output, saturating targets outside [gamma(0), gamma(1)]
    g0 = mu_mat[s, 0]
    span_g = 0.0
    for i in range(1, n_b):
        span_g += mu_mat[s, i]
    g1 = g0 + span_g
    if v <= g0:
        eta = 0.0
    elif v >= g1:
        eta = 1.0
    else:
        lo = 0.0
        hi = 1.0
        for _ in range(52):
            mid = 0.5 * (lo + hi)
            g = mu_mat[s, 0]
            for i in range(1, n_m):
                a = alphas[i]
                g += mu_mat[s, i] * ((1.0 + a) * mid / (1.0 + a * mid))
            for i in range(n_m):
                a = alphas[i]
                g += mu_mat[s, n_m + i] * (mid / (1.0 + a * (1.0 - mid)))
            if g < v:
                lo = mid
            else:
                hi = mid
        eta = 0.5 * (lo + hi)
    return q_lo + q_span * eta


def _fast_eval_fn():
    global _FAST_FN
    if _FAST_FN is None:
        from numba import njit

        _FAST_FN = njit(cache=True)(_eval_scalar)
    return _FAST_FN


@dataclass(frozen=True)
class ModelCell:
    """Geometry-only cell: a box and the submodel serving it."""

    rect: Hyperrectangle
    submodel_id: int

    def __post_init__(self):
        if int(self.submodel_id) != self.submodel_id or self.submodel_id < 0:
            raise ValueError(
                f"submodel_id must be a nonnegative integer, got {self.submodel_id}"
            )
        object.__setattr__(self, "submodel_id", int(self.submodel_id))


def _verify_geometry(cells):
    """Cells must tile the unit box: pairwise disjoint, volumes sum to 1."""
    n_z = cells[0].rect.n_z
    lo = np.stack([c.rect.lo for c in cells])
    hi = np.stack([c.rect.hi for c in cells])
    vol = float(np.sum(np.prod(hi - lo, axis=1)))
    if abs(vol - 1.0) > _COVER_TOL * max(1, len(cells)):
        raise ValueError(
            f"cells do not tile the unit box: total volume {vol!r}"
        )
    for c in range(len(cells)):
        ov_lo = np.maximum(lo[c], lo[c + 1:])
        ov_hi = np.minimum(hi[c], hi[c + 1:])
        clash = np.all(ov_hi - ov_lo > _TOP_TOL, axis=1)
        if np.any(clash):
            other = c + 1 + int(np.nonzero(clash)[0][0])
            raise ValueError(f"cells {c} and {other} overlap")
    return n_z


@dataclass(frozen=True)
class PwnlModel:
    """Explicit piecewise controller over a box-partitioned unit domain.

    Immutable after construction; evaluation is pure, so any number of
    threads may share one instance.
    """

    cfg: BasisConfig
    rng: OutputRange
    scaler_lo: np.ndarray
    scaler_hi: np.ndarray
    cells: tuple
    submodels: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        cells = tuple(self.cells)
        submodels = tuple(self.submodels)
        if not cells:
            raise ValueError("model needs at least one cell")
        if not submodels:
            raise ValueError("model needs at least one submodel")
        n_z = _verify_geometry(cells)
        scal_lo = np.asarray(self.scaler_lo, dtype=float).copy()
        scal_hi = np.asarray(self.scaler_hi, dtype=float).copy()
        if scal_lo.shape != (n_z,) or scal_hi.shape != (n_z,):
            raise ValueError("scaler bounds must have one entry per z dimension")
        if np.any(scal_hi < scal_lo):
            raise ValueError("scaler upper bounds must not fall below lower bounds")

        referenced = sorted({c.submodel_id for c in cells})
        if referenced[-1] >= len(submodels):
            raise ValueError(
                f"cell references submodel {referenced[-1]} but only "
                f"{len(submodels)} submodels are present"
            )
        for k, sm in enumerate(submodels):
            if sm.mu.shape != (self.cfg.n_b,):
                raise ValueError(f"submodel {k}: mu length != n_b")
            if sm.linear_weights.shape != (n_z,):
                raise ValueError(f"submodel {k}: linear weight length != n_z")
            if not gamma_span(self.cfg, sm.mu) > 0.0:
                raise ValueError(f"submodel {k}: nonlinearity is not invertible")
            if min_grid_slope(self.cfg, sm.mu) < self.cfg.epsilon - _SLOPE_TOL:
                raise ValueError(
                    f"submodel {k} violates the grid monotonicity floor"
                )
        meta = dict(self.meta)
        if "r" in meta and meta["r"] != len(cells):
            raise ValueError(f"meta r={meta['r']} but model has {len(cells)} cells")
        if "s" in meta and meta["s"] != len(referenced):
            raise ValueError(
                f"meta s={meta['s']} but {len(referenced)} submodels are referenced"
            )

        scal_lo.setflags(write=False)
        scal_hi.setflags(write=False)
        object.__setattr__(self, "scaler_lo", scal_lo)
        object.__setattr__(self, "scaler_hi", scal_hi)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "submodels", submodels)
        object.__setattr__(self, "meta", meta)

        # packed arrays for the scalar evaluator
        lo2d = np.ascontiguousarray(np.stack([c.rect.lo for c in cells]))
        hi2d = np.ascontiguousarray(np.stack([c.rect.hi for c in cells]))
        sub = np.ascontiguousarray([c.submodel_id for c in cells], dtype=np.int64)
        mu2d = np.ascontiguousarray(np.stack([sm.mu for sm in submodels]))
        lw2d = np.ascontiguousarray(
            np.stack([sm.linear_weights for sm in submodels]))
        packed = (np.ascontiguousarray(scal_lo), np.ascontiguousarray(scal_hi),
                  lo2d, hi2d, sub, mu2d, lw2d,
                  np.ascontiguousarray(alpha(self.cfg)),
                  float(self.rng.q_lo), float(self.rng.span))
        object.__setattr__(self, "_packed", packed)
        object.__setattr__(self, "_bucket", None)

    @property
    def n_z(self) -> int:
        return self.scaler_lo.size

    @property
    def r(self) -> int:
        return len(self.cells)

    @property
    def s(self) -> int:
        return len({c.submodel_id for c in self.cells})

    def normalize(self, z_raw) -> np.ndarray:
        """Scale raw regressors into [0, 1]^{n_z}, clamping overshoot."""
        z = np.asarray(z_raw, dtype=float)
        span = self.scaler_hi - self.scaler_lo
        safe = np.where(span > 0.0, span, 1.0)
        zn = (z - self.scaler_lo) / safe
        zn = np.where(span > 0.0, zn, 0.5)
        return np.clip(zn, 0.0, 1.0)

    def _contains(self, zn) -> np.ndarray:
        lo2d, hi2d = self._packed[2], self._packed[3]
        upper_closed = hi2d >= 1.0 - _TOP_TOL
        below = np.where(upper_closed, zn <= hi2d, zn < hi2d)
        return np.all((zn >= lo2d) & below, axis=1)

    def _nearest_cell(self, zn) -> int:
        lo2d, hi2d = self._packed[2], self._packed[3]
        gap = np.maximum(lo2d - zn, 0.0) + np.maximum(zn - hi2d, 0.0)
        return int(np.argmin(np.max(gap, axis=1)))

    def _bucket_index(self):
        if self._bucket is None:
            lo2d, hi2d = self._packed[2], self._packed[3]
            # bucket along the most-subdivided axis
            axis = int(np.argmax([np.unique(lo2d[:, j]).size
                                  for j in range(self.n_z)]))
            k = int(min(1024, max(4, 2 * self.r)))
            buckets = [[] for _ in range(k)]
            for c in range(self.r):
                b0 = max(0, int(np.floor(lo2d[c, axis] * k)))
                b1 = min(k, int(np.ceil(hi2d[c, axis] * k)))
                for b in range(b0, max(b1, b0 + 1)):
                    if b < k:
                        buckets[b].append(c)
            object.__setattr__(
                self, "_bucket",
                (axis, k, tuple(tuple(b) for b in buckets)))
        return self._bucket

    def locate(self, z_raw, use_index: bool = False) -> int:
        """Cell id serving a raw regressor (after normalize-and-clamp).

        ``use_index=True`` consults a uniform-grid bucket index along
        one axis; results are identical to the linear scan.
        """
        z = np.asarray(z_raw, dtype=float).ravel()
        if z.shape != (self.n_z,):
            raise ValueError(f"expected {self.n_z} regressor entries, got {z.shape}")
        zn = self.normalize(z)
        if use_index:
            axis, k, buckets = self._bucket_index()
            b = min(int(zn[axis] * k), k - 1)
            lo2d, hi2d = self._packed[2], self._packed[3]
            for c in buckets[b]:
                upper_closed = hi2d[c] >= 1.0 - _TOP_TOL
                below = np.where(upper_closed, zn <= hi2d[c], zn < hi2d[c])
                if np.all((zn >= lo2d[c]) & below):
                    return c
            return self._nearest_cell(zn)
        mask = self._contains(zn)
        hits = np.nonzero(mask)[0]
        if hits.size:
            return int(hits[0])
        return self._nearest_cell(zn)

    def eval(self, z_raw, mode: str = "auto") -> float:
        """Controller output for one raw regressor, always in the range.

        mode 'auto' uses the compiled path when numba is importable,
        'fast' requires it, 'reference' forces the pure-Python scalar
        routine.  The two paths are bit-identical.
        """
        z = np.ascontiguousarray(z_raw, dtype=float).ravel()
        if z.shape != (self.n_z,):
            raise ValueError(f"expected {self.n_z} regressor entries, got {z.shape}")
        if mode == "reference":
            fn = _eval_scalar
        elif mode == "fast":
            if not _HAVE_NUMBA:
                raise RuntimeError("numba is not installed; fast path unavailable")
            fn = _fast_eval_fn()
        elif mode == "auto":
            fn = _fast_eval_fn() if _HAVE_NUMBA else _eval_scalar
        else:
            raise ValueError(f"unknown eval mode {mode!r}")
        return float(fn(z, *self._packed))

    def eval_many(self, z_raw, mode: str = "auto") -> np.ndarray:
        """Row-wise :meth:`eval`; accepts an (n, n_z) array."""
        z = np.atleast_2d(np.asarray(z_raw, dtype=float))
        return np.array([self.eval(row, mode=mode) for row in z])


@dataclass(frozen=True)
class MimoModel:
    """Named single-output models sharing one regressor specification."""

    names: tuple
    models: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        models = tuple(self.models)
        if not names or len(names) != len(models):
            raise ValueError("need one name per model, at least one output")
        if len(set(names)) != len(names):
            raise ValueError("output names must be unique")
        first = models[0]
        for m in models[1:]:
            if m.n_z != first.n_z:
                raise ValueError("all outputs must share the regressor dimension")
            if (not np.array_equal(m.scaler_lo, first.scaler_lo)
                    or not np.array_equal(m.scaler_hi, first.scaler_hi)):
                raise ValueError("all outputs must share the regressor scaler")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "models", models)

    @property
    def n_z(self) -> int:
        return self.models[0].n_z

    def eval(self, z_raw, mode: str = "auto") -> dict:
        """Componentwise evaluation; insertion order follows ``names``."""
        return {n: m.eval(z_raw, mode=mode)
                for n, m in zip(self.names, self.models)}


def eval_mimo(mm: MimoModel, z_raw, mode: str = "auto") -> dict:
    return mm.eval(z_raw, mode=mode)


def assemble_model(cfg: BasisConfig, rng: OutputRange, scaler_lo, scaler_hi,
                   rects, assignment, submodels, sigma: float,
                   extra_meta: dict | None = None) -> PwnlModel:
    """Package partition/merge output, keeping only referenced submodels.

    ``rects`` and ``assignment`` pair each cell with a submodel index
    into ``submodels``; unreferenced submodels are dropped and ids are
    renumbered by first use.
    """
    assignment = list(assignment)
    if len(rects) != len(assignment):
        raise ValueError("rects and assignment must have equal length")
    order = []
    for sid in assignment:
        if sid not in order:
            order.append(sid)
    remap = {sid: k for k, sid in enumerate(order)}
    cells = tuple(ModelCell(rect, remap[sid])
                  for rect, sid in zip(rects, assignment))
    kept = tuple(submodels[sid] for sid in order)
    meta = dict(extra_meta or {})
    meta.update({"sigma": float(sigma), "s": len(kept), "r": len(cells)})
    return PwnlModel(cfg=cfg, rng=rng, scaler_lo=scaler_lo,
                     scaler_hi=scaler_hi, cells=cells, submodels=kept,
                     meta=meta)


def _floats(arr):
    return [float(v) for v in np.asarray(arr, dtype=float)]


def model_to_dict(m: PwnlModel) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "n_z": m.n_z,
        "basis": {
            "n_m": m.cfg.n_m,
            "beta": float(m.cfg.beta),
            "epsilon": float(m.cfg.epsilon),
            "eta_grid": _floats(m.cfg.eta_grid),
        },
        "range": {"q_lo": float(m.rng.q_lo), "q_hi": float(m.rng.q_hi)},
        "scaler": {"lo": _floats(m.scaler_lo), "hi": _floats(m.scaler_hi)},
        "cells": [{"lo": _floats(c.rect.lo), "hi": _floats(c.rect.hi),
                   "submodel": c.submodel_id} for c in m.cells],
        "submodels": [{"mu": _floats(sm.mu),
                       "L": _floats(sm.linear_weights)} for sm in m.submodels],
        "meta": m.meta,
    }


def mimo_to_dict(mm: MimoModel) -> dict:
    return {
        "version": SCHEMA_VERSION,
        "outputs": [{"name": n, "model": model_to_dict(m)}
                    for n, m in zip(mm.names, mm.models)],
    }


def _require(doc, key, kind):
    if not isinstance(doc, dict) or key not in doc:
        raise ModelFormatError(f"model file is missing the {key!r} field")
    val = doc[key]
    if not isinstance(val, kind):
        raise ModelFormatError(f"model field {key!r} has the wrong type")
    return val


def model_from_dict(doc: dict) -> PwnlModel:
    version = _require(doc, "version", str)
    if version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"unsupported model schema {version!r}; this build reads "
            f"{SCHEMA_VERSION!r}"
        )
    try:
        basis = _require(doc, "basis", dict)
        cfg = BasisConfig(n_m=basis["n_m"], beta=basis["beta"],
                          epsilon=basis["epsilon"],
                          eta_grid=np.asarray(basis["eta_grid"], dtype=float))
        rng_doc = _require(doc, "range", dict)
        rng = OutputRange(float(rng_doc["q_lo"]), float(rng_doc["q_hi"]))
        scaler = _require(doc, "scaler", dict)
        cells = tuple(
            ModelCell(Hyperrectangle(np.asarray(c["lo"], dtype=float),
                                     np.asarray(c["hi"], dtype=float)),
                      c["submodel"])
            for c in _require(doc, "cells", list))
        submodels = tuple(
            MonotoneSubmodel(mu=np.asarray(s["mu"], dtype=float),
                             linear_weights=np.asarray(s["L"], dtype=float))
            for s in _require(doc, "submodels", list))
        meta = doc.get("meta", {})
        if not isinstance(meta, dict):
            raise ModelFormatError("model field 'meta' has the wrong type")
        model = PwnlModel(cfg=cfg, rng=rng,
                          scaler_lo=np.asarray(scaler["lo"], dtype=float),
                          scaler_hi=np.asarray(scaler["hi"], dtype=float),
                          cells=cells, submodels=submodels, meta=meta)
        if int(doc["n_z"]) != model.n_z:
            raise ModelFormatError(
                f"declared n_z={doc['n_z']} but geometry has {model.n_z}")
        return model
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc


def mimo_from_dict(doc: dict) -> MimoModel:
    version = _require(doc, "version", str)
    if version != SCHEMA_VERSION:
        raise ModelFormatError(
            f"unsupported model schema {version!r}; this build reads "
            f"{SCHEMA_VERSION!r}"
        )
    outputs = _require(doc, "outputs", list)
    names, models = [], []
    for entry in outputs:
        if not isinstance(entry, dict) or "name" not in entry or "model" not in entry:
            raise ModelFormatError("each output needs 'name' and 'model' fields")
        names.append(str(entry["name"]))
        models.append(model_from_dict(entry["model"]))
    try:
        return MimoModel(names=tuple(names), models=tuple(models))
    except ValueError as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from exc


def save(obj, path) -> None:
    """Write a model (or named multi-output bundle) as schema-versioned JSON.

    Output bytes depend only on the model content, so identical models
    serialize identically.
    """
    if isinstance(obj, PwnlModel):
        doc = model_to_dict(obj)
    elif isinstance(obj, MimoModel):
        doc = mimo_to_dict(obj)
    else:
        raise TypeError(f"cannot save object of type {type(obj).__name__}")
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load(path):
    """Read a model file; returns :class:`PwnlModel` or :class:`MimoModel`.

    Every structural invariant is re-verified, and files from unknown
    schema versions are refused.
    """
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"not a valid model file: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError("model file must contain a JSON object")
    if "outputs" in doc:
        return mimo_from_dict(doc)
    return model_from_dict(doc)


def median_eval_latency(m, z_rows, mode: str = "auto",
                        warmup: int = 3) -> float:
    """Median wall-clock seconds per :meth:`PwnlModel.eval` call."""
    import time

    z_rows = np.atleast_2d(np.asarray(z_rows, dtype=float))
    for k in range(min(warmup, len(z_rows))):
        m.eval(z_rows[k], mode=mode)
    times = np.empty(len(z_rows))
    ev = m.eval
    pc = time.perf_counter
    for k in range(len(z_rows)):
        row = z_rows[k]
        t0 = pc()
        ev(row, mode=mode)
        times[k] = pc() - t0
    return float(np.median(times))
