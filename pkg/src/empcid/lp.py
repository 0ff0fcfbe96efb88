"""Dense linear programming with exact dual extraction.

Everything downstream of the regression stages -- minimax fits, merge
decisions, the multiplier-driven removal rule -- consumes not just LP
optima but their dual vectors, so the solver is built in-house where the
dual conventions, pivoting determinism, and tolerances are all pinned:

* two-phase revised simplex on the standard form min c'x, Ax = b, x >= 0,
  with an explicitly maintained basis inverse (rank-1 updates, periodic
  refactorization through LU) on a row/column-equilibrated copy;
* Dantzig pricing with an exact ratio test: the step is always the exact
  minimum ratio, so every iterate is a true basic solution and
  feasibility never erodes.  Rows whose direction entry is negligible
  against the column cannot block (a near-zero denominator under a
  rounding-level numerator fabricates huge false ratios), and among
  rows tied at the minimum the largest pivot wins.  After a long
  degenerate stall both pivot choices switch to Bland's rule until the
  objective moves again;
* the fast pass refactors periodically and defers any column whose
  blocking pivot is noise-sized; if every improving column ends up
  deferred, or a basis check fails, the solve restarts in a safe mode
  (refactorization and feasibility check at every pivot, no deferrals);
* duplicate inequality rows are dropped up front (they are redundant and
  the dropped copies get multiplier zero), and an artificial variable
  that cannot leave the basis through a decent pivot stays basic at zero
  instead, pinned there through the second phase; the returned point is
  verified against the standard-form equalities, so a pinned artificial
  that drifted cannot masquerade as an optimum;
* general problems (free variables, inequality + equality rows) are
  reduced to standard form; when a problem has many more rows than
  columns -- every fit LP does -- its dual is solved instead, and the
  primal optimum is recovered from the simplex multipliers.  A dual
  solve that ends numerically stuck is redone directly on the primal,
  whose slack columns make for better-behaved bases.

Dual sign conventions, fixed by finite-difference sensitivity:
``duals_eq[i]`` is d(objective)/d(b_eq[i]); ``duals_ub`` is nonnegative
with d(objective)/d(b_ub[j]) = -duals_ub[j].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import BasisConfig, OutputRange, basis_deriv, basis_eval

# Feasibility of returned primal points (tested against constraints).
FEAS_TOL = 1e-8
# Complementary-slackness defect bound at optimality.
CS_TOL = 1e-6

_RC_TOL = 1e-9        # reduced-cost threshold for entering candidates
_PIV_REL = 1e-4       # pivots below this fraction of the column are noise
_DEGEN_STALL = 64     # degenerate pivots before switching to Bland's rule
_REFACTOR_EVERY = 40


@dataclass(frozen=True)
class LinearProgram:
    """min c'x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq  (x free).

    Row labels are opaque identifiers callers may attach to rows (the
    merge stage labels its equality rows by region) and are carried
    through to interpretation of the dual vectors.
    """

    c: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    labels_ub: tuple = ()
    labels_eq: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel().copy()
        n = c.size
        if n == 0:
            raise ValueError("LP needs at least one variable")
        A_ub = np.asarray(self.A_ub, dtype=float).reshape(-1, n).copy()
        b_ub = np.asarray(self.b_ub, dtype=float).ravel().copy()
        A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n).copy()
        b_eq = np.asarray(self.b_eq, dtype=float).ravel().copy()
        if A_ub.shape[0] != b_ub.size or A_eq.shape[0] != b_eq.size:
            raise ValueError("constraint matrix/vector row counts disagree")
        for arr in (c, A_ub, b_ub, A_eq, b_eq):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP data must be finite")
        labels_ub = tuple(self.labels_ub) or tuple(range(b_ub.size))
        labels_eq = tuple(self.labels_eq) or tuple(range(b_eq.size))
        if len(labels_ub) != b_ub.size or len(labels_eq) != b_eq.size:
            raise ValueError("row label counts disagree with row counts")
        for name, arr in (("c", c), ("A_ub", A_ub), ("b_ub", b_ub),
                          ("A_eq", A_eq), ("b_eq", b_eq)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "labels_ub", labels_ub)
        object.__setattr__(self, "labels_eq", labels_eq)

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m_ub(self) -> int:
        return self.b_ub.size

    @property
    def m_eq(self) -> int:
        return self.b_eq.size


@dataclass(frozen=True)
class LpSolution:
    """Solver verdict: status is 'optimal', 'infeasible' or 'unbounded';
    x/duals are populated only when optimal."""

    status: str
    x: np.ndarray | None
    objective: float
    duals_ub: np.ndarray | None
    duals_eq: np.ndarray | None

    def __post_init__(self):
        if self.status not in ("optimal", "infeasible", "unbounded"):
            raise ValueError(f"unknown status {self.status!r}")


class _SimplexError(RuntimeError):
    pass


class _NumericTrouble(Exception):
    """Basis went numerically bad; the solve restarts in safe mode."""


def _checked_basis_inverse(A_full, basis, m):
    """LU-refactored basis inverse, or _NumericTrouble when singular."""
    lu = scipy.linalg.lu_factor(A_full[:, basis], check_finite=False)
    diag = np.abs(np.diag(lu[0]))
    if not np.all(np.isfinite(diag)) or diag.min() <= 1e-13 * max(1.0, diag.max()):
        raise _NumericTrouble("singular basis")
    return scipy.linalg.lu_solve(lu, np.eye(m), check_finite=False)


def _simplex_standard(A, b, c, maxiter=50000):
    """min c'x s.t. Ax = b, x >= 0.

    Returns (status, x, y, objective) where y solves B'y = c_B for the
    final basis, i.e. y[i] = d(objective)/d(b[i]) at the optimum.

    Runs a fast pass (Dantzig pricing, periodic refactorization,
    noise-pivot columns deferred) and, should the basis turn numerically
    bad -- possible under heavy degeneracy -- retries once in a safe
    mode that refactors and checks feasibility at every pivot and never
    defers a column.
    """
    try:
        return _simplex_once(A, b, c, maxiter, safe=False)
    except _NumericTrouble:
        pass
    try:
        return _simplex_once(A, b, c, maxiter, safe=True)
    except _NumericTrouble as exc:
        raise _SimplexError(f"simplex numerically stuck: {exc}") from exc


def _simplex_once(A, b, c, maxiter, safe):
    A_in = np.array(A, dtype=float)
    b_in = np.array(b, dtype=float).ravel()
    A = np.array(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel().copy()
    c_orig = np.asarray(c, dtype=float)
    m, n = A.shape
    if m == 0:
        # no constraints: the origin is optimal iff no cost is negative
        if np.any(c_orig < -_RC_TOL):
            return "unbounded", None, np.zeros(0), -np.inf
        return "optimal", np.zeros(n), np.zeros(0), 0.0

    # equilibrate: unit-max rows then unit-max columns; the raw problems
    # mix slope rows of order 1e4 with residual rows of order 1e-1,
    # which no single pivot tolerance can serve.  Column scaling leaves
    # the basis duals untouched; row scaling is undone on the way out.
    row_scale = np.maximum(np.max(np.abs(A), axis=1), 1e-12)
    A = A / row_scale[:, None]
    b = b / row_scale
    col_scale = np.maximum(np.max(np.abs(A), axis=0), 1e-12)
    A = A / col_scale[None, :]
    c = c_orig / col_scale

    flip = b < 0.0
    A = np.where(flip[:, None], -A, A)
    b = np.where(flip, -b, b)
    m_orig = m
    orig_rows = np.arange(m)           # kept-row positions in the input order
    scale_b = max(1.0, float(np.max(np.abs(b))))
    # Ill-conditioned transient bases leave rounding-level negatives in
    # the recomputed iterate; values below the crumb level are real
    # accumulated damage and abort the pass.
    feas_slack = 1e-7 * scale_b
    crumb = 1e-9 * scale_b
    refactor_every = 1 if safe else _REFACTOR_EVERY

    # phase 1: artificial identity basis
    A_full = np.hstack([A, np.eye(m)])
    basis = np.arange(n, n + m)
    B_inv = np.eye(m)
    xB = b.copy()

    def refreshed(basis):
        """Fresh basis inverse and iterate; trouble if feasibility slid.

        The recomputed values are kept as they are, rounding-level
        negatives included: they are the true basic solution, and hiding
        them would only let errors compound unseen.
        """
        B_inv = _checked_basis_inverse(A_full, basis, m)
        xB = B_inv @ b
        if xB.min() < -feas_slack:
            raise _NumericTrouble("iterate lost feasibility")
        return B_inv, xB

    def run(cost, active_n, basis, B_inv, xB, phase):
        """Pivot until optimal/unbounded over columns [0, active_n)."""
        degen_run = 0
        bland = False
        since_refactor = 0
        skip = np.zeros(active_n, dtype=bool)
        defer = np.zeros(active_n, dtype=bool)
        for _ in range(maxiter):
            cB = cost[basis]
            y = cB @ B_inv
            d = cost[:active_n] - y @ A_full[:, :active_n]
            d[basis[basis < active_n]] = 0.0
            d[skip | defer] = 0.0
            # entering threshold relative to the dual magnitude: an
            # ill-conditioned basis inflates y with noise, which must
            # not fabricate entering candidates (the equilibrated data
            # keeps genuine reduced costs near unit scale)
            rc_tol = _RC_TOL * (1.0 + float(np.max(np.abs(y))))
            if bland:
                cand = np.nonzero(d < -rc_tol)[0]
                j = int(cand[0]) if cand.size else -1
            else:
                j = int(np.argmin(d))
                if d[j] >= -rc_tol:
                    j = -1
            if j < 0:
                if defer.any():
                    # every improving column is stuck behind a noise pivot;
                    # executing one anyway would wreck the basis
                    raise _NumericTrouble("improving columns blocked by "
                                          "noise pivots")
                return "optimal", basis, B_inv, xB, y
            w = B_inv @ A_full[:, j]
            w_max = float(np.max(np.abs(w)))
            if w_max <= 1e-7:
                # direction numerically null in this basis; the apparent
                # improvement is illusory, drop the column for good
                skip[j] = True
                continue
            # a basic artificial sits pinned at zero: any step whose
            # direction would genuinely raise it silently re-relaxes that
            # equality, so the artificial leaves right now on an
            # essentially zero step, or the column waits
            art_neg = (basis >= active_n) & (w < -_PIV_REL * w_max)
            if np.any(art_neg):
                rows = np.nonzero(art_neg)[0]
                r = int(rows[np.argmax(np.abs(w[rows]))])
                if abs(xB[r]) > 0.1 * feas_slack * abs(w[r]):
                    # kicking it would inject its residual into the
                    # entering variable; block the column instead
                    defer[j] = True
                    continue
                theta = float(xB[r] / w[r])
            else:
                # Exact ratio test.  Rows with negligible direction
                # entries cannot block: a rounding-level numerator over
                # a near-zero denominator fabricates huge false ratios
                # and forces conditioning-wrecking pivots.  Rows already
                # holding a rounding-level negative block only through a
                # decent entry (ratio within the crumb level), never
                # through an amplified one.
                pos = w > 1e-7 * w_max
                if np.any(pos):
                    ratios = np.full(m, np.inf)
                    ratios[pos] = xB[pos] / w[pos]
                    ratios[ratios < -crumb] = np.inf
                    tmin = float(np.min(ratios))
                else:
                    tmin = np.inf
                if not np.isfinite(tmin):
                    # nothing trustworthy blocks this direction: declare
                    # it unbounded only if no discarded row would have --
                    # otherwise hold the column back
                    loose = (w > 1e-9 * w_max) & ((xB > feas_slack) | pos)
                    if np.any(loose):
                        defer[j] = True
                        continue
                    return "unbounded", basis, B_inv, xB, y
                # among rows tied at the exact minimum (a degenerate
                # vertex ties many), the largest pivot keeps the basis
                # best conditioned; under Bland the lowest variable
                # index leaves so stalls provably terminate
                tie = 1e-9 * max(1.0, abs(tmin))
                cand = np.nonzero(ratios <= tmin + tie)[0]
                if bland:
                    r = int(cand[np.argmin(basis[cand])])
                else:
                    r = int(cand[np.argmax(w[cand])])
                if not safe and not bland and w[r] < _PIV_REL * w_max:
                    # the forced pivot is noise-sized against the column;
                    # hold the column back until the vertex changes (the
                    # safe retry takes such pivots under full checking)
                    defer[j] = True
                    continue
                theta = float(ratios[r])
            if theta <= 1e-12 * scale_b:
                degen_run += 1
                if degen_run >= _DEGEN_STALL:
                    bland = True
            else:
                degen_run = 0
                bland = False
            # the step is the chosen row's exact ratio, so the updated
            # iterate is the true basic solution of the new basis (and
            # rounding-level negatives stay visible)
            xB = xB - theta * w
            xB[r] = theta
            if n <= basis[r] < active_n:
                # an artificial that leaves is done for good: letting it
                # re-enter on phantom (noise-driven) reduced costs is the
                # classic conditioning death spiral
                skip[basis[r]] = True
            basis[r] = j
            piv = w[r]
            B_inv[r, :] /= piv
            others = np.arange(m) != r
            B_inv[others, :] -= np.outer(w[others], B_inv[r, :])
            defer[:] = False
            since_refactor += 1
            if since_refactor >= refactor_every:
                since_refactor = 0
                B_inv, xB = refreshed(basis)
        raise _NumericTrouble(f"iteration limit hit in phase {phase}")

    cost1 = np.concatenate([np.zeros(n), np.ones(m)])
    status, basis, B_inv, xB, _ = run(cost1, n + m, basis, B_inv, xB, 1)
    if status != "optimal":
        raise _SimplexError("phase 1 cannot be unbounded")
    # ill conditioning leaves the phase-1 objective slightly off zero
    # even for feasible problems; a genuinely infeasible one overshoots
    # this margin by orders of magnitude
    if float(cost1[basis] @ xB) > 100.0 * FEAS_TOL * scale_b:
        return "infeasible", None, None, np.nan

    # drive zero-valued artificials out of the basis where a decent pivot
    # exists; a row offering no structural pivot at all is redundant and
    # dropped, while one offering only noise pivots -- or whose artificial
    # holds a genuine residual -- keeps its artificial basic, pinned
    # through phase 2 (pivoting through noise is how a basis goes
    # singular, and fiat-zeroing a residual breaks the iterate)
    keep_rows = np.ones(m, dtype=bool)
    for r in range(m):
        if basis[r] < n or xB[r] > feas_slack:
            continue
        row = B_inv[r, :] @ A_full[:, :n]
        row[basis[basis < n]] = 0.0
        j = int(np.argmax(np.abs(row)))
        if abs(row[j]) <= 1e-7:
            keep_rows[r] = False
            continue
        w = B_inv @ A_full[:, j]
        if abs(w[r]) >= _PIV_REL * float(np.max(np.abs(w))):
            piv = w[r]
            basis[r] = j
            B_inv[r, :] /= piv
            others = np.arange(m) != r
            B_inv[others, :] -= np.outer(w[others], B_inv[r, :])
            xB[r] = 0.0
    if not keep_rows.all():
        # remaining artificials are renamed to their rows' new positions
        art = basis >= n
        basis[art] = n + np.searchsorted(np.nonzero(keep_rows)[0],
                                         basis[art] - n)
        A = A[keep_rows]
        b = b[keep_rows]
        orig_rows = orig_rows[keep_rows]
        basis = basis[keep_rows]
        m = A.shape[0]
        A_full = np.hstack([A, np.eye(m)])
        scale_b = max(1.0, float(np.max(np.abs(b))))
    B_inv, xB = refreshed(basis)

    cost2 = np.concatenate([c, np.zeros(A_full.shape[1] - n)])
    status, basis, B_inv, xB, y = run(cost2, n, basis, B_inv, xB, 2)
    if status == "unbounded":
        return "unbounded", None, None, -np.inf

    # refactor once more so x and y carry LU-solve precision, not the
    # accumulated product-form updates
    lu = scipy.linalg.lu_factor(A_full[:, basis], check_finite=False)
    diag = np.abs(np.diag(lu[0]))
    if not np.all(np.isfinite(diag)) or diag.min() <= 1e-13 * max(1.0, diag.max()):
        raise _NumericTrouble("singular final basis")
    xB = scipy.linalg.lu_solve(lu, b)
    y = scipy.linalg.lu_solve(lu, cost2[basis], trans=1)
    x = np.zeros(n)
    struct = basis < n
    x[basis[struct]] = np.maximum(xB[struct], 0.0)
    x = x / col_scale
    # express duals in the caller's row order: dropped (redundant) rows get
    # multiplier 0, sign-flipped rows get their multiplier flipped back;
    # column scaling leaves duals alone, row scaling is inverted here
    y_full = np.zeros(m_orig)
    y_full[orig_rows] = y
    y_full[flip] = -y_full[flip]
    y_full = y_full / row_scale
    return "optimal", x, y_full, float(c_orig @ x)


def _solve_direct(lp: LinearProgram) -> LpSolution:
    n, m_ub, m_eq = lp.n, lp.m_ub, lp.m_eq
    A = np.zeros((m_ub + m_eq, 2 * n + m_ub))
    A[:m_ub, :n] = lp.A_ub
    A[:m_ub, n:2 * n] = -lp.A_ub
    A[:m_ub, 2 * n:] = np.eye(m_ub)
    A[m_ub:, :n] = lp.A_eq
    A[m_ub:, n:2 * n] = -lp.A_eq
    b = np.concatenate([lp.b_ub, lp.b_eq])
    c = np.concatenate([lp.c, -lp.c, np.zeros(m_ub)])
    status, xs, y, obj = _simplex_standard(A, b, c)
    if status != "optimal":
        return LpSolution(status, None, obj, None, None)
    x = xs[:n] - xs[n:2 * n]
    duals_ub = np.maximum(-y[:m_ub], 0.0)
    duals_eq = y[m_ub:].copy()
    return LpSolution("optimal", x, float(lp.c @ x), duals_ub, duals_eq)


def _solve_via_dual(lp: LinearProgram, direct_fallback: bool = True) -> LpSolution:
    # dual of min c'x, Gx <= h, Ax = b:
    #   min h'lam + b'nu  s.t.  G'lam + A'nu = -c,  lam >= 0, nu free
    n, m_ub, m_eq = lp.n, lp.m_ub, lp.m_eq
    A = np.zeros((n, m_ub + 2 * m_eq))
    A[:, :m_ub] = lp.A_ub.T
    A[:, m_ub:m_ub + m_eq] = lp.A_eq.T
    A[:, m_ub + m_eq:] = -lp.A_eq.T
    b = -lp.c
    c = np.concatenate([lp.b_ub, lp.b_eq, -lp.b_eq])
    status, xd, y, obj = _simplex_standard(A, b, c)
    if status == "unbounded":
        # unbounded dual certifies an infeasible primal
        return LpSolution("infeasible", None, np.nan, None, None)
    if status == "infeasible":
        # primal is unbounded or infeasible; settle it directly unless
        # the caller only needs the cheap verdict (row generation grows
        # its working set on either outcome)
        if direct_fallback:
            return _solve_direct(lp)
        return LpSolution("unbounded", None, -np.inf, None, None)
    x = y.copy()
    duals_ub = xd[:m_ub].copy()
    duals_eq = -(xd[m_ub:m_ub + m_eq] - xd[m_ub + m_eq:])
    return LpSolution("optimal", x, float(lp.c @ x), duals_ub, duals_eq)


def _solve_by_shape(lp: LinearProgram, exact: bool = True) -> LpSolution:
    tall = lp.m_ub + lp.m_eq >= max(2 * lp.n, lp.n + 10)
    if tall:
        return _solve_via_dual(lp, direct_fallback=exact)
    return _solve_direct(lp)


# inequality-row count beyond which delayed row generation pays off
_ROWGEN_MIN = 512


def _solve_rowgen(lp: LinearProgram) -> LpSolution:
    """Delayed row generation for few variables and many inequality rows.

    Solves the LP restricted to a spread working subset of the ub rows,
    then repeatedly adds the worst violated rows and re-solves.  Once no
    row is violated, the relaxation's optimum is feasible for the full
    problem and therefore optimal for it; rows never brought in are
    inactive and carry zero multipliers.  Large sample sets with heavy
    row duplication (steady-state data) stay out of the simplex, which
    only ever sees small, mildly degenerate subproblems.
    """
    m_ub, n = lp.m_ub, lp.n
    stride = max(1, m_ub // (8 * n + 64))
    work = np.zeros(m_ub, dtype=bool)
    work[::stride] = True
    scale = max(1.0, float(np.max(np.abs(lp.b_ub))))
    for _ in range(m_ub + 2):
        all_in = bool(work.all())
        idx = np.nonzero(work)[0]
        sub = LinearProgram(c=lp.c, A_ub=lp.A_ub[idx], b_ub=lp.b_ub[idx],
                            A_eq=lp.A_eq, b_eq=lp.b_eq)
        sol = _solve_by_shape(sub, exact=all_in)
        if sol.status == "infeasible":
            # a relaxation already infeasible settles the full problem
            return LpSolution("infeasible", None, np.nan, None, None)
        if sol.status == "unbounded":
            if all_in:
                return LpSolution("unbounded", None, -np.inf, None, None)
            stride = max(1, stride // 4)
            work[::stride] = True
            continue
        viol = lp.A_ub @ sol.x - lp.b_ub
        bad = (viol > 1e-9 * scale) & ~work
        if not bad.any():
            duals_ub = np.zeros(m_ub)
            duals_ub[idx] = sol.duals_ub
            return LpSolution("optimal", sol.x, sol.objective,
                              duals_ub, sol.duals_eq)
        rows = np.nonzero(bad)[0]
        order = np.argsort(viol[rows], kind="stable")[::-1]
        work[rows[order][:max(2 * n, 64)]] = True
    raise _SimplexError("row generation failed to converge")


def solve_lp(lp: LinearProgram, route: str = "auto") -> LpSolution:
    """Solve an LP; deterministic for identical input.

    ``route`` picks the internal reduction: 'direct' converts the given
    problem to standard form, 'dual' solves its dual (efficient when
    rows far outnumber variables), 'rowgen' grows a working subset of
    the inequality rows (efficient when they vastly outnumber the
    variables), 'auto' chooses by shape.  All routes satisfy the same
    contract; optima differ at most within tie tolerance.
    """
    if route not in ("auto", "direct", "dual", "rowgen"):
        raise ValueError(f"unknown route {route!r}")
    # duplicate inequality rows are redundant yet poisonous: dualized they
    # become identical columns whose bases are singular by construction.
    # Sample sets with long steady-state holds produce them en masse, so
    # exact duplicates are dropped here and their multipliers restored as
    # zero (the retained copy carries the constraint).
    keep = None
    m_ub_orig = lp.m_ub
    if lp.m_ub >= 2:
        rows = np.hstack([lp.A_ub, lp.b_ub[:, None]])
        _, first = np.unique(rows, axis=0, return_index=True)
        if first.size < lp.m_ub:
            keep = np.sort(first)
            labels = (tuple(lp.labels_ub[i] for i in keep)
                      if lp.labels_ub else ())
            lp = LinearProgram(c=lp.c, A_ub=lp.A_ub[keep], b_ub=lp.b_ub[keep],
                               A_eq=lp.A_eq, b_eq=lp.b_eq,
                               labels_ub=labels, labels_eq=lp.labels_eq)
    if route == "rowgen" or (route == "auto"
                             and lp.m_ub >= max(_ROWGEN_MIN, 8 * lp.n)):
        sol = _solve_rowgen(lp)
    elif route == "auto":
        sol = _solve_by_shape(lp)
    else:
        sol = _solve_via_dual(lp) if route == "dual" else _solve_direct(lp)
    if keep is not None and sol.status == "optimal":
        duals_ub = np.zeros(m_ub_orig)
        duals_ub[keep] = sol.duals_ub
        sol = LpSolution("optimal", sol.x, sol.objective,
                         duals_ub, sol.duals_eq)
    return sol


def check_solution(lp: LinearProgram, sol: LpSolution,
                   feas_tol: float = FEAS_TOL, cs_tol: float = CS_TOL) -> dict:
    """Measure feasibility, stationarity and complementary slackness.

    Returns the defect magnitudes; callers assert against tolerances.
    """
    if sol.status != "optimal":
        raise ValueError("only optimal solutions can be checked")
    x = sol.x
    slack_ub = lp.b_ub - lp.A_ub @ x if lp.m_ub else np.zeros(0)
    eq_resid = lp.A_eq @ x - lp.b_eq if lp.m_eq else np.zeros(0)
    # stationarity: c + G'lam - A'duals_eq = 0 with lam = duals_ub
    grad = lp.c.copy()
    if lp.m_ub:
        grad += lp.A_ub.T @ sol.duals_ub
    if lp.m_eq:
        grad -= lp.A_eq.T @ sol.duals_eq
    comp = np.abs(sol.duals_ub * slack_ub) if lp.m_ub else np.zeros(0)
    scale = max(1.0, float(np.max(np.abs(x))))
    return {
        "primal_ub": float(np.max(-slack_ub, initial=0.0)) / scale,
        "primal_eq": float(np.max(np.abs(eq_resid), initial=0.0)) / scale,
        "stationarity": float(np.max(np.abs(grad), initial=0.0)),
        "complementarity": float(np.max(comp, initial=0.0)),
        "dual_sign": float(np.max(-sol.duals_ub, initial=0.0)) if lp.m_ub else 0.0,
    }


# ---------------------------------------------------------------------------
# problem builders


def _residual_blocks(z_norm, q, weights, cfg, rng):
    z_norm = np.atleast_2d(np.asarray(z_norm, dtype=float))
    q = np.asarray(q, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if z_norm.shape[0] != q.size or w.size != q.size:
        raise ValueError("z_norm, q and weights must have matching lengths")
    if np.any(w <= 0.0):
        raise ValueError("weights must be positive")
    B = basis_eval(cfg, rng.normalize(q))
    return z_norm, q, w, B


def build_fit_lp(z_norm, q, weights, cfg: BasisConfig, rng: OutputRange
                 ) -> LinearProgram:
    """Weighted minimax fit of one region as an epigraph LP.

    Variables are [mu (n_b), linear weights (n_z), t].  For every sample
    the two rows ``+-w_k (B(xi(q_k)) mu - z_k . L) <= t`` bound the
    weighted implicit residual; the trailing rows keep the directional
    slope of the nonlinearity above epsilon on the config grid, which
    makes the LP feasible for any data (mu can always climb steeply
    enough) and the fitted map invertible.
    """
    z_norm, q, w, B = _residual_blocks(z_norm, q, weights, cfg, rng)
    n_s, n_z = z_norm.shape
    n_b = cfg.n_b
    n_x = n_b + n_z + 1

    A = np.zeros((2 * n_s + cfg.n_grid, n_x))
    wB = w[:, None] * B
    wZ = w[:, None] * z_norm
    A[0:2 * n_s:2, :n_b] = wB
    A[0:2 * n_s:2, n_b:n_b + n_z] = -wZ
    A[1:2 * n_s:2, :n_b] = -wB
    A[1:2 * n_s:2, n_b:n_b + n_z] = wZ
    A[:2 * n_s, -1] = -1.0
    A[2 * n_s:, :n_b] = -basis_deriv(cfg, cfg.eta_grid)
    b = np.zeros(2 * n_s + cfg.n_grid)
    b[2 * n_s:] = -cfg.epsilon
    c = np.zeros(n_x)
    c[-1] = 1.0
    labels = [lab for k in range(n_s) for lab in (("res+", k), ("res-", k))]
    labels += [("mono", j) for j in range(cfg.n_grid)]
    return LinearProgram(c, A, b, np.zeros((0, n_x)), np.zeros(0),
                         labels_ub=tuple(labels))


def joint_layout(s: int, n_b: int, n_z: int) -> dict:
    """Column offsets of the merge LP: region blocks, shared block, t's."""
    p = n_b + n_z
    return {
        "region": [slice(i * p, (i + 1) * p) for i in range(s)],
        "shared": slice(s * p, (s + 1) * p),
        "t": slice((s + 1) * p, (s + 1) * p + s),
        "n_x": (s + 1) * p + s,
    }


def build_joint_lp(region_data, tie_ids, cfg: BasisConfig, rng: OutputRange
                   ) -> LinearProgram:
    """Joint refit of several regions with a shared-parameter subset.

    Parameters
    ----------
    region_data : sequence of (label, z_norm, q, weights)
        Candidate regions (their current sample sets), each fitted with
        its own (mu_i, L_i, t_i) block.
    tie_ids : iterable of labels
        Subset of region labels forced onto the shared parameter block
        through componentwise equality rows; may be empty.
    cfg, rng
        Basis shape and command range shared by all regions.

    The objective sums the per-region epigraph variables.  Equality rows
    are labeled ``(label, 'mu'|'L', component)`` so dual blocks can be
    attributed to regions.
    """
    if len(region_data) == 0:
        raise ValueError("need at least one candidate region")
    labels = [r[0] for r in region_data]
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate region labels")
    tie_ids = list(tie_ids)
    unknown = set(tie_ids) - set(labels)
    if unknown:
        raise ValueError(f"tie labels {sorted(map(str, unknown))} not in candidates")

    s = len(region_data)
    n_b = cfg.n_b
    blocks = [_residual_blocks(z, q, w, cfg, rng) for _, z, q, w in region_data]
    n_z = blocks[0][0].shape[1]
    if any(blk[0].shape[1] != n_z for blk in blocks):
        raise ValueError("regions disagree on the regressor dimension")
    lay = joint_layout(s, n_b, n_z)
    n_x = lay["n_x"]
    p = n_b + n_z

    m_ub = sum(2 * blk[1].size for blk in blocks) + s * cfg.n_grid
    A = np.zeros((m_ub, n_x))
    b = np.zeros(m_ub)
    labels_ub = []
    row = 0
    dB = basis_deriv(cfg, cfg.eta_grid)
    for i, (label, blk) in enumerate(zip(labels, blocks)):
        z_norm, q, w, B = blk
        n_s = q.size
        col = lay["region"][i]
        wB = w[:, None] * B
        wZ = w[:, None] * z_norm
        A[row:row + 2 * n_s:2, col.start:col.start + n_b] = wB
        A[row:row + 2 * n_s:2, col.start + n_b:col.stop] = -wZ
        A[row + 1:row + 2 * n_s:2, col.start:col.start + n_b] = -wB
        A[row + 1:row + 2 * n_s:2, col.start + n_b:col.stop] = wZ
        A[row:row + 2 * n_s, lay["t"].start + i] = -1.0
        labels_ub += [(label, sign, k) for k in range(n_s) for sign in ("res+", "res-")]
        row += 2 * n_s
        A[row:row + cfg.n_grid, col.start:col.start + n_b] = -dB
        b[row:row + cfg.n_grid] = -cfg.epsilon
        labels_ub += [(label, "mono", j) for j in range(cfg.n_grid)]
        row += cfg.n_grid

    m_eq = len(tie_ids) * p
    A_eq = np.zeros((m_eq, n_x))
    b_eq = np.zeros(m_eq)
    labels_eq = []
    row = 0
    for label in tie_ids:
        i = labels.index(label)
        col = lay["region"][i]
        A_eq[row:row + p, col] = np.eye(p)
        A_eq[row:row + p, lay["shared"]] = -np.eye(p)
        labels_eq += [(label, "mu", j) for j in range(n_b)]
        labels_eq += [(label, "L", j) for j in range(n_z)]
        row += p

    c = np.zeros(n_x)
    c[lay["t"]] = 1.0
    return LinearProgram(c, A, b, A_eq, b_eq,
                         labels_ub=tuple(labels_ub), labels_eq=tuple(labels_eq))
