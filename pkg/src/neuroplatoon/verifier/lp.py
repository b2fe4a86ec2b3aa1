"""Dense bounded-variable simplex.

The working matrix is the full tableau ``B^-1 [A | I]`` with one slack per row
(equality rows get a slack fixed at zero). Nonbasic variables sit at a finite
bound. The dual simplex does the heavy lifting, both for cold starts and for
re-optimizing after bound changes, which is what branch and bound needs; a
bounded primal simplex removes any round-off dual infeasibility at the end.

Both loops price by the largest violation and fall back to Bland's
lowest-index rule after a degenerate step until progress resumes.
"""

from dataclasses import dataclass

import numpy as np

from .._accel import kernel

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = 0, 1, 2, 3
STATUS_NAMES = {OPTIMAL: "optimal", INFEASIBLE: "infeasible", UNBOUNDED: "unbounded", ITERATION_LIMIT: "iteration_limit"}

LE, EQ = 0, 1

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIV_TOL = 1e-9
TIE_TOL = 1e-12
PERTURB = 1e-7


@dataclass
class LinearProgram:
    """maximize ``c @ x`` s.t. ``A x (<= | =) b``, ``lb <= x <= ub``."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    senses: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        n = self.c.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float)
        self.senses = np.asarray(self.senses, dtype=np.int64)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        m = self.A.shape[0]
        if self.b.shape != (m,) or self.senses.shape != (m,):
            raise ValueError("b and senses need one entry per constraint row")
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds need one entry per variable")
        if not (np.all(np.isfinite(self.lb)) and np.all(np.isfinite(self.ub))):
            raise ValueError("every variable needs finite bounds")

    @property
    def n_vars(self):
        return self.c.shape[0]

    @property
    def n_rows(self):
        return self.A.shape[0]


@dataclass
class LpResult:
    status: str
    value: float
    x: np.ndarray
    iterations: int = 0


@kernel
def _primal(T, d, x, lb, ub, basis, status, max_iter):
    m = T.shape[0]
    it = 0
    bland = False
    while it < max_iter:
        movable = (status != 0) & (ub - lb > 0.0)
        score = np.where(movable & (status == 1), d, 0.0)
        score = np.where(movable & (status == 2), -d, score)
        q = -1
        if bland:
            cand = np.nonzero(score > OPT_TOL)[0]
            if cand.shape[0] > 0:
                q = cand[0]
        else:
            j = np.argmax(score)
            if score[j] > OPT_TOL:
                q = j
        if q < 0:
            return OPTIMAL, it
        dirn = 1.0 if status[q] == 1 else -1.0
        col = dirn * T[:, q]
        xb = x[basis]
        lbb = lb[basis]
        ubb = ub[basis]
        pos = col > PIV_TOL
        neg = (col < -PIV_TOL) & (ubb < np.inf)
        ratios = np.full(m, np.inf)
        ratios = np.where(pos, (xb - lbb) / np.where(pos, col, 1.0), ratios)
        ratios = np.where(neg, (ubb - xb) / np.where(neg, -col, 1.0), ratios)
        ratios = np.maximum(ratios, 0.0)
        flip = ub[q] - lb[q]
        r = -1
        t = flip
        if m > 0:
            tmin = ratios.min()
            if tmin < flip:
                ties = np.nonzero(ratios <= tmin + TIE_TOL)[0]
                if bland:
                    r = ties[np.argmin(basis[ties])]
                else:
                    r = ties[np.argmax(np.abs(col[ties]))]
                t = tmin
        if r < 0 and t == np.inf:
            return UNBOUNDED, it
        x[basis] = xb - t * col
        x[q] += dirn * t
        if r < 0:
            # entering variable jumps to its opposite bound, basis unchanged
            status[q] = 2 if status[q] == 1 else 1
            x[q] = ub[q] if status[q] == 2 else lb[q]
        else:
            leave = basis[r]
            if col[r] > 0:
                status[leave] = 1
                x[leave] = lb[leave]
            else:
                status[leave] = 2
                x[leave] = ub[leave]
            _pivot(T, d, r, q)
            basis[r] = q
            status[q] = 0
        bland = t <= TIE_TOL
        it += 1
    return ITERATION_LIMIT, it


@kernel
def _pivot(T, d, r, q):
    T[r, :] /= T[r, q]
    colq = T[:, q].copy()
    colq[r] = 0.0
    T -= np.outer(colq, T[r, :])
    d -= d[q] * T[r, :]
    d[q] = 0.0


@kernel
def _dual(T, d, x, lb, ub, basis, status, max_iter):
    """Dual simplex from a dual-feasible basis; restores primal feasibility."""
    it = 0
    bland = False
    while it < max_iter:
        xb = x[basis]
        viol = np.maximum(lb[basis] - xb, xb - ub[basis])
        if viol.shape[0] == 0:
            return OPTIMAL, it
        if bland:
            infeasible = np.nonzero(viol > FEAS_TOL)[0]
            if infeasible.shape[0] == 0:
                return OPTIMAL, it
            r = infeasible[np.argmin(basis[infeasible])]
        else:
            r = np.argmax(viol)
            if viol[r] <= FEAS_TOL:
                return OPTIMAL, it
        leave = basis[r]
        below = xb[r] < lb[leave]
        target = lb[leave] if below else ub[leave]
        row = T[r, :]
        movable = (status != 0) & (ub - lb > 0.0)
        if below:
            ok = movable & (((status == 1) & (row < -PIV_TOL)) | ((status == 2) & (row > PIV_TOL)))
        else:
            ok = movable & (((status == 1) & (row > PIV_TOL)) | ((status == 2) & (row < -PIV_TOL)))
        cand = np.nonzero(ok)[0]
        if cand.shape[0] == 0:
            return INFEASIBLE, it
        # Harris two-pass ratio test: allow a small dual infeasibility in
        # exchange for the largest available pivot
        arow = np.abs(row[cand])
        ad = np.abs(d[cand])
        bound = ((ad + OPT_TOL) / arow).min()
        ratios = ad / arow
        ties = cand[ratios <= bound]
        if bland:
            q = ties[0]
        else:
            q = ties[np.argmax(np.abs(row[ties]))]
        rmin = abs(d[q] / row[q])
        delta = (xb[r] - target) / row[q]
        x[basis] = xb - delta * T[:, q]
        x[q] += delta
        x[leave] = target
        status[leave] = 1 if below else 2
        _pivot(T, d, r, q)
        basis[r] = q
        status[q] = 0
        bland = rmin <= TIE_TOL
        it += 1
    return ITERATION_LIMIT, it


@kernel
def _refactor(A_full, b, cost, lb, ub, basis, status):
    """Rebuild tableau, values and reduced costs from a basis description."""
    m = A_full.shape[0]
    n = A_full.shape[1] - m
    binv = np.linalg.inv(np.ascontiguousarray(A_full[:, basis]))
    # the slack block of A_full is the identity, so its image is B^-1 itself
    T = np.empty_like(A_full)
    T[:, :n] = binv @ np.ascontiguousarray(A_full[:, :n])
    T[:, n:] = binv
    x = np.where(status == 2, ub, lb)
    x[basis] = 0.0
    rhs = b - A_full @ x
    x[basis] = binv @ rhs
    d = cost - cost[basis] @ T
    return T, x, d


class LpEngine:
    """Solver bound to one constraint matrix; nodes differ only in bounds.

    Every structural variable is boxed, so the all-slack basis with each
    nonbasic variable parked at the bound favoured by its cost is dual
    feasible. ``solve`` starts there and runs the dual simplex; no phase 1 is
    needed. ``resolve`` restarts the dual simplex from a stored basis.
    """

    def __init__(self, lp: LinearProgram, max_iter=50_000):
        self.lp = lp
        self.max_iter = max_iter
        m, n = lp.A.shape
        self.m, self.n = m, n
        self.A_full = np.hstack([lp.A, np.eye(m)])
        self.cost = np.concatenate([lp.c, np.zeros(m)])
        self.slack_ub = np.where(lp.senses == LE, np.inf, 0.0)
        golden = (np.arange(n + m) * 0.6180339887498949) % 1.0
        self._perturb = PERTURB * (0.5 + golden) * (1.0 + np.abs(self.cost))

    def _bounds(self, lb, ub):
        return np.concatenate([lb, np.zeros(self.m)]), np.concatenate([ub, self.slack_ub])

    def solve(self, lb=None, ub=None):
        lp, m, n = self.lp, self.m, self.n
        lb = lp.lb if lb is None else lb
        ub = lp.ub if ub is None else ub
        if np.any(lb > ub + FEAS_TOL):
            return LpResult("infeasible", -np.inf, None), None
        full_lb, full_ub = self._bounds(lb, ub)
        status = np.concatenate([np.where(lp.c > 0, 2, 1), np.zeros(m, dtype=np.int64)]).astype(np.int64)
        basis = (n + np.arange(m)).astype(np.int64)
        x = np.concatenate([np.where(lp.c > 0, ub, lb), np.zeros(m)])
        x[basis] = lp.b - lp.A @ x[:n]
        T = self.A_full.copy()
        d = self.cost.copy()
        return self._run(T, d, x, full_lb, full_ub, basis, status)

    def reoptimize(self, state, c):
        """Maximize a new objective ``c`` starting from an optimal ``state``.

        The constraints and bounds must be those of the original solve, so the
        stored basis is primal feasible and only the primal simplex runs.
        """
        basis, status = state[0].copy(), state[1].copy()
        T, binv_b = state[2][0].copy(), state[2][2]
        cost = np.concatenate([np.asarray(c, dtype=float), np.zeros(self.m)])
        d = cost - cost[basis] @ T
        lb, ub = self._bounds(self.lp.lb, self.lp.ub)
        x = np.where(status == 2, ub, lb)
        x[basis] = 0.0
        x[basis] = binv_b - T @ x
        code, it = _primal(T, d, x, lb, ub, basis, status, self.max_iter)
        if code != OPTIMAL:
            return LpResult(STATUS_NAMES[code], np.nan, None, it), None
        xs = x[: self.n].copy()
        binv_b = x[basis] + T @ np.where(status == 0, 0.0, x)
        return LpResult("optimal", float(cost[: self.n] @ xs), xs, it), (basis, status, (T, d, binv_b))

    def resolve(self, state, lb, ub, tableau=None):
        """Warm start from ``state = (basis, status)`` under new bounds."""
        if np.any(lb > ub + FEAS_TOL):
            return LpResult("infeasible", -np.inf, None), None
        basis, status = state[0].copy(), state[1].copy()
        full_lb, full_ub = self._bounds(lb, ub)
        if tableau is None:
            T, x, d = _refactor(self.A_full, self.lp.b, self.cost, full_lb, full_ub, basis, status)
        else:
            T, d = tableau[0].copy(), tableau[1].copy()
            x = np.where(status == 2, full_ub, full_lb)
            x[basis] = 0.0
            x[basis] = tableau[2] - T @ x
        return self._run(T, d, x, full_lb, full_ub, basis, status)

    def _run(self, T, d, x, lb, ub, basis, status):
        # most reduced costs are zero in these relaxations; a fixed small
        # perturbation (kept dual feasible) stops the dual simplex stalling
        nb = status != 0
        d = np.where(nb & (status == 1), d - self._perturb, d)
        d = np.where(nb & (status == 2), d + self._perturb, d)
        code, it1 = _dual(T, d, x, lb, ub, basis, status, self.max_iter)
        if code == INFEASIBLE:
            return LpResult("infeasible", -np.inf, None, it1), None
        if code != OPTIMAL:
            return LpResult(STATUS_NAMES[code], np.nan, None, it1), None
        # drop the perturbation and finish with the primal simplex
        d = self.cost - self.cost[basis] @ T
        code, it2 = _primal(T, d, x, lb, ub, basis, status, self.max_iter)
        if code != OPTIMAL:
            return LpResult(STATUS_NAMES[code], np.nan, None, it1 + it2), None
        xs = x[: self.n].copy()
        value = float(self.lp.c @ xs)
        # B^-1 b lets children rebuild basic values without refactoring
        binv_b = x[basis] + T @ np.where(status == 0, 0.0, x)
        state = (basis.copy(), status.copy(), (T, d, binv_b))
        return LpResult("optimal", value, xs, it1 + it2), state


def solve_lp(lp: LinearProgram) -> LpResult:
    """Solve a linear program to optimality (maximization)."""
    return LpEngine(lp).solve()[0]
