"""Dense two-phase simplex for ``max c·x  s.t.  A_ub x <= b_ub, A_eq x = b_eq, x >= 0``.

Revised form: the basis inverse is held as a dense matrix, updated by a rank-one
pivot and rebuilt from scratch every ``refactor_every`` pivots.  Pricing is
Dantzig's rule with a permanent switch to Bland's rule after a long run of
degenerate pivots.  Rows that already contain a unit column (slacks, or a
structural column appearing in a single equality row) start basic, so
artificial variables are only created where they are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import sparse
from scipy.linalg.blas import dger

from .model import ArgumentError, NumericalError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
PIVOT_TOL = 1e-9
HARRIS_DELTA = 1e-10


class CyclingError(NumericalError):
    """The pivot cap was exceeded."""


@dataclass(frozen=True)
class LinearProgram:
    c: NDArray[np.float64]
    a_ub: NDArray[np.float64] | None = None
    b_ub: NDArray[np.float64] | None = None
    a_eq: NDArray[np.float64] | None = None
    b_eq: NDArray[np.float64] | None = None

    @property
    def n_vars(self) -> int:
        return int(np.asarray(self.c).size)

    def dump(self, path: str) -> None:
        """Write a plain-text standard-form listing."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("maximize\n")
            fh.write(" ".join(f"{v:.17g}" for v in np.asarray(self.c)) + "\n")
            for label, a, b, op in (("ub", self.a_ub, self.b_ub, "<="), ("eq", self.a_eq, self.b_eq, "=")):
                if a is None:
                    continue
                dense = a.toarray() if sparse.issparse(a) else np.asarray(a)
                for k, (row, rhs) in enumerate(zip(dense, np.asarray(b))):
                    terms = " ".join(f"{j}:{v:.17g}" for j, v in enumerate(row) if v != 0)
                    fh.write(f"{label}{k}: {terms} {op} {rhs:.17g}\n")
            fh.write("bounds: all variables >= 0\n")


@dataclass(frozen=True)
class SimplexResult:
    status: str
    x: NDArray[np.float64]
    objective: float
    duals_ub: NDArray[np.float64]
    duals_eq: NDArray[np.float64]
    iterations: int
    basis: NDArray[np.int64]


def _dense(a, n: int) -> NDArray[np.float64]:
    if a is None:
        return np.zeros((0, n))
    return a.toarray() if sparse.issparse(a) else np.asarray(a, dtype=float).reshape(-1, n)


class _Tableau:
    def __init__(self, a: NDArray[np.float64], b: NDArray[np.float64], basis: NDArray[np.int64],
                 tol: float, refactor_every: int):
        self.a = np.asfortranarray(a)
        self.a_sp = sparse.csc_matrix(a)
        self.a_t = self.a_sp.T.tocsr()
        self.b = b
        self.m, self.n = a.shape
        self.basis = basis.copy()
        self.tol = tol
        self.refactor_every = refactor_every
        self.iterations = 0
        self.refactor()

    def refactor(self) -> None:
        try:
            self.binv = np.linalg.inv(self.a[:, self.basis])
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular basis during refactorization") from exc
        self.xb = self.binv @ self.b

    def column(self, j: int) -> NDArray[np.float64]:
        lo, hi = self.a_sp.indptr[j], self.a_sp.indptr[j + 1]
        rows = self.a_sp.indices[lo:hi]
        return self.binv[:, rows] @ self.a_sp.data[lo:hi]

    def pivot(self, r: int, q: int, col: NDArray[np.float64], theta: float) -> bool:
        """Pivot column ``q`` into row ``r``; returns True when the inverse was rebuilt."""
        self.xb -= theta * col
        self.xb[r] = theta
        piv = self.binv[r] / col[r]
        # In-place rank-one update on the Fortran-ordered transpose view.
        dger(-1.0, piv, col, a=self.binv.T, overwrite_a=1)
        self.binv[r] = piv
        self.basis[r] = q
        self.iterations += 1
        if self.iterations % self.refactor_every == 0:
            self.refactor()
            return True
        return False

    def run(self, cost: NDArray[np.float64], allowed: NDArray[np.bool_], max_iter: int) -> str:
        degenerate_cap = 10 * (self.m + self.n)
        degenerate = 0
        bland = False
        y: NDArray[np.float64] | None = None
        fresh = False
        while True:
            if self.iterations >= max_iter:
                raise CyclingError(f"simplex exceeded {max_iter} pivots")
            if y is None:
                y = cost[self.basis] @ self.binv
            d = cost - self.a_t @ y
            d[~allowed] = np.inf
            d[self.basis] = np.inf
            if bland:
                cand = np.flatnonzero(d < -self.tol)
                q = int(cand[0]) if cand.size else -1
            else:
                q = int(np.argmin(d))
                if not d[q] < -self.tol:
                    q = -1
            if q < 0:
                if fresh:
                    return OPTIMAL
                # Confirm optimality against a rebuilt inverse.
                self.refactor()
                y, fresh = None, True
                continue
            col = self.column(q)
            idx = np.flatnonzero(col > PIVOT_TOL)
            if idx.size == 0:
                return UNBOUNDED
            xb = np.maximum(self.xb[idx], 0.0)
            if bland:
                ratios = xb / col[idx]
                best = ratios.min()
                ties = idx[ratios <= best + 1e-12 * max(1.0, best)]
                r = int(ties[np.argmin(self.basis[ties])])
            else:
                # Harris two-pass test: relax the bound slightly, then take the largest pivot.
                bound = ((xb + HARRIS_DELTA) / col[idx]).min()
                ties = idx[xb / col[idx] <= bound]
                big = ties[col[ties] >= col[ties].max() * (1 - 1e-9)]
                r = int(big[np.argmin(self.basis[big])])
            theta = float(max(self.xb[r], 0.0) / col[r])
            step = d[q] * self.binv[r] / col[r]
            if self.pivot(r, q, col, theta):
                y, fresh = None, True
            else:
                y, fresh = y + step, False
            if theta <= 1e-12:
                degenerate += 1
                if degenerate > degenerate_cap:
                    bland = True
            else:
                degenerate = 0


def simplex_solve(
    lp: LinearProgram,
    tol: float = 1e-9,
    max_iter: int | None = None,
    refactor_every: int = 100,
) -> SimplexResult:
    """Solve ``lp`` (maximization); statuses: optimal, infeasible, unbounded."""
    c = np.asarray(lp.c, dtype=float).ravel()
    n = c.size
    a_ub = _dense(lp.a_ub, n)
    a_eq = _dense(lp.a_eq, n)
    b_ub = np.zeros(0) if lp.b_ub is None else np.asarray(lp.b_ub, dtype=float).ravel()
    b_eq = np.zeros(0) if lp.b_eq is None else np.asarray(lp.b_eq, dtype=float).ravel()
    if a_ub.shape[0] != b_ub.size or a_eq.shape[0] != b_eq.size:
        raise ArgumentError("constraint matrix and right-hand side sizes differ")
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(a_ub)) and np.all(np.isfinite(a_eq))):
        raise ArgumentError("non-finite coefficients")
    m_ub, m_eq = a_ub.shape[0], a_eq.shape[0]
    m = m_ub + m_eq

    # Standard form: [A_ub I; A_eq 0] with non-negative right-hand sides.
    a = np.zeros((m, n + m_ub))
    a[:m_ub, :n] = a_ub
    a[:m_ub, n:] = np.eye(m_ub)
    a[m_ub:, :n] = a_eq
    b = np.concatenate([b_ub, b_eq])
    sign = np.where(b < 0, -1.0, 1.0)
    a *= sign[:, None]
    b = b * sign

    basis = -np.ones(m, dtype=np.int64)
    nz_count = np.count_nonzero(a, axis=0)
    for j in np.flatnonzero(nz_count == 1):
        r = int(np.flatnonzero(a[:, j])[0])
        if basis[r] < 0 and a[r, j] > 0:
            basis[r] = j
    missing = np.flatnonzero(basis < 0)
    n_std = a.shape[1]
    if missing.size:
        art = np.zeros((m, missing.size))
        art[missing, np.arange(missing.size)] = 1.0
        a = np.hstack([a, art])
        basis[missing] = n_std + np.arange(missing.size)
    # Unit columns may carry a coefficient other than 1; rescale rows so B = I.
    scale = a[np.arange(m), basis]
    a = a / scale[:, None]
    b = b / scale
    n_total = a.shape[1]
    max_iter = max_iter or 50 * (m + n_total) + 1000

    tab = _Tableau(a, b, basis, tol, refactor_every)
    allowed = np.ones(n_total, dtype=bool)
    if missing.size:
        cost1 = np.zeros(n_total)
        cost1[n_std:] = 1.0
        tab.run(cost1, allowed, max_iter)
        tab.refactor()
        infeas = float(cost1[tab.basis] @ tab.xb)
        if infeas > 1e-8 * max(1.0, float(np.abs(b).max(initial=0.0))):
            return SimplexResult(INFEASIBLE, np.full(n, np.nan), np.nan, np.zeros(m_ub),
                                 np.zeros(m_eq), tab.iterations, tab.basis.copy())
        allowed[n_std:] = False
        for r in range(m):
            if tab.basis[r] < n_std:
                continue
            row = tab.binv[r] @ a[:, :n_std]
            cand = np.flatnonzero(np.abs(row) > 1e-9)
            if cand.size:
                q = int(cand[0])
                tab.pivot(r, q, tab.column(q), 0.0)
        tab.refactor()

    cost2 = np.zeros(n_total)
    cost2[:n] = -c
    status = tab.run(cost2, allowed, max_iter)
    tab.refactor()
    if status == UNBOUNDED:
        return SimplexResult(UNBOUNDED, np.full(n, np.nan), np.inf, np.zeros(m_ub),
                             np.zeros(m_eq), tab.iterations, tab.basis.copy())
    x_full = np.zeros(n_total)
    x_full[tab.basis] = np.maximum(tab.xb, 0.0)
    x = x_full[:n]
    y = cost2[tab.basis] @ tab.binv
    # Undo the row scaling and sign flips; report duals of the maximization.
    duals = -y / scale * sign
    return SimplexResult(OPTIMAL, x, float(c @ x), duals[:m_ub], duals[m_ub:],
                         tab.iterations, tab.basis.copy())
