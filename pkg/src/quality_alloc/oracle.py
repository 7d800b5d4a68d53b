"""Discretized verification path.

Every economy can be binned into a finite assignment problem and solved exactly
by the in-repo simplex.  Nothing here relies on the closed-form structure of
optimal lotteries; that is what makes the cross-checks meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy import sparse

from .model import Allocation, ArgumentError, Economy, NumericalError, fast_welfare
from .simplex import OPTIMAL, LinearProgram, SimplexResult, simplex_solve

MAX_TYPES = 10
MAX_BINS = 2000
BINDING_TOL = 1e-6
SHARE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class GridEconomy:
    """Uniform bins on ``[0, X]`` with exact supply masses and midpoint utilities."""

    economy: Economy
    edges: NDArray[np.float64]
    supply_mass: NDArray[np.float64]
    utilities: NDArray[np.float64]  # (N, n)

    @property
    def n_bins(self) -> int:
        return self.supply_mass.size

    @property
    def n_types(self) -> int:
        return self.utilities.shape[0]

    @property
    def mids(self) -> NDArray[np.float64]:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def masses(self) -> NDArray[np.float64]:
        return self.economy.masses

    def usable_capacity(self) -> NDArray[np.float64]:
        """The best ``Σμ`` of supply, bin by bin (the last used bin may be partial)."""
        before = np.concatenate([[0.0], np.cumsum(self.supply_mass)[:-1]])
        return np.clip(self.economy.total_mass - before, 0.0, self.supply_mass)


def discretize(e: Economy, n: int) -> GridEconomy:
    if n < 10:
        raise ArgumentError("need at least 10 bins")
    edges = np.linspace(0.0, e.supply.upper, n + 1)
    cdf = e.supply.cdf(edges)
    cdf[-1] = e.supply.total
    mids = 0.5 * (edges[1:] + edges[:-1])
    utilities = np.vstack([u(mids) for u in e.utilities])
    return GridEconomy(e, edges, np.diff(cdf), utilities)


@dataclass(frozen=True, eq=False)
class LpSolution:
    """Per-type bin probabilities ``q[i, b]`` plus no-service probabilities."""

    q: NDArray[np.float64]
    atoms: NDArray[np.float64]
    objective: float
    status: str
    method: str
    iterations: int = 0
    duals_supply: NDArray[np.float64] | None = None
    ic_values: NDArray[np.float64] | None = None

    @property
    def ic_slack(self) -> NDArray[np.float64]:
        v = self.ic_values
        return np.diag(v)[:, None] - v

    def binding_edges(self, tol: float = BINDING_TOL) -> list[tuple[int, int]]:
        """Edges ``k -> j`` where type ``k`` is indifferent to type ``j``'s lottery."""
        s = self.ic_slack
        n = s.shape[0]
        return [(k, j) for k in range(n) for j in range(n) if k != j and abs(s[k, j]) <= tol]

    def has_binding_cycle(self, tol: float = BINDING_TOL) -> bool:
        return find_cycle(self.q.shape[0], self.binding_edges(tol)) is not None

    def shared_bins(self, masses: NDArray[np.float64], tol: float = SHARE_TOL) -> NDArray[np.bool_]:
        consumed = masses[:, None] * self.q > tol
        return consumed.sum(axis=0) >= 2

    def shared_fraction(self, masses: NDArray[np.float64], tol: float = SHARE_TOL) -> float:
        consumed = masses[:, None] * self.q > tol
        used = consumed.any(axis=0)
        if not used.any():
            return 0.0
        return float(np.count_nonzero(consumed.sum(axis=0) >= 2) / np.count_nonzero(used))

    def boundary_splits(self, masses: NDArray[np.float64], tol: float = SHARE_TOL) -> NDArray[np.bool_]:
        """Shared bins that only straddle a block boundary.

        A bin counts when exactly two types use it, one of them alone holds the
        nearest unshared used bin to the left and the other alone holds the
        nearest one to the right.  Block masses rarely fill whole bins, so the
        grid forces one such split per boundary.
        """
        consumed = masses[:, None] * self.q > tol
        users = consumed.sum(axis=0)
        used = np.flatnonzero(users > 0)
        sole = {int(b): int(np.argmax(consumed[:, b])) for b in used if users[b] == 1}
        out = np.zeros(users.size, dtype=bool)
        for pos, b in enumerate(used):
            if users[b] != 2:
                continue
            left = next((sole[c] for c in used[pos - 1::-1] if c in sole), None) if pos else None
            right = next((sole[c] for c in used[pos + 1:] if c in sole), None)
            pair = set(np.flatnonzero(consumed[:, b]).tolist())
            out[b] = left is not None and right is not None and left != right and {left, right} == pair
        return out

    def interior_shared_fraction(self, masses: NDArray[np.float64], tol: float = SHARE_TOL) -> float:
        """Like :meth:`shared_fraction` but ignoring bins that merely straddle a boundary."""
        consumed = masses[:, None] * self.q > tol
        used = consumed.any(axis=0)
        if not used.any():
            return 0.0
        inner = self.shared_bins(masses, tol) & ~self.boundary_splits(masses, tol)
        return float(np.count_nonzero(inner) / np.count_nonzero(used))


def find_cycle(n: int, edges: list[tuple[int, int]]) -> list[int] | None:
    """Depth-first search for a directed cycle; returns its vertices or None."""
    adj: dict[int, list[int]] = {v: [] for v in range(n)}
    for k, j in edges:
        adj[k].append(j)
    state = [0] * n  # 0 new, 1 on stack, 2 done
    stack_path: list[int] = []

    def visit(v: int) -> list[int] | None:
        state[v] = 1
        stack_path.append(v)
        for w in adj[v]:
            if state[w] == 1:
                return stack_path[stack_path.index(w):] + [w]
            if state[w] == 0:
                found = visit(w)
                if found:
                    return found
        stack_path.pop()
        state[v] = 2
        return None

    for v in range(n):
        if state[v] == 0:
            found = visit(v)
            if found:
                return found
    return None


def _grid_ic_values(g: GridEconomy, q: NDArray[np.float64]) -> NDArray[np.float64]:
    return g.utilities @ q.T


def _objective(g: GridEconomy, q: NDArray[np.float64], weights: NDArray[np.float64]) -> float:
    per_type = np.einsum("ib,ib->i", g.utilities, q)
    return float(np.sum(weights * g.masses * per_type))


def _check_size(g: GridEconomy) -> None:
    if g.n_types > MAX_TYPES or g.n_bins > MAX_BINS:
        raise ArgumentError(
            f"LP size cap exceeded: N={g.n_types} (max {MAX_TYPES}), n={g.n_bins} (max {MAX_BINS})"
        )


def build_lp(g: GridEconomy, weights: NDArray[np.float64], with_ic: bool) -> LinearProgram:
    """Variables ``q[i, b]`` (row-major) followed by one no-service variable per type."""
    n_t, n_b = g.n_types, g.n_bins
    mu = g.masses
    n_var = n_t * n_b + n_t
    c = np.zeros(n_var)
    c[: n_t * n_b] = (weights * mu)[:, None].repeat(n_b, axis=1).ravel() * g.utilities.ravel()

    bins = np.arange(n_b)
    rows, cols, vals = [], [], []
    for i in range(n_t):
        rows.append(bins)
        cols.append(i * n_b + bins)
        vals.append(np.full(n_b, mu[i]))
    n_rows = n_b
    if with_ic:
        for k in range(n_t):
            for j in range(n_t):
                if k == j:
                    continue
                rows.append(np.full(n_b, n_rows))
                cols.append(j * n_b + bins)
                vals.append(g.utilities[k])
                rows.append(np.full(n_b, n_rows))
                cols.append(k * n_b + bins)
                vals.append(-g.utilities[k])
                n_rows += 1
    a_ub = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_rows, n_var)
    )
    b_ub = np.concatenate([g.supply_mass, np.zeros(n_rows - n_b)])

    eq_rows = np.concatenate([np.repeat(np.arange(n_t), n_b), np.arange(n_t)])
    eq_cols = np.concatenate([np.arange(n_t * n_b), n_t * n_b + np.arange(n_t)])
    a_eq = sparse.csr_matrix((np.ones(eq_cols.size), (eq_rows, eq_cols)), shape=(n_t, n_var))
    return LinearProgram(c, a_ub, b_ub, a_eq, np.ones(n_t))


def _from_simplex(g: GridEconomy, res: SimplexResult, weights: NDArray[np.float64],
                  method: str) -> LpSolution:
    n_t, n_b = g.n_types, g.n_bins
    if res.status != OPTIMAL:
        nan = np.full((n_t, n_b), np.nan)
        return LpSolution(nan, np.full(n_t, np.nan), np.nan, res.status, method, res.iterations)
    q = res.x[: n_t * n_b].reshape(n_t, n_b)
    atoms = res.x[n_t * n_b:]
    return LpSolution(
        q=q,
        atoms=atoms,
        objective=_objective(g, q, weights),
        status=res.status,
        method=method,
        iterations=res.iterations,
        duals_supply=res.duals_ub[:n_b].copy(),
        ic_values=_grid_ic_values(g, q),
    )


def solve_lp(g: GridEconomy, weights: NDArray[np.float64] | None = None, with_ic: bool = False,
             dump_path: str | None = None) -> LpSolution:
    _check_size(g)
    weights = g.economy.weights if weights is None else np.asarray(weights, dtype=float)
    lp = build_lp(g, weights, with_ic)
    if dump_path:
        lp.dump(dump_path)
    res = simplex_solve(lp)
    return _from_simplex(g, res, weights, "simplex-ic" if with_ic else "simplex")


def greedy_first_best(g: GridEconomy, weights: NDArray[np.float64] | None = None) -> LpSolution:
    """Two-type bathtub: the first type takes the usable bins where ``g`` is largest."""
    if g.n_types != 2:
        raise ArgumentError("the greedy oracle handles exactly two types")
    weights = g.economy.weights if weights is None else np.asarray(weights, dtype=float)
    cap = g.usable_capacity()
    score = weights[0] * g.utilities[0] - weights[1] * g.utilities[1]
    order = np.argsort(-score, kind="stable")
    order = order[cap[order] > 0]
    taken = np.zeros(g.n_bins)
    before = np.concatenate([[0.0], np.cumsum(cap[order])[:-1]])
    taken[order] = np.clip(g.masses[0] - before, 0.0, cap[order])
    q = np.vstack([taken / g.masses[0], (cap - taken) / g.masses[1]])
    atoms = np.maximum(1.0 - q.sum(axis=1), 0.0)
    return LpSolution(q, atoms, _objective(g, q, weights), OPTIMAL, "greedy",
                      ic_values=_grid_ic_values(g, q))


def oracle_first_best(g: GridEconomy, weights: NDArray[np.float64] | None = None,
                      method: str = "auto") -> LpSolution:
    """First-best on the grid: greedy for two types, simplex otherwise (or on request)."""
    if method not in ("auto", "greedy", "lp"):
        raise ArgumentError(f"unknown method {method!r}")
    if method == "greedy" or (method == "auto" and g.n_types == 2):
        return greedy_first_best(g, weights)
    return solve_lp(g, weights, with_ic=False)


def oracle_second_best(g: GridEconomy, dump_path: str | None = None) -> LpSolution:
    """Welfare maximum subject to every pairwise incentive constraint."""
    return solve_lp(g, with_ic=True, dump_path=dump_path)


def grid_pooling(g: GridEconomy) -> LpSolution:
    cap = g.usable_capacity()
    share = cap / g.economy.total_mass
    q = np.vstack([share] * g.n_types)
    atoms = np.maximum(1.0 - q.sum(axis=1), 0.0)
    return LpSolution(q, atoms, _objective(g, q, g.economy.weights), OPTIMAL, "pooling",
                      ic_values=_grid_ic_values(g, q))


def bin_allocation(a: Allocation, g: GridEconomy) -> LpSolution:
    """Exact per-bin probabilities of a closed-form allocation."""
    supply = g.economy.supply
    cdf_edges = supply.cdf(g.edges)
    q = np.zeros((a.n_types, g.n_bins))
    for i, lot in enumerate(a.lotteries):
        for s, t in lot.segments:
            lo = np.clip(g.edges[:-1], s, t)
            hi = np.clip(g.edges[1:], s, t)
            inside = hi > lo
            cdf_lo = np.where(lo == g.edges[:-1], cdf_edges[:-1], supply.cdf(lo))
            cdf_hi = np.where(hi == g.edges[1:], cdf_edges[1:], supply.cdf(hi))
            q[i] += np.where(inside, lot.scale * (cdf_hi - cdf_lo), 0.0)
    atoms = np.array([lot.atom for lot in a.lotteries])
    return LpSolution(q, atoms, _objective(g, q, g.economy.weights), OPTIMAL, "binned",
                      ic_values=_grid_ic_values(g, q))


@dataclass(frozen=True)
class Comparison:
    objective_gap: float
    binned_objective_gap: float
    threshold_gap: NDArray[np.float64]
    ic_slack_gap: float

    def to_dict(self) -> dict:
        return {
            "objective_gap": self.objective_gap,
            "binned_objective_gap": self.binned_objective_gap,
            "threshold_gap": self.threshold_gap.tolist(),
            "ic_slack_gap": self.ic_slack_gap,
        }


def compare(analytic: Allocation, lp: LpSolution, g: GridEconomy) -> Comparison:
    """Relative objective gaps, per-type transport distance, and IC-slack differences."""
    if lp.status != OPTIMAL:
        raise NumericalError(f"cannot compare against LP status {lp.status!r}")
    binned = bin_allocation(analytic, g)
    w_cont = fast_welfare(analytic, g.economy)
    scale = max(abs(lp.objective), 1e-300)
    cum_a = np.cumsum(binned.q, axis=1)
    cum_l = np.cumsum(lp.q, axis=1)
    transport = np.sum(np.abs(cum_a - cum_l), axis=1) * g.width
    return Comparison(
        objective_gap=abs(w_cont - lp.objective) / scale,
        binned_objective_gap=abs(binned.objective - lp.objective) / scale,
        threshold_gap=transport,
        ic_slack_gap=float(np.max(np.abs(binned.ic_slack - lp.ic_slack))),
    )


def support_shape(lp: LpSolution, masses: NDArray[np.float64], tol: float = 1e-9) -> str:
    """Two-type block pattern on the used bins, e.g. ``"IPI"``; shared bins are skipped."""
    mass = masses[:, None] * lp.q
    labels = []
    for b in range(mass.shape[1]):
        p, i = mass[0, b] > tol, mass[1, b] > tol
        if p and i:
            continue
        if p or i:
            label = "P" if p else "I"
            if not labels or labels[-1] != label:
                labels.append(label)
    return "".join(labels)
