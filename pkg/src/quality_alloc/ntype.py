"""Many-type constructions: incentive-compatible first-best accordions and the
Monte Carlo welfare study comparing first-best, second-best and pooling."""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .firstbest import AccordionSpec, WeightRecovery, build_accordion, recover_welfare_weights
from .model import (
    EPS_IC,
    Allocation,
    ArgumentError,
    Economy,
    ICMatrix,
    NumericalError,
    exponential_economy,
    ic_matrix,
)
from .oracle import OPTIMAL, discretize, grid_pooling, oracle_first_best, oracle_second_best

OUTER_CAP = 200


def utility_independence(e: Economy, grid_n: int = 400) -> float:
    """Smallest singular value of ``[1, u_1, ..., u_N]`` sampled on ``[0, X̄]``, columns unit-normed."""
    xs = np.linspace(0.0, e.x_bar, grid_n)
    cols = [np.ones_like(xs)] + [u(xs) for u in e.utilities]
    m = np.column_stack([c / np.linalg.norm(c) for c in cols])
    return float(np.linalg.svd(m, compute_uv=False)[-1])


def warn_if_dependent(e: Economy, tol: float = 1e-8) -> float:
    sv = utility_independence(e)
    if sv <= tol:
        warnings.warn(
            f"utilities are numerically linearly dependent (smallest singular value {sv:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return sv


class _Values:
    """``V_j(f|S)`` for unions of intervals, from cumulative payoff tables."""

    def __init__(self, e: Economy):
        self.e = e
        self.s = e.supply
        self.tables = e.payoff

    def of(self, j: int, segs: list[tuple[float, float]]) -> float:
        t = self.tables[j]
        num = sum(float(t.between(a, b)) for a, b in segs if b > a)
        mass = sum(self.s.mass(a, b) for a, b in segs if b > a)
        return num / mass


@dataclass
class _Path:
    lower: list[float]
    upper: list[float]
    corner: str | None = None

    def own(self, k: int) -> list[tuple[float, float]]:
        if k == 0:
            return [(self.lower[0], self.upper[0])]
        return [(self.lower[k], self.lower[k - 1]), (self.upper[k - 1], self.upper[k])]


def _accordion_path(e: Economy, vals: _Values, x1: float) -> _Path:
    """Nested allocation determined by the innermost block's left end ``x1``."""
    s = e.supply
    mu = e.masses
    n = e.n_types
    x_bar = e.x_bar
    cdf = lambda x: float(s.cdf(x))  # noqa: E731
    q = lambda m: float(s.quantile(min(max(m, 0.0), s.total)))  # noqa: E731
    path = _Path([x1], [q(cdf(x1) + mu[0])])
    for k in range(1, n - 1):
        lo_prev, hi_prev = path.lower[k - 1], path.upper[k - 1]
        f_lo_prev, f_hi_prev = cdf(lo_prev), cdf(hi_prev)

        def top_of(w: float) -> float:
            return q(f_hi_prev + mu[k] - f_lo_prev + cdf(w))

        def cand(w: float) -> list[tuple[float, float]]:
            return [(w, lo_prev), (hi_prev, top_of(w))]

        prev_own = path.own(k - 1)

        def phi(j: int, w: float) -> float:
            return vals.of(j, cand(w)) - vals.of(j, prev_own)

        w_lo = q(f_lo_prev - mu[k])
        w_hi = min(lo_prev, q(float(np.sum(mu[k + 1:]))))
        if phi(k, w_lo) <= 0:
            # Even the best admissible flanks leave type k envious of k-1.
            path.corner = f"low@{k}"
            for j in range(k, n - 1):
                path.lower.append(0.0)
                path.upper.append(q(float(np.sum(mu[: j + 1]))))
            break
        if phi(k - 1, w_hi) >= 0:
            # Even the worst admissible flanks leave type k-1 envious of k.
            path.corner = f"high@{k}"
            for j in range(k, n - 1):
                path.lower.append(q(float(np.sum(mu[j + 1:]))))
                path.upper.append(x_bar)
            break
        y = w_lo if phi(k - 1, w_lo) <= 0 else brentq(
            lambda w: phi(k - 1, w), w_lo, w_hi, xtol=1e-14, maxiter=300
        )
        z = w_hi if phi(k, w_hi) >= 0 else brentq(
            lambda w: phi(k, w), w_lo, w_hi, xtol=1e-14, maxiter=300
        )
        x_k = 0.5 * (y + z)
        path.lower.append(x_k)
        path.upper.append(top_of(x_k))
    if n > 1:
        path.lower.append(0.0)
        path.upper.append(x_bar)
    return path


def _last_pair_slacks(vals: _Values, path: _Path) -> tuple[float, float]:
    n = len(path.lower)
    a_own, b_own = path.own(n - 2), path.own(n - 1)
    a = vals.of(n - 2, a_own) - vals.of(n - 2, b_own)
    b = vals.of(n - 1, b_own) - vals.of(n - 1, a_own)
    return a, b


@dataclass(frozen=True)
class ICAccordionResult:
    spec: AccordionSpec
    allocation: Allocation
    recovery: WeightRecovery
    ic: ICMatrix
    adjacent: NDArray[np.float64]  # (N-1, 2): s[k, k+1], s[k+1, k]
    pivot: float
    corner: str | None
    iterations: int

    @property
    def weights(self) -> NDArray[np.float64]:
        return self.recovery.weights


def construct_ic_first_best(e: Economy, eps: float = EPS_IC) -> ICAccordionResult:
    """Accordion allocation with every adjacent incentive constraint slack.

    The outer search runs bisection on the innermost block's left end,
    keeping the lower end where type N-1 strictly prefers its own lottery and
    the upper end where type N does; the answer is the midpoint of the
    interval on which both hold.
    """
    n = e.n_types
    if n < 2:
        raise ArgumentError("need at least two types")
    warn_if_dependent(e)
    vals = _Values(e)
    s = e.supply
    y_max = float(s.quantile(s.cdf(e.x_bar) - e.masses[0]))

    def side(x1: float) -> tuple[bool, bool]:
        a, b = _last_pair_slacks(vals, _accordion_path(e, vals, x1))
        return a > 0, b > 0

    lo, hi = 0.0, y_max
    found = None
    it = 0
    for it in range(1, OUTER_CAP + 1):
        mid = 0.5 * (lo + hi)
        in_a, in_b = side(mid)
        if in_a and in_b:
            found = mid
            break
        if in_a:
            lo = mid
        elif in_b:
            hi = mid
        else:
            raise NumericalError(f"x1={mid:.9g}: neither of the last pair prefers its own lottery")
    if found is None:
        a_lo, b_lo = side(lo)
        a_hi, b_hi = side(hi)
        raise NumericalError(
            f"outer bisection did not land in the slack set after {OUTER_CAP} steps; "
            f"signs at lo=({a_lo}, {b_lo}), hi=({a_hi}, {b_hi})"
        )

    def boundary(outside: float, inside: float) -> float:
        if all(side(outside)):
            return outside
        for _ in range(60):
            m = 0.5 * (outside + inside)
            if all(side(m)):
                inside = m
            else:
                outside = m
        return inside

    pivot = 0.5 * (boundary(lo, found) + boundary(hi, found))
    path = _accordion_path(e, vals, pivot)
    spec = AccordionSpec(tuple(path.lower), tuple(path.upper))
    alloc = build_accordion(e, spec)
    rec = recover_welfare_weights(e, alloc)
    icm = ic_matrix(alloc, e, eps)
    return ICAccordionResult(spec, alloc, rec, icm, _adjacent(icm), pivot, path.corner, it)


def _adjacent(icm: ICMatrix) -> NDArray[np.float64]:
    s = icm.slack
    n = s.shape[0]
    return np.array([[s[k, k + 1], s[k + 1, k]] for k in range(n - 1)]).reshape(-1, 2)


@dataclass(frozen=True)
class AccordionICCheck:
    adjacent: NDArray[np.float64]
    adjacent_ok: bool
    full_feasible: bool
    full_binding: bool
    failing_pair: tuple[int, int] | None
    ic: ICMatrix = field(repr=False)

    @property
    def passed(self) -> bool:
        return self.adjacent_ok and self.full_feasible

    @property
    def chain_consistent(self) -> bool:
        """Slack adjacent constraints must imply a slack full matrix."""
        return (not self.adjacent_ok) or (self.full_feasible and not self.full_binding)


def is_accordion(a: Allocation, tol: float = 1e-9) -> bool:
    bounds = [q.support_bounds() for q in a.lotteries]
    if any(b is None for b in bounds):
        return False
    lo = [b[0] for b in bounds]
    hi = [b[1] for b in bounds]
    if any(lo[k + 1] > lo[k] + tol or hi[k + 1] < hi[k] - tol for k in range(len(lo) - 1)):
        return False
    for k, q in enumerate(a.lotteries):
        if k == 0:
            want = [(lo[0], hi[0])]
        else:
            want = [(lo[k], lo[k - 1]), (hi[k - 1], hi[k])]
        want = [(p, r) for p, r in want if r - p > tol]
        if len(want) != len(q.segments):
            merged = len(want) == 2 and abs(want[0][1] - want[1][0]) <= tol and len(q.segments) == 1
            if not merged:
                return False
            want = [(want[0][0], want[1][1])]
        if any(abs(p - s) > tol or abs(r - t) > tol for (p, r), (s, t) in zip(want, q.segments)):
            return False
    return True


def check_accordion_ic(a: Allocation, e: Economy, eps: float = EPS_IC) -> AccordionICCheck:
    if not is_accordion(a):
        raise ArgumentError("allocation does not have the nested accordion layout")
    icm = ic_matrix(a, e, eps)
    adj = _adjacent(icm)
    failing = None
    for k, (up, down) in enumerate(adj):
        if up <= eps or down <= eps:
            failing = (k, k + 1)
            break
    return AccordionICCheck(
        adjacent=adj,
        adjacent_ok=failing is None,
        full_feasible=icm.feasible,
        full_binding=bool(icm.binding.any()),
        failing_pair=failing,
        ic=icm,
    )


# ---------------------------------------------------------------------------
# Monte Carlo welfare study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloConfig:
    n_list: tuple[int, ...] = tuple(range(2, 11))
    draws: int = 1000
    rate_range: tuple[float, float] = (0.0, 2.0)
    grid_n: int = 150
    seed: int = 0
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.draws < 1:
            raise ArgumentError("draws must be at least 1")
        if self.grid_n < 50:
            raise ArgumentError("grid_n must be at least 50")
        lo, hi = self.rate_range
        if not 0 <= lo < hi:
            raise ArgumentError(f"bad rate range {self.rate_range}")
        if any(n < 1 for n in self.n_list):
            raise ArgumentError("type counts must be positive")


@dataclass(frozen=True)
class MonteCarloRow:
    n_types: int
    draw: int
    rates: tuple[float, ...]
    w_firstbest: float
    w_secondbest: float
    w_pooling: float
    status: str = OPTIMAL

    def ordered(self, tol: float = 1e-9) -> bool:
        """``W_fb >= W_sb >= W_pool``, with strict separation when ``N >= 2``."""
        ok = self.w_firstbest >= self.w_secondbest - tol and self.w_secondbest >= self.w_pooling - tol
        if self.n_types >= 2:
            ok = ok and self.w_secondbest - self.w_pooling > tol
        return ok


def _row_rng(seed: int, n: int, draw: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n, draw)))


def _one_row(cfg: MonteCarloConfig, n: int, draw: int) -> MonteCarloRow:
    rng = _row_rng(cfg.seed, n, draw)
    lo, hi = cfg.rate_range
    rates = np.sort(rng.uniform(lo, hi, n))
    # A zero rate would make a utility constant; nudge it to the smallest positive float.
    rates = np.maximum(rates, np.finfo(float).tiny)
    e = exponential_economy(rates)
    g = discretize(e, cfg.grid_n)
    pool = grid_pooling(g)
    try:
        fb = oracle_first_best(g, method="lp")
        sb = oracle_second_best(g) if n > 1 else fb
    except NumericalError as exc:
        return MonteCarloRow(n, draw, tuple(rates.tolist()), np.nan, np.nan, pool.objective,
                             f"error: {exc}")
    status = OPTIMAL if fb.status == OPTIMAL and sb.status == OPTIMAL else f"{fb.status}/{sb.status}"
    return MonteCarloRow(n, draw, tuple(rates.tolist()), fb.objective, sb.objective,
                         pool.objective, status)


def _chunk(args: tuple[MonteCarloConfig, list[tuple[int, int]]]) -> list[MonteCarloRow]:
    cfg, cells = args
    return [_one_row(cfg, n, d) for n, d in cells]


def montecarlo_welfare(cfg: MonteCarloConfig) -> list[MonteCarloRow]:
    """One row per (N, draw), ordered by N then draw; identical for any ``jobs``."""
    cells = [(n, d) for n in cfg.n_list for d in range(cfg.draws)]
    if cfg.jobs <= 1:
        return [_one_row(cfg, n, d) for n, d in cells]
    size = max(1, len(cells) // (cfg.jobs * 8))
    chunks = [(cfg, cells[i: i + size]) for i in range(0, len(cells), size)]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        parts = list(pool.map(_chunk, chunks))
    return [row for part in parts for row in part]


@dataclass(frozen=True)
class MonteCarloSummary:
    n_types: int
    count: int
    mean_fb: float
    mean_sb: float
    mean_pool: float
    se_fb: float
    se_sb: float
    se_pool: float


def summarize(rows: list[MonteCarloRow]) -> list[MonteCarloSummary]:
    out = []
    for n in sorted({r.n_types for r in rows}):
        sel = [r for r in rows if r.n_types == n and r.status == OPTIMAL]
        arr = np.array([[r.w_firstbest, r.w_secondbest, r.w_pooling] for r in sel])
        k = len(sel)
        mean = arr.mean(axis=0)
        se = arr.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.full(3, np.nan)
        out.append(MonteCarloSummary(n, k, *mean.tolist(), *se.tolist()))
    return out


def summaries_agree(a: list[MonteCarloSummary], b: list[MonteCarloSummary], k: float = 3.0) -> bool:
    """Per-N means of two runs differ by at most ``k`` combined standard errors."""
    for sa, sb in zip(a, b):
        for m1, m2, s1, s2 in (
            (sa.mean_fb, sb.mean_fb, sa.se_fb, sb.se_fb),
            (sa.mean_sb, sb.mean_sb, sa.se_sb, sb.se_sb),
            (sa.mean_pool, sb.mean_pool, sa.se_pool, sb.se_pool),
        ):
            if abs(m1 - m2) > k * np.hypot(s1, s2):
                return False
    return len(a) == len(b)
