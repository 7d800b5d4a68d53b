"""Fair competitive equilibrium with equal budgets.

Every type has budget ``omega`` and buys one unit of probability mass.  At an
equilibrium each type bids ``(u_i(x) - eta_i) / xi_i`` for quality ``x``, the
price is the bid of whoever holds the good, and nobody outbids the holder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .firstbest import AccordionSpec, build_accordion
from .model import (
    EPS_MASS,
    Allocation,
    ArgumentError,
    Economy,
    NumericalError,
    Utility,
    detect_disposal,
    detect_inverted_spread,
    fast_welfare,
)
from .secondbest import pooling_welfare, solve_second_best, solve_second_best_no_disposal

KKT_TOL = 1e-4
GAUSS_NODES, GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(48)


@dataclass(frozen=True, eq=False)
class PriceSchedule:
    """Piecewise price: on piece ``k``, ``factors[k] * (u_o(x) - eta_o) / xi_o`` with ``o = owners[k]``.

    Zero past the last edge.
    """

    edges: NDArray[np.float64]
    owners: NDArray[np.int64]
    xi: NDArray[np.float64]
    eta: NDArray[np.float64]
    utilities: tuple[Utility, ...]
    factors: NDArray[np.float64] | None = None

    def bid(self, i: int, x: NDArray[np.float64]) -> NDArray[np.float64]:
        return (self.utilities[i](x) - self.eta[i]) / self.xi[i]

    def piece_of(self, x: NDArray[np.float64]) -> NDArray[np.int64]:
        k = np.searchsorted(self.edges, x, side="right") - 1
        return np.clip(k, 0, self.owners.size - 1)

    def owner_at(self, x: NDArray[np.float64]) -> NDArray[np.int64]:
        x = np.asarray(x, dtype=float)
        return np.where(x <= self.edges[-1], self.owners[self.piece_of(x)], -1)

    def __call__(self, x) -> NDArray[np.float64]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k = self.piece_of(x)
        out = np.zeros_like(x)
        for i in np.unique(self.owners):
            sel = self.owners[k] == i
            out[sel] = self.bid(int(i), x[sel])
        if self.factors is not None:
            out *= self.factors[k]
        return np.where(x <= self.edges[-1], out, 0.0)

    def perturbed(self, piece: int, factor: float) -> PriceSchedule:
        f = np.ones(self.owners.size) if self.factors is None else self.factors.copy()
        f[piece] *= factor
        return replace(self, factors=f)


@dataclass(frozen=True, eq=False)
class FlatPrice:
    level: float
    upper: float

    def __call__(self, x) -> NDArray[np.float64]:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return np.where(x <= self.upper, self.level, 0.0)

    def owner_at(self, x) -> NDArray[np.int64]:
        return np.full(np.shape(x), -1)


@dataclass(frozen=True)
class CEResiduals:
    clearing: float
    mass: float
    dominance: float
    support: float
    budget: float
    budget_gap: float
    multipliers_ok: bool
    nested: bool
    accordion: bool

    def ok(self, tol: float = KKT_TOL) -> bool:
        return (
            self.clearing <= tol
            and self.mass <= tol
            and self.dominance <= tol
            and self.support <= tol
            and self.budget <= tol
            and self.multipliers_ok
            and self.nested
            and self.accordion
        )

    def kkt(self) -> float:
        return max(self.dominance, self.support, self.budget)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class CEReport:
    spec: AccordionSpec
    allocation: Allocation
    price: PriceSchedule | FlatPrice
    xi: NDArray[np.float64]
    eta: NDArray[np.float64]
    omega: float
    method: str
    residuals: CEResiduals | None = None
    iterations: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lower": list(self.spec.lower),
            "upper": list(self.spec.upper),
            "xi": self.xi.tolist(),
            "eta": self.eta.tolist(),
            "omega": self.omega,
            "iterations": self.iterations,
            "residuals": None if self.residuals is None else self.residuals.to_dict(),
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def _integrate(fun, a: float, b: float) -> float:
    half = 0.5 * (b - a)
    x = a + half * (GAUSS_NODES + 1.0)
    return float(half * np.dot(GAUSS_WEIGHTS, fun(x)))


def spending(price, q, supply, cuts: NDArray[np.float64]) -> float:
    """``∫ p dq`` with quadrature split at ``cuts`` (the price's piece edges)."""
    total = 0.0
    for a, b in q.segments:
        pts = np.unique(np.concatenate([[a, b], cuts[(cuts > a) & (cuts < b)]]))
        for lo, hi in zip(pts[:-1], pts[1:]):
            total += _integrate(lambda x: price(x) * supply.density(x), lo, hi)
    return q.scale * total


def _bids(e: Economy, xi, eta, x: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.vstack([(u(x) - h) / s for u, s, h in zip(e.utilities, xi, eta)])


def validate_ce(r: CEReport, e: Economy, samples: int = 4001) -> CEResiduals:
    """Residuals of every equilibrium condition; never raises."""
    s = e.supply
    a = r.allocation
    x_bar = e.x_bar
    xs = np.linspace(0.0, x_bar, samples)
    price = r.price(xs)
    bids = _bids(e, r.xi, r.eta, xs)
    dominance = float(np.max(bids - price[None, :]))
    cuts = getattr(r.price, "edges", np.array([0.0, x_bar]))
    support = 0.0
    budgets = []
    for i, q in enumerate(a.lotteries):
        for lo, hi in q.segments:
            xx = np.linspace(lo, hi, 257)
            own_bid = (e.utilities[i](xx) - r.eta[i]) / r.xi[i]
            support = max(support, float(np.max(np.abs(r.price(xx) - own_bid))))
        budgets.append(spending(r.price, q, s, np.asarray(cuts)))
    budgets = np.array(budgets)
    mass = max(abs(q.total_mass(s) + q.atom - 1.0) for q in a.lotteries)
    nested = _nested(r.spec, x_bar)
    accordion = all(detect_disposal(a, k, s) is None for k in range(a.n_types)) and all(
        detect_inverted_spread(a, i, j, s) is None
        for i in range(a.n_types)
        for j in range(i + 1, a.n_types)
    )
    return CEResiduals(
        clearing=float(a.feasibility_residual(s)),
        mass=float(mass),
        dominance=max(dominance, 0.0),
        support=support,
        budget=float(np.max(np.abs(budgets - r.omega))),
        budget_gap=float(budgets.max() - budgets.min()),
        multipliers_ok=bool(np.all(r.xi > 0) and np.all(r.eta >= 0)),
        nested=nested,
        accordion=accordion,
    )


def _nested(spec: AccordionSpec, x_bar: float, tol: float = 1e-9) -> bool:
    lo, hi = np.array(spec.lower), np.array(spec.upper)
    return bool(
        abs(lo[-1]) <= tol
        and abs(hi[-1] - x_bar) <= 1e-6 * max(1.0, x_bar)
        and np.all(np.diff(lo) < 0)
        and np.all(np.diff(hi) > 0)
        and lo[0] < hi[0]
    )


def fit_multipliers(
    e: Economy, a: Allocation, price, samples: int = 257
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Least-squares ``u_i(x) ≈ xi_i p(x) + eta_i`` over each type's support."""
    xi = np.zeros(e.n_types)
    eta = np.zeros(e.n_types)
    for i, (u, q) in enumerate(zip(e.utilities, a.lotteries)):
        xs = np.concatenate([np.linspace(lo, hi, samples) for lo, hi in q.segments])
        m = np.column_stack([price(xs), np.ones_like(xs)])
        (xi[i], eta[i]), *_ = np.linalg.lstsq(m, u(xs), rcond=None)
    return xi, eta


def flat_price_pooling(e: Economy, omega: float = 1.0) -> CEReport:
    """Pooling allocation under the flat price that exhausts every budget."""
    from .model import pooling_allocation

    a = pooling_allocation(e)
    price = FlatPrice(omega, e.x_bar)
    xi, eta = fit_multipliers(e, a, price)
    xi = np.where(np.abs(xi) < 1e-300, 1e-300, xi)
    spec = AccordionSpec(tuple([0.0] * e.n_types), tuple([e.x_bar] * e.n_types))
    return CEReport(spec, a, price, xi, eta, omega, "flat-pooling")


# ---------------------------------------------------------------------------
# Two types: one-dimensional search over the inner block's left end
# ---------------------------------------------------------------------------


class _TwoTypeMarket:
    def __init__(self, e: Economy, omega: float):
        e.require_two_types()
        self.e = e
        self.omega = omega
        self.s = e.supply
        self.u1, self.u2 = e.utilities
        self.t1, self.t2 = e.payoff
        self.mu1, self.mu2 = e.masses
        self.x_bar = e.x_bar
        self.a_max = float(self.s.quantile(self.s.cdf(self.x_bar) - self.mu1))

    def b_of(self, a: float) -> float:
        return float(self.s.quantile(min(self.s.cdf(a) + self.mu1, self.s.total)))

    def bids(self, a: float) -> tuple[float, float, float, float, float]:
        """Slopes and shifts ``(s1, t1, s2, t2)`` of ``s u - t`` plus the inner block's right end."""
        b = self.b_of(a)
        u2x = float(self.u2(self.x_bar))
        v2 = (float(self.t2.between(0.0, a)) + float(self.t2.between(b, self.x_bar))) / self.mu2
        s2 = self.omega / (v2 - u2x)
        t2 = s2 * u2x
        u1a, u1b = float(self.u1(a)), float(self.u1(b))
        u2a, u2b = float(self.u2(a)), float(self.u2(b))
        s1 = s2 * (u2a - u2b) / (u1a - u1b)
        t1 = s1 * u1a - s2 * u2a + t2
        return s1, t1, s2, t2, b

    def residual(self, a: float) -> float:
        s1, t1, _, _, b = self.bids(a)
        v1 = float(self.t1.between(a, b)) / self.mu1
        return s1 * v1 - t1 - self.omega


def _newton_bracketed(fun, lo: float, hi: float, f_lo: float, tol: float = 1e-14,
                      max_iter: int = 100) -> tuple[float, int]:
    """Damped Newton with a secant-free numerical derivative, falling back to bisection."""
    x = 0.5 * (lo + hi)
    fx = fun(x)
    for it in range(1, max_iter + 1):
        if fx == 0.0 or hi - lo <= tol * max(1.0, abs(x)):
            return x, it
        if (fx > 0) == (f_lo > 0):
            lo, f_lo = x, fx
        else:
            hi = x
        h = 1e-7 * max(1.0, abs(x))
        slope = (fun(x + h) - fx) / h
        step = -fx / slope if slope != 0 else np.inf
        cand = x + step
        damp = 1.0
        while not lo < cand < hi and damp > 1e-3:
            damp *= 0.5
            cand = x + damp * step
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        x, fx = cand, fun(cand)
    return x, max_iter


def _schedule(e: Economy, spec: AccordionSpec, xi, eta) -> PriceSchedule:
    n = e.n_types
    edges = [spec.lower[k] for k in range(n - 1, -1, -1)] + [spec.upper[k] for k in range(n)]
    owners = list(range(n - 1, 0, -1)) + [0] + list(range(1, n))
    edges_arr = np.array(edges, dtype=float)
    owners_arr = np.array(owners, dtype=np.int64)
    keep = np.diff(edges_arr) > 0
    return PriceSchedule(
        np.concatenate([edges_arr[:-1][keep], [edges_arr[-1]]]),
        owners_arr[keep],
        np.asarray(xi, dtype=float),
        np.asarray(eta, dtype=float),
        e.utilities,
    )


def solve_fair_ce_2(e: Economy, omega: float = 1.0, validate: bool = True,
                    scan: int = 64) -> CEReport:
    """Equal-budget equilibrium for two types; the more risk-averse type holds one middle block."""
    if omega <= 0:
        raise ArgumentError("budget must be positive")
    m = _TwoTypeMarket(e, omega)
    grid = np.linspace(0.0, m.a_max, scan + 1)[1:-1]
    res = np.array([m.residual(a) for a in grid])
    flips = np.flatnonzero(np.sign(res[:-1]) != np.sign(res[1:]))
    if flips.size == 0:
        raise NumericalError(
            f"no sign change of the budget residual on (0, {m.a_max:.6g}); "
            f"range [{res.min():.3g}, {res.max():.3g}]"
        )
    k = int(flips[0])
    a, iters = _newton_bracketed(m.residual, grid[k], grid[k + 1], res[k])
    if abs(m.residual(a)) > 1e-10:
        a = brentq(m.residual, grid[k], grid[k + 1], xtol=1e-15)
    s1, t1, s2, t2, b = m.bids(a)
    spec = AccordionSpec((float(a), 0.0), (float(b), m.x_bar))
    alloc = build_accordion(e, spec)
    xi = np.array([1.0 / s1, 1.0 / s2])
    eta = np.array([t1 / s1, t2 / s2])
    report = CEReport(
        spec, alloc, _schedule(e, spec, xi, eta), xi, eta, omega, "threshold-newton", None, iters,
        {"budget_roots_on_scan": int(flips.size)},
    )
    if not validate:
        return report
    resid = validate_ce(report, e)
    report = replace(report, residuals=resid)
    if not resid.ok():
        raise NumericalError(f"equilibrium fails validation: {resid.to_dict()}")
    return report


# ---------------------------------------------------------------------------
# Any number of types: price adjustment on a grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TatonnementConfig:
    n: int = 1000
    omega: float = 1.0
    tol: float = 1e-6
    max_rounds: int = 50_000
    kappa0: float = 0.1
    kappa_max: float = 0.5
    kappa_min: float = 1e-6


class _GridMarket:
    """Bid curves ``s_i u_i - t_i`` sampled on bin edges; holders split boundary bins linearly."""

    def __init__(self, e: Economy, n: int):
        self.e = e
        self.edges = np.linspace(0.0, e.supply.upper, n + 1)
        cdf = e.supply.cdf(self.edges)
        self.bin_mass = np.diff(cdf)
        self.u = np.vstack([u(self.edges) for u in e.utilities])
        self.mu = e.masses

    def demand(self, s: NDArray[np.float64], t: NDArray[np.float64]):
        n_t = self.mu.size
        bids = s[:, None] * self.u - t[:, None]
        full = np.vstack([bids, np.zeros((1, bids.shape[1]))])  # last row: unsold
        own = np.argmax(full, axis=0)
        top = full[own, np.arange(full.shape[1])]
        lo_own, hi_own = own[:-1], own[1:]
        cols = np.arange(self.bin_mass.size)
        # Linear crossing inside bins whose holder changes.
        d_lo = top[:-1] - full[hi_own, cols]
        d_hi = full[lo_own, cols + 1] - top[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            phi = np.where(lo_own == hi_own, 1.0, d_lo / (d_lo - d_hi))
        phi = np.clip(np.nan_to_num(phi, nan=0.5), 0.0, 1.0)
        mass = np.zeros(n_t + 1)
        spend = np.zeros(n_t + 1)
        np.add.at(mass, lo_own, phi * self.bin_mass)
        np.add.at(mass, hi_own, (1 - phi) * self.bin_mass)
        # Price at the centre of each holder's share of the bin, by linear interpolation.
        b_lo, b_hi = full[lo_own, cols], full[lo_own, cols + 1]
        p_left = b_lo + 0.5 * phi * (b_hi - b_lo)
        c_lo, c_hi = full[hi_own, cols], full[hi_own, cols + 1]
        p_right = c_lo + (0.5 + 0.5 * phi) * (c_hi - c_lo)
        np.add.at(spend, lo_own, phi * self.bin_mass * p_left)
        np.add.at(spend, hi_own, (1 - phi) * self.bin_mass * p_right)
        return mass[:n_t] / self.mu, spend[:n_t] / self.mu, own, phi

    def crossings(self, own, phi) -> list[tuple[float, int, int]]:
        """``(x, left holder, right holder)`` wherever the holder changes."""
        out = []
        w = self.edges[1] - self.edges[0]
        for b in np.flatnonzero(own[:-1] != own[1:]):
            out.append((float(self.edges[b] + phi[b] * w), int(own[b]), int(own[b + 1])))
        return out


@dataclass(frozen=True)
class TatonnementFailure:
    rounds: int
    mass_excess: NDArray[np.float64]
    budget_excess: NDArray[np.float64]


class NoConvergenceError(NumericalError):
    def __init__(self, failure: TatonnementFailure):
        self.failure = failure
        super().__init__(
            f"no convergence after {failure.rounds} rounds; mass excess "
            f"{np.round(failure.mass_excess, 6).tolist()}, budget excess "
            f"{np.round(failure.budget_excess, 6).tolist()}"
        )


def _thresholds(e: Economy, crossings: list[tuple[float, int, int]]) -> AccordionSpec:
    """Accordion bounds from the holder sequence; upper bounds are re-derived from exact masses."""
    n = e.n_types
    seq = [crossings[0][1]] + [c[2] for c in crossings] if crossings else []
    want = list(range(n - 1, 0, -1)) + [0] + list(range(1, n)) + [n]
    if seq != want:
        raise NumericalError(f"holder sequence {seq} is not nested (expected {want})")
    xs = [c[0] for c in crossings]
    lower = [0.0] * n
    for k in range(n - 1):
        lower[k] = xs[n - 2 - k]
    s = e.supply
    upper = [0.0] * n
    prev_lo, prev_hi = None, None
    for k in range(n):
        if k == 0:
            f_hi = s.cdf(lower[0]) + e.masses[0]
        else:
            f_hi = s.cdf(prev_hi) + e.masses[k] - (s.cdf(prev_lo) - s.cdf(lower[k]))
        upper[k] = float(s.quantile(min(float(f_hi), s.total)))
        prev_lo, prev_hi = lower[k], upper[k]
    upper[-1] = e.x_bar
    return AccordionSpec(tuple(lower), tuple(upper))


def _adapt(k: NDArray[np.float64], trend: NDArray[np.float64], cfg: TatonnementConfig):
    k = np.where(trend < 0, 0.5 * k, np.where(trend > 0, 1.2 * k, k))
    return np.clip(k, cfg.kappa_min, cfg.kappa_max)


def tatonnement_ce(e: Economy, cfg: TatonnementConfig | None = None, validate: bool = True) -> CEReport:
    """Adjust each type's bid level and scale until every type spends its budget on one unit."""
    cfg = cfg or TatonnementConfig()
    if cfg.n < 100:
        raise ArgumentError("grid needs at least 100 bins")
    gm = _GridMarket(e, cfg.n)
    x_bar = e.x_bar
    tables = e.payoff
    pool_v = np.array([float(t.between(0.0, x_bar)) for t in tables]) / e.supply.mass(0.0, x_bar)
    u_bar = np.array([float(u(x_bar)) for u in e.utilities])
    # Start from bids that price the pooling bundle at the budget and vanish at X̄.
    s = cfg.omega / (pool_v - u_bar)
    t = s * u_bar
    n_t = e.n_types
    mass_ex = budget_ex = np.zeros(n_t)
    # Per-type steps: halved when an excess changes sign, grown while it persists.
    k_s = np.full(n_t, cfg.kappa0)
    k_t = np.full(n_t, cfg.kappa0)
    last_p = np.zeros(n_t)
    last_q = np.zeros(n_t)
    for rnd in range(1, cfg.max_rounds + 1):
        d, sp, own, phi = gm.demand(s, t)
        mass_ex = d - 1.0
        budget_ex = sp / cfg.omega - 1.0
        if max(np.abs(mass_ex).max(), np.abs(budget_ex).max()) < cfg.tol:
            break
        # Spending beyond what the excess quantity explains means bids are too steep.
        price_ex = budget_ex - mass_ex
        k_s = _adapt(k_s, price_ex * last_p, cfg)
        k_t = _adapt(k_t, mass_ex * last_q, cfg)
        s = s * (1.0 - k_s * np.clip(price_ex, -0.5, 0.5))
        t = t * (1.0 + k_t * np.clip(mass_ex, -0.5, 0.5))
        last_p, last_q = price_ex, mass_ex
    else:
        raise NoConvergenceError(TatonnementFailure(cfg.max_rounds, mass_ex, budget_ex))
    spec = _thresholds(e, gm.crossings(own, phi))
    alloc = build_accordion(e, spec, tol=EPS_MASS)
    sched0 = _schedule(e, spec, 1.0 / s, t / s)
    xi, eta = fit_multipliers(e, alloc, sched0)
    report = CEReport(
        spec, alloc, _schedule(e, spec, xi, eta), xi, eta, cfg.omega, "tatonnement", None, rnd,
        {"mass_excess": mass_ex.tolist(), "budget_excess": budget_ex.tolist()},
    )
    if validate:
        report = replace(report, residuals=validate_ce(report, e))
    return report


# ---------------------------------------------------------------------------
# Welfare comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WelfareRatio:
    w_ce: float
    w_sb: float
    w_sb_no_disposal: float
    w_pool: float

    @property
    def ratio(self) -> float:
        return (self.w_ce - self.w_pool) / (self.w_sb - self.w_pool)

    @property
    def ratio_no_disposal(self) -> float:
        return (self.w_ce - self.w_pool) / (self.w_sb_no_disposal - self.w_pool)


def welfare_ratio(e: Economy) -> WelfareRatio:
    """Equilibrium welfare gain over pooling as a share of the second-best gain."""
    ce = solve_fair_ce_2(e)
    return WelfareRatio(
        w_ce=fast_welfare(ce.allocation, e),
        w_sb=solve_second_best(e, coarse=None).welfare,
        w_sb_no_disposal=solve_second_best_no_disposal(e).welfare,
        w_pool=pooling_welfare(e),
    )


def price_table(r: CEReport, n: int = 1000) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.int64]]:
    edges = np.linspace(0.0, r.spec.upper[-1], n + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    return mids, r.price(mids), r.price.owner_at(mids)


def write_price_csv(path: str, r: CEReport, n: int = 1000) -> None:
    mids, p, owner = price_table(r, n)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "price", "owner"])
        for row in zip(mids, p, owner):
            w.writerow([f"{row[0]:.10g}", f"{row[1]:.10g}", int(row[2])])


def pareto_gaps(r: CEReport, e: Economy, n: int = 400) -> NDArray[np.float64]:
    """For each type, the LP gain from holding every other type at its equilibrium value.

    Values are measured on the same grid as the LP, relative to the binned
    equilibrium value, so a Pareto-efficient allocation scores about zero.
    """
    from scipy import sparse

    from .oracle import bin_allocation, build_lp, discretize
    from .simplex import OPTIMAL, LinearProgram, simplex_solve

    g = discretize(e, n)
    binned = np.diag(bin_allocation(r.allocation, g).ic_values)
    n_t, n_b = g.n_types, g.n_bins
    out = np.zeros(n_t)
    for i in range(n_t):
        w = np.zeros(n_t)
        w[i] = 1.0 / g.masses[i]
        base = build_lp(g, w, with_ic=False)
        rows = []
        for j in range(n_t):
            if j == i:
                continue
            row = np.zeros(base.n_vars)
            row[j * n_b:(j + 1) * n_b] = -g.utilities[j]
            rows.append(row)
        a_ub = sparse.vstack([base.a_ub, sparse.csr_matrix(np.array(rows))]).tocsr()
        b_ub = np.concatenate([base.b_ub, -binned[np.arange(n_t) != i] + 1e-12])
        res = simplex_solve(LinearProgram(base.c, a_ub, b_ub, base.a_eq, base.b_eq))
        if res.status != OPTIMAL:
            raise NumericalError(f"Pareto probe LP for type {i} ended {res.status}")
        out[i] = (res.objective - binned[i]) / abs(binned[i])
    return out
