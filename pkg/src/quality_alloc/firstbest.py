"""Unconstrained (first-best) allocations.

Two types are solved in closed form through the weighted utility gap
``g(x) = α u_P(x) - (1 - α) u_I(x)``: the more risk-averse type is placed
where ``g`` is largest, which yields one of three block patterns.  For any
number of types this module builds the nested "accordion" family of
allocations and recovers welfare weights under which a member of that family
is optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .model import (
    EPS_MASS,
    EPS_X,
    Allocation,
    ArgumentError,
    Economy,
    InfeasibleError,
    Interval,
    InvariantError,
    Lottery,
    NumericalError,
    Supply,
    detect_disposal,
    detect_inverted_spread,
    fast_welfare,
)

IP, PI, IPI = "IP", "PI", "IPI"
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# ---------------------------------------------------------------------------
# Two types
# ---------------------------------------------------------------------------


def g_eval(e: Economy, x) -> NDArray[np.float64] | float:
    """Weighted utility gap between the two types at quality ``x``."""
    e.require_two_types()
    a = e.alpha
    u_p, u_i = e.utilities
    val = a * u_p(x) - (1.0 - a) * u_i(x)
    return float(val) if np.ndim(val) == 0 else val


def golden_max(fun, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    """Maximizer of a quasi-concave ``fun`` on ``[lo, hi]``; endpoints are admissible."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fun(d)
    best = 0.5 * (a + b)
    # Comparisons lose resolution near a flat peak; one Newton step on
    # central differences recovers the last digits.
    h = 1e-5 * (hi - lo)
    if lo + h < best < hi - h:
        up, mid, dn = fun(best + h), fun(best), fun(best - h)
        curv = up - 2 * mid + dn
        if curv < 0:
            step = 0.5 * h * (up - dn) / curv
            if abs(step) < h:
                best -= step
    # The peak may sit on the boundary of the search interval.
    return max((lo, best, hi), key=fun)


def g_maximizer(e: Economy) -> float:
    return golden_max(lambda x: g_eval(e, x), 0.0, e.x_bar)


@dataclass(frozen=True)
class FirstBestReport:
    """Closed-form first-best for two types.

    ``x1``/``x2`` bound the block of the more risk-averse type in every
    structure: ``IP`` has ``x2 = X̄``, ``PI`` has ``x1 = 0``.
    """

    structure: str
    x1: float
    x2: float
    x_bar: float
    x_bar_p: float
    x_bar_i: float
    x_star: float
    allocation: Allocation
    welfare: float

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "x1": self.x1,
            "x2": self.x2,
            "x_bar": self.x_bar,
            "x_bar_p": self.x_bar_p,
            "x_bar_i": self.x_bar_i,
            "x_star": self.x_star,
            "welfare": self.welfare,
        }


def block_allocation(e: Economy, x1: float, x2: float, x_bar: float) -> Allocation:
    """P gets ``f|[x1, x2]``; I gets ``f|[0, x1] ∪ [x2, x_bar]``."""
    s = e.supply
    q_p = Lottery.restriction(s, [(x1, x2)])
    q_i = Lottery.restriction(s, [(0.0, x1), (x2, x_bar)])
    return Allocation((q_p, q_i), tuple(e.masses.tolist()))


def ipi_thresholds(e: Economy) -> tuple[float, float]:
    """Root of ``g(x2(x1)) = g(x1)`` with ``x2(x1)`` keeping the P block at mass ``μ_P``."""
    s = e.supply
    mu_p, mu_i = e.masses
    f_lo = s.cdf(0.0)

    def x2_of(x1: float) -> float:
        return float(s.quantile(min(float(s.cdf(x1)) + mu_p, s.total)))

    def h(x1: float) -> float:
        return g_eval(e, x2_of(x1)) - g_eval(e, x1)

    hi = float(s.quantile(f_lo + mu_i))
    x1 = brentq(h, 0.0, hi, xtol=EPS_X * 1e-3, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(x1), x2_of(x1)


def classify_first_best(e: Economy) -> FirstBestReport:
    e.require_two_types()
    s = e.supply
    mu_p, mu_i = e.masses
    x_bar = e.x_bar
    x_bar_p = float(s.quantile(mu_p))
    x_bar_i = float(s.quantile(mu_i))
    x_star = g_maximizer(e)
    if g_eval(e, x_bar_i) <= g_eval(e, x_bar):
        structure, x1, x2 = IP, x_bar_i, x_bar
    elif g_eval(e, x_bar_p) <= g_eval(e, 0.0):
        structure, x1, x2 = PI, 0.0, x_bar_p
    else:
        structure = IPI
        x1, x2 = ipi_thresholds(e)
    alloc = block_allocation(e, x1, x2, x_bar)
    return FirstBestReport(
        structure, x1, x2, x_bar, x_bar_p, x_bar_i, x_star, alloc, fast_welfare(alloc, e)
    )


@dataclass(frozen=True)
class MassThreshold:
    """Split of a fixed population between the two types where the structure changes.

    ``value`` is the mass of the less risk-averse type at the switch, or None
    when the structure does not depend on the split.
    """

    value: float | None
    below: str
    above: str
    x_star: float


def mass_threshold(e: Economy, total_mass: float) -> MassThreshold:
    e.require_two_types()
    s = e.supply
    if not 0 < total_mass <= s.total:
        raise ArgumentError(f"total mass must lie in (0, {s.total}], got {total_mass}")
    x_bar = float(s.quantile(total_mass))
    g = lambda x: g_eval(e, x)  # noqa: E731
    x_star = golden_max(g, 0.0, x_bar)
    g0, g_bar, g_peak = g(0.0), g(x_bar), g(x_star)
    tiny = 1e-14 * max(1.0, abs(g_peak))
    if g_peak <= g0 + tiny:
        return MassThreshold(None, PI, PI, x_star)
    if g_peak <= g_bar + tiny:
        return MassThreshold(None, IP, IP, x_star)
    if g0 <= g_bar:
        # Rising branch: I's block [0, X̄_I] ends where g returns to g(X̄).
        x_t = brentq(lambda x: g(x) - g_bar, 0.0, x_star, xtol=1e-14)
        return MassThreshold(float(s.cdf(x_t)), IP, IPI, x_star)
    # Falling branch: P's block [0, X̄_P] ends where g drops back to g(0).
    x_t = brentq(lambda x: g(x) - g0, x_star, x_bar, xtol=1e-14)
    return MassThreshold(total_mass - float(s.cdf(x_t)), PI, IPI, x_star)


# ---------------------------------------------------------------------------
# Nested (accordion) family for N types
# ---------------------------------------------------------------------------


def _union(blocks: Sequence[Interval]) -> list[Interval]:
    out: list[Interval] = []
    for a, b in sorted(blocks):
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def _free_pieces(blocks: Sequence[Interval], upper: float) -> list[Interval]:
    """``[0, upper]`` minus the union of ``blocks``."""
    pieces, pos = [], 0.0
    for a, b in _union(blocks):
        if a > pos:
            pieces.append((pos, min(a, upper)))
        pos = max(pos, b)
    if pos < upper:
        pieces.append((pos, upper))
    return [(a, b) for a, b in pieces if b > a]


def _free_mass(supply: Supply, pieces: Sequence[Interval], lo: float, hi: float) -> float:
    return sum(supply.mass(max(a, lo), min(b, hi)) for a, b in pieces if min(b, hi) > max(a, lo))


def _free_point(supply: Supply, pieces: Sequence[Interval], m: float, left: bool) -> float:
    """Quality at which the free supply accumulated from 0 reaches ``m``.

    ``left=True`` returns the smallest such point (a block start),
    ``left=False`` the largest (a block end).
    """
    acc = 0.0
    for idx, (a, b) in enumerate(pieces):
        piece = supply.mass(a, b)
        if (acc + piece > m) if left else (acc + piece >= m):
            target = float(supply.cdf(a)) + (m - acc)
            return float(np.clip(supply.quantile(min(target, supply.total)), a, b))
        acc += piece
    return pieces[-1][1] if pieces else 0.0


@dataclass(frozen=True)
class AccordionSpec:
    """Support bounds ``[lower[k], upper[k]]`` of each type, in type order."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lower) != len(self.upper):
            raise ArgumentError("lower and upper bounds differ in length")
        for k, (a, b) in enumerate(zip(self.lower, self.upper)):
            if not a < b:
                raise ArgumentError(f"type {k}: empty interval [{a}, {b}]")

    @property
    def n_types(self) -> int:
        return len(self.lower)

    def blocks(self, k: int) -> list[Interval]:
        """Pieces of ``[lower[k], upper[k]]`` not claimed by earlier types."""
        taken = [(self.lower[i], self.upper[i]) for i in range(k)]
        inner = _free_pieces(taken, self.upper[k])
        return [(max(a, self.lower[k]), b) for a, b in inner if b > self.lower[k]]


def build_accordion(e: Economy, spec: AccordionSpec, tol: float = EPS_MASS) -> Allocation:
    if spec.n_types != e.n_types:
        raise ArgumentError(f"spec has {spec.n_types} types, economy has {e.n_types}")
    s = e.supply
    lots = []
    for k, mu in enumerate(e.masses):
        segs = spec.blocks(k)
        have = sum(s.mass(a, b) for a, b in segs)
        if abs(have - mu) > tol:
            raise InfeasibleError(
                f"type {k}: interval carries free mass {have:.9g}, needs {mu:.9g} "
                f"(shortfall {mu - have:.3g})"
            )
        lots.append(Lottery(tuple(segs), 1.0 / have, 0.0))
    return Allocation(tuple(lots), tuple(e.masses.tolist()))


def spec_from_allocation(a: Allocation) -> AccordionSpec:
    bounds = [q.support_bounds() for q in a.lotteries]
    if any(b is None for b in bounds):
        raise InvariantError("a type receives no goods")
    return AccordionSpec(tuple(b[0] for b in bounds), tuple(b[1] for b in bounds))


def random_accordion_spec(e: Economy, rng: np.random.Generator) -> AccordionSpec:
    """A random member of the nested family, drawn type by type in free-mass coordinates."""
    s = e.supply
    x_bar = e.x_bar
    lower, upper = [], []
    for k, mu in enumerate(e.masses):
        pieces = _free_pieces(list(zip(lower, upper)), x_bar)
        room = _free_mass(s, pieces, 0.0, x_bar)
        if k == e.n_types - 1:
            start = 0.0
        else:
            start = float(rng.uniform(0.0, max(room - mu, 0.0)))
        x_lo = _free_point(s, pieces, start, left=True)
        x_hi = _free_point(s, pieces, min(start + mu, room), left=False)
        lower.append(x_lo)
        upper.append(x_hi)
    return AccordionSpec(tuple(lower), tuple(upper))


# ---------------------------------------------------------------------------
# Welfare weights supporting a nested allocation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightRecovery:
    """Weights ``α`` and intercepts ``b`` with ``v(x) = max_j α_j u_j(x) + b_j``."""

    weights: NDArray[np.float64]
    intercepts: NDArray[np.float64]
    cases: tuple[int, ...]
    economy: Economy = field(repr=False)

    def lines(self, x) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        return np.stack(
            [a * u(x) + b for a, b, u in zip(self.weights, self.intercepts, self.economy.utilities)]
        )

    def envelope(self, x) -> NDArray[np.float64]:
        return self.lines(x).max(axis=0)

    def normalized(self) -> NDArray[np.float64]:
        return self.weights / self.weights.sum()


def recover_welfare_weights(e: Economy, a: Allocation) -> WeightRecovery:
    """Backward recursion from the least risk-averse type; ``α_N = 1``, ``b_N = 0``."""
    n = e.n_types
    if a.n_types != n:
        raise ArgumentError(f"allocation has {a.n_types} types, economy has {n}")
    check_nested(e, a)
    spec = spec_from_allocation(a)
    lo, hi = np.array(spec.lower), np.array(spec.upper)
    x_bar = e.x_bar
    us = e.utilities
    alpha = np.zeros(n)
    b = np.zeros(n)
    alpha[-1] = 1.0
    cases = [0] * n

    def v_next(k: int, x: float) -> float:
        return max(alpha[j] * float(us[j](x)) + b[j] for j in range(k + 1, n))

    for k in range(n - 2, -1, -1):
        w_lo, w_hi = lo[k + 1:].min(), hi[k + 1:].max()
        if w_lo < lo[k] and hi[k] < w_hi:
            case, p, r = 1, lo[k], hi[k]
        elif hi[k] <= w_lo:
            case, p, r = 2, 0.0, hi[k]
        elif w_hi <= lo[k]:
            case, p, r = 3, lo[k], x_bar
        else:
            raise InvariantError(f"type {k}: support overlaps later types in a non-nested way")
        du = float(us[k](p) - us[k](r))
        if abs(du) < 1e-14:
            raise NumericalError(f"type {k}: utility equal at both anchors {p:.6g}, {r:.6g}")
        alpha[k] = (v_next(k, p) - v_next(k, r)) / du
        b[k] = v_next(k, p) - alpha[k] * float(us[k](p))
        cases[k] = case
    return WeightRecovery(alpha, b, tuple(cases), e)


def check_nested(e: Economy, a: Allocation) -> None:
    """Raise unless the allocation has no disposal and no inverted spread."""
    s = e.supply
    for k in range(a.n_types):
        w = detect_disposal(a, k, s)
        if w is not None:
            raise InvariantError(f"type {k} exhibits disposal: {w}")
        for j in range(k + 1, a.n_types):
            w = detect_inverted_spread(a, k, j, s)
            if w is not None:
                raise InvariantError(f"types {k}, {j} exhibit an inverted spread: {w}")


@dataclass(frozen=True)
class EnvelopeCheck:
    """How well the recovered envelope selects each type exactly on its support."""

    boundary_offset: float  # max distance from a block boundary to the lines' crossing
    support_gap: float  # max of v - line_j on supp(q_j)
    off_support_margin: float  # min of v - line_j off supp(q_j), away from boundaries

    def ok(self, tol_x: float = EPS_X, tol_v: float = 1e-7) -> bool:
        return (
            self.boundary_offset <= tol_x
            and self.support_gap <= tol_v
            and self.off_support_margin > 0.0
        )


def envelope_check(rec: WeightRecovery, a: Allocation, samples: int = 64) -> EnvelopeCheck:
    e = rec.economy
    x_bar = e.x_bar
    owner_at = []
    cuts = sorted({p for q in a.lotteries for seg in q.segments for p in seg} | {0.0, x_bar})
    cuts = [c for c in cuts if c <= x_bar + EPS_X]
    gap, margin = 0.0, math.inf
    for s, t in zip(cuts[:-1], cuts[1:]):
        if t - s <= EPS_X:
            continue
        mid = 0.5 * (s + t)
        owner = next(k for k, q in enumerate(a.lotteries) if any(p <= mid < r for p, r in q.segments))
        owner_at.append((s, t, owner))
        xs = np.linspace(s, t, samples)
        lines = rec.lines(xs)
        env = lines.max(axis=0)
        gap = max(gap, float(np.max(env - lines[owner])))
        inner = xs[1:-1]
        if inner.size:
            others = np.delete(rec.lines(inner), owner, axis=0)
            if others.size:
                margin = min(margin, float(np.min(rec.lines(inner)[owner] - others.max(axis=0))))
    offset = 0.0
    h = 1e-7 * max(1.0, x_bar)
    for (s0, t0, left), (s1, t1, right) in zip(owner_at[:-1], owner_at[1:]):
        if left == right:
            continue
        x = t0
        diff = lambda z: float(rec.lines(z)[left] - rec.lines(z)[right])  # noqa: E731
        slope = (diff(x + h) - diff(x - h)) / (2 * h)
        offset = max(offset, abs(diff(x)) / max(abs(slope), 1e-300))
    return EnvelopeCheck(offset, gap, margin)
