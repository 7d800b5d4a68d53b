"""Domain types and primitive computations.

Qualities live on ``[0, X]`` with lower values preferred.  The no-service
outcome is the sentinel :data:`NO_SERVICE` and is worth 0 to every type.
Optimal lotteries always take the form "common scale times the supply
density on a few disjoint intervals, plus an atom at no-service", so
:class:`Lottery` stores exactly that and every payoff reduces to interval
integrals of ``u * f``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import integrate
from scipy.interpolate import PchipInterpolator

# Tolerances shared across modules.
EPS_MASS = 1e-7
EPS_IC = 1e-6
EPS_X = 1e-9
QUAD_TOL = 1e-8

Interval = tuple[float, float]


class ModelError(Exception):
    """Base class for all package errors."""


class ArgumentError(ModelError, ValueError):
    """Inputs violate an operation's preconditions."""


class InfeasibleError(ModelError):
    """A requested allocation cannot be built from the available supply."""


class NumericalError(ModelError, RuntimeError):
    """An iterative method failed or produced non-finite values."""


class InvariantError(ModelError):
    """A computed object violates a structural guarantee."""


class _NoService:
    _instance: "_NoService | None" = None

    def __new__(cls) -> "_NoService":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NO_SERVICE"

    def __reduce__(self):
        return (_NoService, ())


NO_SERVICE = _NoService()


# ---------------------------------------------------------------------------
# Utilities
# ---------------------------------------------------------------------------


class Utility:
    """Strictly decreasing positive utility over quality."""

    family: str = ""

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        raise NotImplementedError

    def knots(self) -> tuple[float, ...]:
        """Points where the utility is only piecewise smooth."""
        return ()

    def to_dict(self) -> dict:
        raise NotImplementedError


def _positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise ArgumentError(f"{name} must be positive and finite, got {value!r}")
    return value


@dataclass(frozen=True)
class ExponentialDiscount(Utility):
    """Delay discounting ``exp(-rate * x)``."""

    rate: float
    family: str = field(default="exponential", init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate", _positive("rate", self.rate))

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return np.exp(-self.rate * np.asarray(x, dtype=float))

    def to_dict(self) -> dict:
        return {"family": self.family, "rate": self.rate}


@dataclass(frozen=True)
class ConstantAbsolute(Utility):
    """CARA utility ``exp(-a * x)``."""

    coefficient: float
    family: str = field(default="cara", init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "coefficient", _positive("coefficient", self.coefficient))

    @property
    def rate(self) -> float:
        return self.coefficient

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return np.exp(-self.coefficient * np.asarray(x, dtype=float))

    def to_dict(self) -> dict:
        return {"family": self.family, "coefficient": self.coefficient}


@dataclass(frozen=True)
class ConstantRelative(Utility):
    """Shifted CRRA utility ``(1 + x) ** -exponent``."""

    exponent: float
    family: str = field(default="crra", init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "exponent", _positive("exponent", self.exponent))

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return np.power(1.0 + np.asarray(x, dtype=float), -self.exponent)

    def to_dict(self) -> dict:
        return {"family": self.family, "exponent": self.exponent}


@dataclass(frozen=True, eq=False)
class TabulatedUtility(Utility):
    """Monotone (PCHIP) interpolation of samples with an exponential tail.

    Beyond the last sample the curve decays exponentially with the slope it
    has at the last sample, so positivity and the limit at infinity hold.
    """

    points: tuple[float, ...]
    values: tuple[float, ...]
    family: str = field(default="tabulated", init=False, repr=False)

    def __post_init__(self) -> None:
        xs = np.asarray(self.points, dtype=float)
        ys = np.asarray(self.values, dtype=float)
        if xs.ndim != 1 or xs.size < 3 or xs.shape != ys.shape:
            raise ArgumentError("tabulated utility needs >= 3 matching samples")
        if xs[0] != 0.0 or np.any(np.diff(xs) <= 0):
            raise ArgumentError("sample points must start at 0 and increase")
        if np.any(ys <= 0) or np.any(np.diff(ys) >= 0):
            raise ArgumentError("sample values must be positive and strictly decreasing")
        object.__setattr__(self, "points", tuple(xs.tolist()))
        object.__setattr__(self, "values", tuple(ys.tolist()))

    @cached_property
    def _interp(self) -> PchipInterpolator:
        return PchipInterpolator(np.asarray(self.points), np.asarray(self.values))

    @cached_property
    def _tail_rate(self) -> float:
        slope = float(self._interp.derivative()(self.points[-1]))
        rate = -slope / self.values[-1]
        return rate if rate > 0 else 1.0

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        last = self.points[-1]
        inside = self._interp(np.minimum(x, last))
        tail = self.values[-1] * np.exp(-self._tail_rate * (x - last))
        return np.where(x <= last, inside, tail)

    def knots(self) -> tuple[float, ...]:
        return self.points

    def to_dict(self) -> dict:
        return {"family": self.family, "points": list(self.points), "values": list(self.values)}


def utility_from_dict(spec: dict) -> Utility:
    family = spec.get("family")
    if family == "exponential":
        return ExponentialDiscount(spec["rate"])
    if family == "cara":
        return ConstantAbsolute(spec["coefficient"])
    if family == "crra":
        return ConstantRelative(spec["exponent"])
    if family == "tabulated":
        return TabulatedUtility(tuple(spec["points"]), tuple(spec["values"]))
    raise ArgumentError(f"unknown utility family {family!r}")


def utility_value(u: Utility, x) -> float:
    """``u(x)`` for a quality, or exactly 0 for :data:`NO_SERVICE`."""
    if x is NO_SERVICE:
        return 0.0
    x = float(x)
    if not math.isfinite(x) or x < 0:
        raise ArgumentError(f"quality must be a finite non-negative number, got {x!r}")
    return float(u(x))


# ---------------------------------------------------------------------------
# Supply
# ---------------------------------------------------------------------------


class Supply:
    """Strictly positive density on ``[0, upper]``."""

    kind: str = ""
    upper: float

    def density(self, x: ArrayLike) -> NDArray[np.float64]:
        raise NotImplementedError

    def cdf(self, x: ArrayLike) -> NDArray[np.float64]:
        raise NotImplementedError

    def _quantile(self, m: NDArray[np.float64]) -> NDArray[np.float64]:
        raise NotImplementedError

    def breakpoints(self) -> tuple[float, ...]:
        return (0.0, self.upper)

    @property
    def total(self) -> float:
        return float(self.cdf(self.upper))

    def quantile(self, m: ArrayLike) -> NDArray[np.float64]:
        m = np.asarray(m, dtype=float)
        total = self.total
        if np.any(~np.isfinite(m)) or np.any(m < -EPS_MASS):
            raise ArgumentError("mass must be finite and non-negative")
        if np.any(m > total * (1 + 1e-12) + 1e-12):
            raise ArgumentError(
                f"requested mass {float(np.max(m)):.12g} exceeds total supply {total:.12g}"
            )
        return self._quantile(np.clip(m, 0.0, total))

    def mass(self, a: float, b: float) -> float:
        if b <= a:
            return 0.0
        return float(self.cdf(b) - self.cdf(a))

    def to_dict(self) -> dict:
        raise NotImplementedError


def supply_cdf(s: Supply, x: float) -> float:
    return float(s.cdf(x))


def supply_quantile(s: Supply, m: float) -> float:
    return float(s.quantile(m))


@dataclass(frozen=True)
class UniformSupply(Supply):
    height: float
    upper: float
    kind: str = field(default="uniform", init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "height", _positive("height", self.height))
        object.__setattr__(self, "upper", _positive("upper", self.upper))

    def density(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        return np.where((x >= 0) & (x <= self.upper), self.height, 0.0)

    def cdf(self, x: ArrayLike) -> NDArray[np.float64]:
        return self.height * np.clip(np.asarray(x, dtype=float), 0.0, self.upper)

    def _quantile(self, m: NDArray[np.float64]) -> NDArray[np.float64]:
        return np.minimum(m / self.height, self.upper)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "height": self.height, "upper": self.upper}


@dataclass(frozen=True)
class PiecewiseLinearSupply(Supply):
    """Density interpolated linearly between knots; knots span ``[0, X]``."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    kind: str = field(default="piecewise_linear", init=False, repr=False)

    def __post_init__(self) -> None:
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 1 or xs.size < 2 or xs.shape != ys.shape:
            raise ArgumentError("piecewise-linear supply needs >= 2 matching knots")
        if xs[0] != 0.0 or np.any(np.diff(xs) <= 0):
            raise ArgumentError("knots must start at 0 and increase")
        if np.any(ys <= 0) or not np.all(np.isfinite(ys)):
            raise ArgumentError("density must be strictly positive at every knot")
        object.__setattr__(self, "xs", tuple(xs.tolist()))
        object.__setattr__(self, "ys", tuple(ys.tolist()))

    @property
    def upper(self) -> float:  # type: ignore[override]
        return self.xs[-1]

    @cached_property
    def _cum(self) -> NDArray[np.float64]:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        return np.concatenate([[0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs))])

    def breakpoints(self) -> tuple[float, ...]:
        return self.xs

    def density(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        inside = np.interp(x, self.xs, self.ys)
        return np.where((x >= 0) & (x <= self.upper), inside, 0.0)

    def cdf(self, x: ArrayLike) -> NDArray[np.float64]:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.upper)
        k = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 2)
        t = x - xs[k]
        slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
        return self._cum[k] + ys[k] * t + 0.5 * slope * t * t

    def _quantile(self, m: NDArray[np.float64]) -> NDArray[np.float64]:
        xs, ys = np.asarray(self.xs), np.asarray(self.ys)
        k = np.clip(np.searchsorted(self._cum, m, side="right") - 1, 0, xs.size - 2)
        r = m - self._cum[k]
        slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
        # Solve ys[k] t + slope t^2 / 2 = r with the numerically stable root.
        disc = np.maximum(ys[k] ** 2 + 2.0 * slope * r, 0.0)
        t = 2.0 * r / (ys[k] + np.sqrt(disc))
        return np.minimum(xs[k] + t, self.upper)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "xs": list(self.xs), "ys": list(self.ys)}


@dataclass(frozen=True, eq=False)
class TabulatedSupply(Supply):
    """Density given by samples with monotone (PCHIP) interpolation."""

    xs: tuple[float, ...]
    ys: tuple[float, ...]
    kind: str = field(default="tabulated", init=False, repr=False)

    def __post_init__(self) -> None:
        xs = np.asarray(self.xs, dtype=float)
        ys = np.asarray(self.ys, dtype=float)
        if xs.ndim != 1 or xs.size < 3 or xs.shape != ys.shape:
            raise ArgumentError("tabulated supply needs >= 3 matching samples")
        if xs[0] != 0.0 or np.any(np.diff(xs) <= 0):
            raise ArgumentError("sample points must start at 0 and increase")
        if np.any(ys <= 0):
            raise ArgumentError("density samples must be strictly positive")
        object.__setattr__(self, "xs", tuple(xs.tolist()))
        object.__setattr__(self, "ys", tuple(ys.tolist()))

    @property
    def upper(self) -> float:  # type: ignore[override]
        return self.xs[-1]

    @cached_property
    def _interp(self) -> PchipInterpolator:
        return PchipInterpolator(np.asarray(self.xs), np.asarray(self.ys))

    @cached_property
    def _antider(self):
        return self._interp.antiderivative()

    def breakpoints(self) -> tuple[float, ...]:
        return self.xs

    def density(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.asarray(x, dtype=float)
        inside = self._interp(np.clip(x, 0.0, self.upper))
        return np.where((x >= 0) & (x <= self.upper), inside, 0.0)

    def cdf(self, x: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(self._antider(np.clip(np.asarray(x, dtype=float), 0.0, self.upper)))

    def _quantile(self, m: NDArray[np.float64]) -> NDArray[np.float64]:
        # Safeguarded Newton from a bracketing table; F is strictly increasing.
        grid = np.linspace(0.0, self.upper, 513)
        cum = self.cdf(grid)
        k = np.clip(np.searchsorted(cum, m, side="right") - 1, 0, grid.size - 2)
        lo, hi = grid[k], grid[k + 1]
        x = lo + (m - cum[k]) / np.maximum(cum[k + 1] - cum[k], 1e-300) * (hi - lo)
        for _ in range(60):
            resid = self.cdf(x) - m
            lo = np.where(resid < 0, x, lo)
            hi = np.where(resid > 0, x, hi)
            step = x - resid / self.density(x)
            bad = (step <= lo) | (step >= hi)
            x_new = np.where(bad, 0.5 * (lo + hi), step)
            if np.all(np.abs(x_new - x) < 1e-14 * max(1.0, self.upper)):
                x = x_new
                break
            x = x_new
        return x

    def to_dict(self) -> dict:
        return {"kind": self.kind, "xs": list(self.xs), "ys": list(self.ys)}


def supply_from_dict(spec: dict) -> Supply:
    kind = spec.get("kind")
    if kind == "uniform":
        return UniformSupply(spec["height"], spec["upper"])
    if kind == "piecewise_linear":
        return PiecewiseLinearSupply(tuple(spec["xs"]), tuple(spec["ys"]))
    if kind == "tabulated":
        return TabulatedSupply(tuple(spec["xs"]), tuple(spec["ys"]))
    raise ArgumentError(f"unknown supply kind {kind!r}")


# ---------------------------------------------------------------------------
# Fast interval integrals of u * f
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


class PayoffIntegral:
    """Cumulative integral ``x -> ∫_0^x u(t) f(t) dt`` for one utility/supply pair.

    Exponential-family utilities on uniform supply use the closed form;
    everything else uses a Gauss-Legendre panel table whose panel edges include
    every kink of ``u`` and ``f``, which keeps the error near machine precision.
    """

    def __init__(self, u: Utility, supply: Supply, panels: int = 1024):
        self.u = u
        self.supply = supply
        self._closed = isinstance(supply, UniformSupply) and isinstance(
            u, (ExponentialDiscount, ConstantAbsolute)
        )
        if self._closed:
            return
        upper = supply.upper
        kinks = [k for k in (*supply.breakpoints(), *u.knots()) if 0 < k < upper]
        edges = np.unique(np.concatenate([np.linspace(0.0, upper, panels + 1), kinks]))
        self._edges = edges
        self._cum = np.concatenate([[0.0], np.cumsum(self._panel(edges[:-1], edges[1:]))])

    def _panel(self, a: NDArray[np.float64], b: NDArray[np.float64]) -> NDArray[np.float64]:
        half = 0.5 * (b - a)
        mid = 0.5 * (b + a)
        t = mid[..., None] + half[..., None] * _GL_NODES
        vals = self.u(t) * self.supply.density(t)
        return half * (vals @ _GL_WEIGHTS)

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        x = np.clip(np.asarray(x, dtype=float), 0.0, self.supply.upper)
        if self._closed:
            r = self.u.rate  # type: ignore[attr-defined]
            return self.supply.height * (-np.expm1(-r * x)) / r  # type: ignore[attr-defined]
        k = np.clip(np.searchsorted(self._edges, x, side="right") - 1, 0, self._edges.size - 2)
        return self._cum[k] + self._panel(self._edges[k], x)

    def between(self, a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
        return self(b) - self(a)


# ---------------------------------------------------------------------------
# Lotteries and allocations
# ---------------------------------------------------------------------------


def _normalize_segments(segments: Iterable[Sequence[float]]) -> tuple[Interval, ...]:
    segs = sorted((float(a), float(b)) for a, b in segments if b - a > EPS_X)
    merged: list[Interval] = []
    for a, b in segs:
        if merged and a < merged[-1][1] - EPS_X:
            raise ArgumentError(f"segments overlap near {a:.12g}")
        if merged and a <= merged[-1][1] + EPS_X:
            merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
        else:
            merged.append((a, b))
    return tuple(merged)


@dataclass(frozen=True)
class Lottery:
    """Density ``scale * f`` on ``segments`` plus probability ``atom`` at no-service."""

    segments: tuple[Interval, ...]
    scale: float
    atom: float = 0.0

    @classmethod
    def restriction(
        cls, supply: Supply, segments: Iterable[Sequence[float]], weight: float = 1.0
    ) -> "Lottery":
        """``weight * f|segments + (1 - weight) * no-service``."""
        segs = _normalize_segments(segments)
        if weight < -EPS_MASS or weight > 1 + EPS_MASS:
            raise ArgumentError(f"weight must lie in [0, 1], got {weight}")
        weight = min(max(weight, 0.0), 1.0)
        if weight == 0.0 or not segs:
            if weight > EPS_MASS:
                raise ArgumentError("positive weight on an empty set of segments")
            return cls((), 0.0, 1.0)
        mass = sum(supply.mass(a, b) for a, b in segs)
        if mass <= 0:
            raise ArgumentError("segments carry no supply mass")
        return cls(segs, weight / mass, 1.0 - weight)

    @classmethod
    def no_service(cls) -> "Lottery":
        return cls((), 0.0, 1.0)

    def mass_on(self, supply: Supply, a: float, b: float) -> float:
        """Probability the lottery assigns to qualities in ``[a, b]``."""
        total = 0.0
        for s, t in self.segments:
            lo, hi = max(s, a), min(t, b)
            if hi > lo:
                total += supply.mass(lo, hi)
        return self.scale * total

    def total_mass(self, supply: Supply) -> float:
        return self.scale * sum(supply.mass(a, b) for a, b in self.segments) + self.atom

    def support_bounds(self) -> Interval | None:
        if not self.segments:
            return None
        return (self.segments[0][0], self.segments[-1][1])

    def check(self, supply: Supply, tol: float = 1e-9) -> None:
        prev = -math.inf
        for a, b in self.segments:
            if not (0 <= a < b <= supply.upper + EPS_X) or a < prev:
                raise InvariantError(f"bad segment layout {self.segments}")
            prev = b
        if self.scale < 0 or not (-tol <= self.atom <= 1 + tol):
            raise InvariantError("negative scale or atom outside [0, 1]")
        total = self.total_mass(supply)
        if abs(total - 1.0) > tol:
            raise InvariantError(f"lottery mass {total:.12g} differs from 1")


@dataclass(frozen=True)
class Allocation:
    """One lottery per type, with the population mass of each type."""

    lotteries: tuple[Lottery, ...]
    masses: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lotteries) != len(self.masses):
            raise ArgumentError("one mass per lottery is required")

    @property
    def n_types(self) -> int:
        return len(self.lotteries)

    def cut_points(self) -> list[float]:
        pts = {0.0}
        for q in self.lotteries:
            for a, b in q.segments:
                pts.update((a, b))
        return sorted(pts)

    def load(self, x: float) -> float:
        """``Σ μ_i c_i 1[x in supp q_i]``: the share of ``f(x)`` consumed at ``x``."""
        total = 0.0
        for mu, q in zip(self.masses, self.lotteries):
            if any(a <= x < b for a, b in q.segments):
                total += mu * q.scale
        return total

    def feasibility_residual(self, supply: Supply) -> float:
        """Minimum over qualities of ``f - Σ μ_i q_i``, relative to ``f``."""
        pts = self.cut_points() + [supply.upper]
        worst = 1.0
        for a, b in zip(pts[:-1], pts[1:]):
            if b > a:
                worst = min(worst, 1.0 - self.load(0.5 * (a + b)))
        return worst

    def residual_mass(self, supply: Supply, a: float, b: float) -> float:
        """Unassigned supply mass on ``[a, b]``."""
        used = sum(mu * q.mass_on(supply, a, b) for mu, q in zip(self.masses, self.lotteries))
        return supply.mass(a, b) - used

    def check(self, supply: Supply) -> None:
        for q in self.lotteries:
            q.check(supply, tol=EPS_MASS)
        if self.feasibility_residual(supply) < -EPS_MASS:
            raise InvariantError("allocation over-uses supply")


# ---------------------------------------------------------------------------
# Economy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentType:
    utility: Utility
    mass: float
    weight: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "mass", _positive("mass", self.mass))
        object.__setattr__(self, "weight", _positive("weight", self.weight))


@dataclass(frozen=True, eq=False)
class Economy:
    """Types ordered from most to least risk-averse, plus the supply."""

    types: tuple[AgentType, ...]
    supply: Supply

    def __post_init__(self) -> None:
        if not self.types:
            raise ArgumentError("an economy needs at least one type")
        if self.total_mass > self.supply.total * (1 + 1e-12):
            raise ArgumentError(
                f"total type mass {self.total_mass:.6g} exceeds supply {self.supply.total:.6g}"
            )

    @classmethod
    def two_type(
        cls,
        u_p: Utility,
        u_i: Utility,
        alpha: float = 0.5,
        mu_p: float = 0.5,
        mu_i: float = 0.5,
        supply: Supply | None = None,
    ) -> "Economy":
        if not 0 < alpha < 1:
            raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")
        supply = supply or UniformSupply(0.3, 5.0)
        return cls((AgentType(u_p, mu_p, alpha), AgentType(u_i, mu_i, 1 - alpha)), supply)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def utilities(self) -> tuple[Utility, ...]:
        return tuple(t.utility for t in self.types)

    @property
    def masses(self) -> NDArray[np.float64]:
        return np.array([t.mass for t in self.types])

    @property
    def weights(self) -> NDArray[np.float64]:
        return np.array([t.weight for t in self.types])

    @property
    def total_mass(self) -> float:
        return float(sum(t.mass for t in self.types))

    @property
    def x_bar(self) -> float:
        return supply_quantile(self.supply, self.total_mass)

    @property
    def alpha(self) -> float:
        """Normalized weight of the first type (the scalar weight of a 2-type economy)."""
        w = self.weights
        return float(w[0] / w.sum())

    @cached_property
    def payoff(self) -> tuple[PayoffIntegral, ...]:
        return tuple(PayoffIntegral(t.utility, self.supply) for t in self.types)

    def replace(
        self,
        masses: Sequence[float] | None = None,
        weights: Sequence[float] | None = None,
        utilities: Sequence[Utility] | None = None,
    ) -> "Economy":
        masses = self.masses if masses is None else masses
        weights = self.weights if weights is None else weights
        utilities = self.utilities if utilities is None else utilities
        types = tuple(AgentType(u, m, w) for u, m, w in zip(utilities, masses, weights))
        return Economy(types, self.supply)

    def with_alpha(self, alpha: float) -> "Economy":
        self.require_two_types()
        return self.replace(weights=(alpha, 1.0 - alpha))

    def require_two_types(self) -> None:
        if self.n_types != 2:
            raise ArgumentError(f"operation needs a 2-type economy, got N={self.n_types}")

    def to_dict(self) -> dict:
        return {
            "types": [
                {"utility": t.utility.to_dict(), "mass": t.mass, "weight": t.weight}
                for t in self.types
            ],
            "supply": self.supply.to_dict(),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "Economy":
        types = tuple(
            AgentType(utility_from_dict(t["utility"]), t["mass"], t["weight"])
            for t in spec["types"]
        )
        return cls(types, supply_from_dict(spec["supply"]))


def canonical_economy(r_p: float = 0.1, r_i: float = 2.0, alpha: float = 0.5) -> Economy:
    """Equal masses 1/2, uniform supply of total mass 3/2 on [0, 5]."""
    return Economy.two_type(ExponentialDiscount(r_p), ExponentialDiscount(r_i), alpha)


def exponential_economy(
    rates: Sequence[float],
    masses: Sequence[float] | None = None,
    weights: Sequence[float] | None = None,
    supply: Supply | None = None,
) -> Economy:
    n = len(rates)
    masses = [1.0 / n] * n if masses is None else masses
    weights = [1.0] * n if weights is None else weights
    supply = supply or UniformSupply(0.3, 5.0)
    types = tuple(
        AgentType(ExponentialDiscount(r), m, w) for r, m, w in zip(rates, masses, weights)
    )
    return Economy(types, supply)


# ---------------------------------------------------------------------------
# Payoffs and welfare
# ---------------------------------------------------------------------------


def _quad_segment(u: Utility, supply: Supply, a: float, b: float) -> float:
    inner = [p for p in (*supply.breakpoints(), *u.knots()) if a < p < b]
    value, _ = integrate.quad(
        lambda t: float(u(t) * supply.density(t)),
        a,
        b,
        epsabs=QUAD_TOL * 1e-2,
        epsrel=1e-12,
        limit=200,
        points=inner or None,
    )
    return value


def expected_utility(q: Lottery, u: Utility, supply: Supply) -> float:
    """Expected utility by adaptive quadrature; the atom contributes nothing."""
    return q.scale * sum(_quad_segment(u, supply, a, b) for a, b in q.segments)


def fast_expected_utility(q: Lottery, table: PayoffIntegral) -> float:
    """Same as :func:`expected_utility` using a precomputed cumulative integral."""
    if not q.segments:
        return 0.0
    a = np.array([s[0] for s in q.segments])
    b = np.array([s[1] for s in q.segments])
    return float(q.scale * np.sum(table.between(a, b)))


def payoff_matrix(a: Allocation, e: Economy) -> NDArray[np.float64]:
    """``V[k, j] = V_k(q_j)``.  Identical lotteries yield bit-identical columns."""
    n = e.n_types
    values = np.empty((n, n))
    cache: dict[int, NDArray[np.float64]] = {}
    for j, q in enumerate(a.lotteries):
        key = id(q)
        if key not in cache:
            cache[key] = np.array([fast_expected_utility(q, e.payoff[k]) for k in range(n)])
        values[:, j] = cache[key]
    return values


def welfare(a: Allocation, e: Economy) -> float:
    """``Σ α_i μ_i V_i(q_i)``."""
    if a.n_types != e.n_types:
        raise ArgumentError(f"allocation has {a.n_types} types, economy has {e.n_types}")
    return float(
        sum(
            t.weight * t.mass * expected_utility(q, t.utility, e.supply)
            for t, q in zip(e.types, a.lotteries)
        )
    )


def fast_welfare(a: Allocation, e: Economy) -> float:
    return float(
        sum(
            t.weight * t.mass * fast_expected_utility(q, e.payoff[k])
            for k, (t, q) in enumerate(zip(e.types, a.lotteries))
        )
    )


def pooling_allocation(e: Economy) -> Allocation:
    q = Lottery.restriction(e.supply, [(0.0, e.x_bar)])
    return Allocation(tuple(q for _ in e.types), tuple(e.masses.tolist()))


# ---------------------------------------------------------------------------
# Risk-aversion ordering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AraViolation:
    pair: tuple[int, int]
    x: float
    ara_left: float
    ara_right: float


@dataclass(frozen=True)
class AraReport:
    violations: tuple[AraViolation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def _ara(u: Utility, x: NDArray[np.float64], h: float) -> NDArray[np.float64]:
    up, mid, dn = u(x + h), u(x), u(x - h)
    d1 = (up - dn) / (2 * h)
    d2 = (up - 2 * mid + dn) / (h * h)
    return d2 / d1


def validate_ara_order(e: Economy, grid_n: int = 200) -> AraReport:
    """Check ``u_i''/u_i' > u_{i+1}''/u_{i+1}'`` for adjacent types on a grid."""
    if grid_n < 16:
        raise ArgumentError("grid_n must be at least 16")
    upper = e.supply.upper
    h = 1e-4 * upper
    xs = np.linspace(h, upper, grid_n)
    aras = []
    for k, u in enumerate(e.utilities):
        with np.errstate(all="ignore"):
            r = _ara(u, xs, h)
        bad = ~np.isfinite(r)
        if np.any(bad):
            raise NumericalError(
                f"non-finite risk-aversion estimate for type {k} at x={xs[np.argmax(bad)]:.6g}"
            )
        aras.append(r)
    found = []
    for k in range(e.n_types - 1):
        left, right = aras[k], aras[k + 1]
        for idx in np.flatnonzero(~(left > right)):
            found.append(AraViolation((k, k + 1), float(xs[idx]), float(left[idx]), float(right[idx])))
    return AraReport(tuple(found))


# ---------------------------------------------------------------------------
# Structural detectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpreadWitness:
    """``A ◁ B ◁ C`` with ``A``/``C`` held by the more risk-averse type."""

    a: Interval
    b: Interval
    c: Interval
    c_includes_no_service: bool


@dataclass(frozen=True)
class DisposalWitness:
    """Unused supply on ``a`` while the type consumes ``b`` (``None`` means no-service)."""

    a: Interval
    b: Interval | None


def _refined_cuts(a: Allocation, upper: float) -> list[float]:
    pts = sorted(set(a.cut_points()) | {upper})
    out: list[float] = []
    for s, t in zip(pts[:-1], pts[1:]):
        out.extend([s, s + (t - s) / 3, s + 2 * (t - s) / 3])
    out.append(pts[-1])
    return out


def detect_inverted_spread(
    a: Allocation, i: int, j: int, supply: Supply, eps: float = EPS_MASS
) -> SpreadWitness | None:
    """Search for ``A ◁ B ◁ C`` with ``q_i(A), q_j(B), q_i(C) > eps``.  Requires ``i < j``."""
    if not 0 <= i < j < a.n_types:
        raise ArgumentError(f"need 0 <= i < j < N, got i={i}, j={j}")
    qi, qj = a.lotteries[i], a.lotteries[j]
    upper = supply.upper
    cuts = _refined_cuts(a, upper)
    left = [qi.mass_on(supply, 0.0, s) for s in cuts]
    right = [qi.mass_on(supply, s, upper) + qi.atom for s in cuts]
    for p, s in enumerate(cuts):
        if left[p] <= eps:
            continue
        for r in range(p + 1, len(cuts)):
            t = cuts[r]
            if right[r] <= eps:
                break
            if qj.mass_on(supply, s, t) > eps:
                return SpreadWitness((0.0, s), (s, t), (t, upper), qi.atom > eps)
    return None


def detect_disposal(
    a: Allocation, k: int, supply: Supply, eps: float = EPS_MASS
) -> DisposalWitness | None:
    """Search for unused supply strictly better than something type ``k`` consumes."""
    q = a.lotteries[k]
    upper = supply.upper
    for t in _refined_cuts(a, upper):
        if a.residual_mass(supply, 0.0, t) <= eps:
            continue
        if q.mass_on(supply, t, upper) > eps:
            return DisposalWitness((0.0, t), (t, upper))
        if q.atom > eps:
            return DisposalWitness((0.0, t), None)
    return None


@dataclass(frozen=True)
class ICMatrix:
    """``values[k, j] = V_k(q_j)``; ``slack[k, j] = V_k(q_k) - V_k(q_j)``."""

    values: NDArray[np.float64]
    slack: NDArray[np.float64]
    eps: float

    @property
    def binding(self) -> NDArray[np.bool_]:
        b = np.abs(self.slack) <= self.eps
        np.fill_diagonal(b, False)
        return b

    @property
    def feasible(self) -> bool:
        off = ~np.eye(self.slack.shape[0], dtype=bool)
        return bool(np.all(self.slack[off] >= -self.eps))

    def violations(self) -> list[tuple[int, int, float]]:
        n = self.slack.shape[0]
        return [
            (k, j, float(self.slack[k, j]))
            for k in range(n)
            for j in range(n)
            if k != j and self.slack[k, j] < -self.eps
        ]


def ic_matrix(a: Allocation, e: Economy, eps: float = EPS_IC) -> ICMatrix:
    values = payoff_matrix(a, e)
    slack = np.diag(values)[:, None] - values
    return ICMatrix(values, slack, eps)


# ---------------------------------------------------------------------------
# Indifference mixtures
# ---------------------------------------------------------------------------


def _set_value(u: Utility, supply: Supply, segs: Sequence[Interval]) -> float:
    segs = _normalize_segments(segs)
    mass = sum(supply.mass(a, b) for a, b in segs)
    if mass <= 0:
        raise ArgumentError("interval set carries no supply mass")
    return sum(_quad_segment(u, supply, a, b) for a, b in segs) / mass


def indifference_mix(
    u: Utility,
    a: Sequence[Interval],
    b: Sequence[Interval],
    c: Sequence[Interval],
    supply: Supply,
) -> float:
    """``γ`` with ``V(γ f|A + (1-γ) f|C) = V(f|B)`` for ``A ◁ B ◁ C``.

    Expected utility is linear in the mixing weight, so the root is the exact
    ratio of value differences; no iteration is needed.
    """
    sets = [_normalize_segments(s) for s in (a, b, c)]
    for name, s in zip("ABC", sets):
        if not s:
            raise ArgumentError(f"set {name} is empty")
    if sets[0][-1][1] > sets[1][0][0] + EPS_X or sets[1][-1][1] > sets[2][0][0] + EPS_X:
        raise ArgumentError("sets must satisfy A ◁ B ◁ C")
    va, vb, vc = (_set_value(u, supply, s) for s in sets)
    if not va > vb > vc:
        raise NumericalError("values do not separate; sets too close for this utility")
    return (vb - vc) / (va - vc)

