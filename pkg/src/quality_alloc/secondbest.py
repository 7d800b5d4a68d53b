"""Incentive-compatible (second-best) allocations for two types.

Every candidate optimum has the form

    q_P = f|[x1, x2]
    q_I = (1 - β) f|[0, x1] ∪ [x2, x3] + β δ_no-service

with ``x2`` fixed by P's mass and ``x3 = F⁻¹(μ_P + (1-β) μ_I)`` fixed by ``β``
alone.  Three facts make the search exact rather than heuristic:

* the welfare derivative in ``x1`` is ``f(x1) (g(x2) - g(x1))``, which does not
  involve ``β`` and changes sign once, at the first-best threshold;
* I's slack is increasing and P's slack is decreasing in ``x1``, so for each
  ``β`` the incentive-compatible ``x1`` form an interval;
* hence the best ``x1`` for a given ``β`` is the first-best threshold clipped to
  that interval, and only a one-dimensional search over ``β`` remains.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq, minimize_scalar

from .firstbest import FirstBestReport, classify_first_best
from .model import (
    EPS_IC,
    EPS_MASS,
    EPS_X,
    Allocation,
    ArgumentError,
    Economy,
    InfeasibleError,
    InvariantError,
    Lottery,
    NumericalError,
)

FIRST_BEST = "FirstBestAchieved"
IC_IP_BINDS = "ICIPBinds"
IC_PI_BINDS = "ICPIBindsNoDisposal"
DISPOSAL = "Disposal"
FULL_DISPOSAL = "FullDisposal"
REGIONS = (FIRST_BEST, IC_IP_BINDS, IC_PI_BINDS, DISPOSAL, FULL_DISPOSAL)

BETA_TOL = 1e-7
GRID_X1 = 400
GRID_BETA = 200


class DegenerateEconomyError(ArgumentError):
    """The two types value every quality identically, so screening is vacuous."""


class _TwoType:
    """Vectorized payoffs of the structured candidates of one economy."""

    def __init__(self, e: Economy):
        e.require_two_types()
        xs = np.linspace(0.0, e.x_bar, 257)
        u_p, u_i = e.utilities
        if np.max(np.abs(u_p(xs) - u_i(xs))) <= 1e-12:
            raise DegenerateEconomyError("both types have the same utility function")
        self.e = e
        self.s = e.supply
        self.mu_p, self.mu_i = (float(m) for m in e.masses)
        self.alpha = e.alpha
        self.w_p, self.w_i = (float(w) for w in e.weights)
        self.tp, self.ti = e.payoff

    def x2(self, x1):
        return self.s.quantile(np.minimum(self.s.cdf(x1) + self.mu_p, self.s.total))

    def x3(self, beta):
        return self.s.quantile(self.mu_p + (1.0 - np.asarray(beta, dtype=float)) * self.mu_i)

    def x1_max(self, beta):
        return self.s.quantile((1.0 - np.asarray(beta, dtype=float)) * self.mu_i)

    def evaluate(self, x1, beta) -> tuple[NDArray, NDArray, NDArray]:
        """Welfare, I's slack and P's slack."""
        x1 = np.asarray(x1, dtype=float)
        x2, x3 = self.x2(x1), self.x3(beta)
        ip_lo, ip_hi = self.tp(x1), self.tp(x2)
        ii_lo, ii_hi = self.ti(x1), self.ti(x2)
        ip3, ii3 = self.tp(x3), self.ti(x3)
        i_own = (ii_lo + ii3 - ii_hi) / self.mu_i
        i_other = (ii_hi - ii_lo) / self.mu_p
        p_own = (ip_hi - ip_lo) / self.mu_p
        p_other = (ip_lo + ip3 - ip_hi) / self.mu_i
        w = self.w_p * self.mu_p * p_own + self.w_i * self.mu_i * i_own
        return w, i_own - i_other, p_own - p_other

    def slack_ip(self, x1, beta):
        return self.evaluate(x1, beta)[1]

    def slack_pi(self, x1, beta):
        return self.evaluate(x1, beta)[2]

    def ic_interval(self, beta: float) -> tuple[float, float] | None:
        """Incentive-compatible ``x1`` for one ``β``; None when empty."""
        top = float(self.x1_max(beta))
        lo_val, hi_val = float(self.slack_ip(0.0, beta)), float(self.slack_ip(top, beta))
        if hi_val < 0:
            return None
        lo = 0.0 if lo_val >= 0 else brentq(
            lambda x: float(self.slack_ip(x, beta)), 0.0, top, xtol=1e-15, maxiter=300
        )
        p0, p_top = float(self.slack_pi(0.0, beta)), float(self.slack_pi(top, beta))
        if p0 < 0:
            return None
        hi = top if p_top >= 0 else brentq(
            lambda x: float(self.slack_pi(x, beta)), 0.0, top, xtol=1e-15, maxiter=300
        )
        return (lo, hi) if lo <= hi else None

    def ic_interval_grid(self, betas: NDArray[np.float64], iters: int = 64):
        """Vectorized bisection version of :meth:`ic_interval`; NaN marks empty sets."""
        top = self.x1_max(betas)
        zero = np.zeros_like(betas)
        s_ip0, s_ip1 = self.slack_ip(zero, betas), self.slack_ip(top, betas)
        s_pi0, s_pi1 = self.slack_pi(zero, betas), self.slack_pi(top, betas)

        def bisect(fun, increasing: bool):
            a, b = zero.copy(), top.copy()
            for _ in range(iters):
                m = 0.5 * (a + b)
                val = fun(m, betas)
                right = val < 0 if increasing else val >= 0
                a = np.where(right, m, a)
                b = np.where(right, b, m)
            return 0.5 * (a + b)

        lo = np.where(s_ip0 >= 0, 0.0, bisect(self.slack_ip, True))
        hi = np.where(s_pi1 >= 0, top, bisect(self.slack_pi, False))
        empty = (s_ip1 < 0) | (s_pi0 < 0) | (lo > hi)
        return np.where(empty, np.nan, lo), np.where(empty, np.nan, hi)

    def allocation(self, x1: float, beta: float) -> Allocation:
        s = self.s
        x2, x3 = float(self.x2(x1)), float(self.x3(beta))
        q_p = Lottery.restriction(s, [(x1, x2)])
        q_i = Lottery.restriction(s, [(0.0, x1), (x2, x3)], weight=1.0 - beta)
        return Allocation((q_p, q_i), (self.mu_p, self.mu_i))

    def pooling_values(self) -> tuple[float, float]:
        x_bar = self.e.x_bar
        total = self.mu_p + self.mu_i
        return float(self.tp(x_bar)) / total, float(self.ti(x_bar)) / total


@dataclass(frozen=True)
class Candidate:
    x1: float
    x2: float
    x3: float
    beta: float
    allocation: Allocation
    welfare: float
    s_ip: float
    s_pi: float


def evaluate_candidate(e: Economy, x1: float, beta: float) -> Candidate:
    tt = _TwoType(e)
    s = e.supply
    if not 0.0 <= beta < 1.0:
        raise ArgumentError(f"beta must lie in [0, 1), got {beta}")
    if x1 < 0:
        raise ArgumentError(f"x1 must be non-negative, got {x1}")
    if float(s.cdf(x1)) > (1.0 - beta) * tt.mu_i + EPS_MASS:
        raise InfeasibleError(
            f"I's top block [0, {x1:.6g}] exceeds the served I mass {(1 - beta) * tt.mu_i:.6g}"
        )
    if float(s.cdf(x1)) + tt.mu_p > s.total + EPS_MASS:
        raise InfeasibleError("P's block runs past the top of the supply")
    x1 = min(x1, float(tt.x1_max(beta)))
    w, s_ip, s_pi = tt.evaluate(x1, beta)
    return Candidate(
        x1, float(tt.x2(x1)), float(tt.x3(beta)), beta, tt.allocation(x1, beta),
        float(w), float(s_ip), float(s_pi),
    )


@dataclass(frozen=True)
class SecondBestReport:
    x1: float
    x2: float
    x3: float
    beta: float
    allocation: Allocation
    welfare: float
    s_ip: float
    s_pi: float
    region: str
    delta_pooling: tuple[float, float]
    diagnostics: dict = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "x1": self.x1,
            "x2": self.x2,
            "x3": self.x3,
            "beta": self.beta,
            "welfare": self.welfare,
            "s_IP": self.s_ip,
            "s_PI": self.s_pi,
            "region": self.region,
            "delta_V_P": self.delta_pooling[0],
            "delta_V_I": self.delta_pooling[1],
            "diagnostics": dict(self.diagnostics),
        }


def _first_best_x1(fb: FirstBestReport) -> float:
    # x1 is where the welfare derivative in x1 changes sign in every structure.
    return fb.x1


def _best_for_beta(tt: _TwoType, beta: float, x1_fb: float) -> tuple[float, float] | None:
    iv = tt.ic_interval(beta)
    if iv is None:
        return None
    x1 = min(max(x1_fb, iv[0]), iv[1])
    return x1, float(tt.evaluate(x1, beta)[0])


def _coarse_grid(tt: _TwoType, n_x1: int, n_beta: int) -> tuple[float, float, float]:
    """Brute-force feasible maximum over a rectangular ``(x1, β)`` grid."""
    betas = np.linspace(0.0, 1.0, n_beta, endpoint=False)
    frac = np.linspace(0.0, 1.0, n_x1)
    x1 = frac[:, None] * tt.x1_max(betas)[None, :]
    b = np.broadcast_to(betas, x1.shape)
    w, s_ip, s_pi = tt.evaluate(x1, b)
    w = np.where((s_ip >= -1e-12) & (s_pi >= -1e-12), w, -np.inf)
    k = np.unravel_index(np.argmax(w), w.shape)
    return float(w[k]), float(x1[k]), float(betas[k[1]])


def _search(tt: _TwoType, x1_fb: float, allow_disposal: bool, n_beta: int) -> tuple[float, float]:
    zero = _best_for_beta(tt, 0.0, x1_fb)
    if zero is None:
        raise InvariantError("no incentive-compatible candidate without disposal")
    best = (zero[1], zero[0], 0.0)
    if not allow_disposal:
        return best[1], best[2]
    betas = np.linspace(0.0, 1.0, n_beta, endpoint=False)
    lo, hi = tt.ic_interval_grid(betas)
    ok = ~np.isnan(lo)
    x1 = np.where(ok, np.clip(x1_fb, np.nan_to_num(lo), np.nan_to_num(hi)), 0.0)
    w = np.where(ok, tt.evaluate(x1, betas)[0], -np.inf)
    j = int(np.argmax(w))
    a, b = betas[max(j - 1, 0)], betas[min(j + 1, n_beta - 1)]

    def neg(beta: float) -> float:
        got = _best_for_beta(tt, beta, x1_fb)
        return np.inf if got is None else -got[1]

    if b > a:
        res = minimize_scalar(neg, bounds=(a, b), method="bounded", options={"xatol": 1e-13})
        for beta in (float(res.x), float(betas[j])):
            got = _best_for_beta(tt, beta, x1_fb)
            if got is not None and got[1] > best[0]:
                best = (got[1], got[0], beta)
    return best[1], best[2]


def _report(tt: _TwoType, fb: FirstBestReport, x1: float, beta: float, diagnostics: dict
            ) -> SecondBestReport:
    # A vanishing disposal probability is the no-disposal solution.
    if beta <= BETA_TOL:
        beta = 0.0
    w, s_ip, s_pi = (float(v) for v in tt.evaluate(x1, beta))
    pool_p, pool_i = tt.pooling_values()
    x2 = float(tt.x2(x1))
    p_own = float(tt.tp(x2) - tt.tp(x1)) / tt.mu_p
    i_own = s_ip + float(tt.ti(x2) - tt.ti(x1)) / tt.mu_p
    alpha = tt.alpha
    if alpha < 0.01 or alpha > 0.99:
        diagnostics = {**diagnostics, "reduced_precision": True}
    rep = SecondBestReport(
        x1=x1,
        x2=x2,
        x3=float(tt.x3(beta)),
        beta=beta,
        allocation=tt.allocation(x1, beta),
        welfare=w,
        s_ip=s_ip,
        s_pi=s_pi,
        region="",
        delta_pooling=(p_own - pool_p, i_own - pool_i),
        diagnostics=diagnostics,
    )
    rep = replace(rep, region=classify_region(rep, fb))
    welfare_vs_pooling(tt.e, rep)
    return rep


def solve_second_best(
    e: Economy,
    n_beta: int = GRID_BETA,
    coarse: tuple[int, int] | None = (GRID_X1, GRID_BETA),
) -> SecondBestReport:
    """Welfare maximum over incentive-compatible ``(x1, β)``.

    ``coarse`` sets the size of an independent brute-force grid whose best
    feasible point must not beat the structured optimum.
    """
    tt = _TwoType(e)
    fb = classify_first_best(e)
    x1, beta = _search(tt, _first_best_x1(fb), True, n_beta)
    diagnostics: dict = {"method": "clipped first-best threshold + bounded search over beta"}
    if coarse is not None:
        w_grid, gx1, gbeta = _coarse_grid(tt, *coarse)
        w_opt = float(tt.evaluate(x1, beta)[0])
        diagnostics["grid_welfare"] = w_grid
        if w_grid > w_opt + 1e-9 * max(1.0, abs(w_opt)):
            raise NumericalError(
                f"grid point (x1={gx1:.6g}, beta={gbeta:.6g}) beats the structured optimum "
                f"({w_grid:.12g} > {w_opt:.12g})"
            )
    return _report(tt, fb, x1, beta, diagnostics)


def solve_second_best_no_disposal(e: Economy) -> SecondBestReport:
    tt = _TwoType(e)
    fb = classify_first_best(e)
    x1, beta = _search(tt, _first_best_x1(fb), False, 1)
    return _report(tt, fb, x1, beta, {"method": "clipped first-best threshold, beta = 0"})


def classify_region(r: SecondBestReport, fb: FirstBestReport, eps: float = EPS_IC) -> str:
    ip_binds, pi_binds = r.s_ip <= eps, r.s_pi <= eps
    if ip_binds and pi_binds:
        raise InvariantError(
            f"both incentive constraints bind (s_IP={r.s_ip:.3g}, s_PI={r.s_pi:.3g})"
        )
    if not (ip_binds or pi_binds):
        if abs(r.x1 - fb.x1) > 1e-5 or r.beta > BETA_TOL:
            raise InvariantError("slack constraints but the solution differs from the first-best")
        return FIRST_BEST
    if ip_binds:
        return IC_IP_BINDS
    if r.x3 <= r.x2 + EPS_X and r.beta > BETA_TOL:
        return FULL_DISPOSAL
    if r.beta <= BETA_TOL:
        return IC_PI_BINDS
    return DISPOSAL


def welfare_vs_pooling(e: Economy, r: SecondBestReport, eps: float = EPS_IC
                       ) -> tuple[float, float]:
    """``(V_P(q_P) - V_P(pool), V_I(q_I) - V_I(pool))``, checked against the region."""
    d_p, d_i = r.delta_pooling
    expected = {
        FIRST_BEST: (d_p > eps and d_i > eps),
        IC_IP_BINDS: (d_p > eps and abs(d_i) <= eps),
        IC_PI_BINDS: (abs(d_p) <= eps and d_i > eps),
        DISPOSAL: (d_p < -eps and d_i > eps),
        FULL_DISPOSAL: (d_p < -eps and d_i > eps),
    }
    if r.region in expected and not expected[r.region]:
        raise InvariantError(
            f"pooling comparison (dV_P={d_p:.3g}, dV_I={d_i:.3g}) contradicts region {r.region}"
        )
    return d_p, d_i


# ---------------------------------------------------------------------------
# Weights for which the first-best is incentive compatible
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeightInterval:
    """P's weights ``α`` whose first-best is incentive compatible.

    ``x1_lo`` makes I indifferent and maps to ``alpha_hi``; ``x1_hi`` makes P
    indifferent and maps to ``alpha_lo``.
    """

    alpha_lo: float
    alpha_hi: float
    x1_lo: float
    x1_hi: float

    def __contains__(self, alpha: float) -> bool:
        return self.alpha_lo <= alpha <= self.alpha_hi


def gamma_ratio(e: Economy, x1) -> NDArray[np.float64] | float:
    """P's utility drop across its block relative to I's, for the no-disposal IPI layout."""
    tt = _TwoType(e)
    x2 = tt.x2(x1)
    u_p, u_i = e.utilities
    val = (u_p(x1) - u_p(x2)) / (u_i(x1) - u_i(x2))
    return float(val) if np.ndim(val) == 0 else val


def alpha_of_x1(e: Economy, x1) -> NDArray[np.float64] | float:
    """Weight whose first-best IPI threshold is ``x1``."""
    return 1.0 / (1.0 + gamma_ratio(e, x1))


def fb_ic_interval(e: Economy) -> WeightInterval:
    tt = _TwoType(e)
    top = float(tt.x1_max(0.0))
    lo_end, hi_end = EPS_X, top - EPS_X
    x_lo = brentq(lambda x: float(tt.slack_ip(x, 0.0)), lo_end, hi_end, xtol=1e-15, maxiter=300)
    x_hi = brentq(lambda x: float(tt.slack_pi(x, 0.0)), lo_end, hi_end, xtol=1e-15, maxiter=300)
    if not x_lo < x_hi:
        raise NumericalError(f"indifference anchors out of order: {x_lo:.9g} >= {x_hi:.9g}")
    return WeightInterval(float(alpha_of_x1(e, x_hi)), float(alpha_of_x1(e, x_lo)), x_lo, x_hi)


def first_best_is_ic(e: Economy, eps: float = EPS_IC) -> tuple[bool, float, float]:
    """Feasibility of the first-best under both incentive constraints, with both slacks."""
    tt = _TwoType(e)
    fb = classify_first_best(e)
    _, s_ip, s_pi = tt.evaluate(fb.x1, 0.0)
    return bool(s_ip >= -eps and s_pi >= -eps), float(s_ip), float(s_pi)


# ---------------------------------------------------------------------------
# Marginal value of disposal
# ---------------------------------------------------------------------------


def disposal_marginal(e: Economy) -> float:
    """Welfare derivative in ``β`` at ``β = 0`` along the incentive-feasible path.

    Positive values mean some denial of service raises welfare locally.  When
    P's constraint binds, ``x1`` follows its binding curve; when I's binds,
    raising ``β`` is infeasible and ``-inf`` is returned.
    """
    tt = _TwoType(e)
    fb = classify_first_best(e)
    x1, _ = _search(tt, fb.x1, False, 1)
    _, s_ip, s_pi = (float(v) for v in tt.evaluate(x1, 0.0))
    x3 = float(tt.x3(0.0))
    u_p, u_i = e.utilities
    dw_dbeta = -(1.0 - tt.alpha) * tt.mu_i * float(u_i(x3))
    if s_ip <= EPS_IC:
        return -np.inf
    if s_pi > EPS_IC:
        return dw_dbeta
    x2 = float(tt.x2(x1))
    f1 = float(e.supply.density(x1))
    g = lambda x: tt.alpha * float(u_p(x)) - (1.0 - tt.alpha) * float(u_i(x))  # noqa: E731
    dw_dx1 = f1 * (g(x2) - g(x1))
    ds_dbeta = float(u_p(x3))
    ds_dx1 = -f1 * float(u_p(x1) - u_p(x2)) * (1.0 / tt.mu_p + 1.0 / tt.mu_i)
    return dw_dbeta + dw_dx1 * (-ds_dbeta / ds_dx1)


def pooling_welfare(e: Economy) -> float:
    tt = _TwoType(e)
    vp, vi = tt.pooling_values()
    return tt.w_p * tt.mu_p * vp + tt.w_i * tt.mu_i * vi
