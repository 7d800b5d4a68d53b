from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from quality_alloc.firstbest import classify_first_best
from quality_alloc.model import (
    InfeasibleError,
    InvariantError,
    canonical_economy,
    detect_disposal,
    fast_welfare,
    ic_matrix,
    pooling_allocation,
)
from quality_alloc.oracle import discretize, oracle_second_best
from quality_alloc.secondbest import (
    DISPOSAL,
    FIRST_BEST,
    FULL_DISPOSAL,
    IC_IP_BINDS,
    IC_PI_BINDS,
    alpha_of_x1,
    classify_region,
    disposal_marginal,
    evaluate_candidate,
    fb_ic_interval,
    first_best_is_ic,
    gamma_ratio,
    pooling_welfare,
    solve_second_best,
    solve_second_best_no_disposal,
    welfare_vs_pooling,
)

REGION_CASES = [
    ((0.3, 1.5), FIRST_BEST),
    ((1.0, 2.0), IC_IP_BINDS),
    ((0.5, 1.0), IC_PI_BINDS),
    ((0.05, 3.0), DISPOSAL),
    ((0.02, 2.0), FULL_DISPOSAL),
]


@pytest.fixture(scope="module")
def reports():
    return {rates: solve_second_best(canonical_economy(*rates)) for rates, _ in REGION_CASES}


class TestCandidate:
    def test_full_disposal_corner(self, e0):
        x1 = 0.5
        beta = 1.0 - float(e0.supply.cdf(x1)) / 0.5
        c = evaluate_candidate(e0, x1, beta)
        assert c.x3 == pytest.approx(c.x2, abs=1e-12)

    def test_zero_beta_reproduces_first_best(self, e0):
        fb = classify_first_best(e0)
        c = evaluate_candidate(e0, fb.x1, 0.0)
        assert c.welfare == pytest.approx(fb.welfare, abs=1e-8)
        assert c.x2 == pytest.approx(fb.x2, abs=1e-12)

    def test_listed_threshold(self, e0):
        fb = classify_first_best(e0)
        c = evaluate_candidate(e0, 0.966, 0.0)
        # 0.966 is a 3-digit value; welfare is flat at the optimum so the gap is second order.
        assert c.welfare == pytest.approx(fb.welfare, abs=1e-6)

    def test_mass_identities(self, e0):
        c = evaluate_candidate(e0, 0.8, 0.2)
        f = e0.supply.cdf
        assert f(c.x2) - f(c.x1) == pytest.approx(0.5, abs=1e-12)
        assert f(c.x1) + f(c.x3) - f(c.x2) == pytest.approx(0.8 * 0.5, abs=1e-12)

    def test_over_assignment(self, e0):
        with pytest.raises(InfeasibleError):
            evaluate_candidate(e0, 1.5, 0.5)


class TestSolve:
    @pytest.mark.parametrize("rates,region", REGION_CASES)
    def test_region_labels(self, reports, rates, region):
        assert reports[rates].region == region

    @pytest.mark.parametrize("rates,_", REGION_CASES)
    def test_invariants(self, reports, rates, _):
        r = reports[rates]
        e = canonical_economy(*rates)
        f = e.supply.cdf
        assert 0 < r.x1 < r.x2 <= r.x3 <= e.supply.upper
        assert f(r.x2) - f(r.x1) == pytest.approx(0.5, abs=1e-7)
        assert f(r.x1) + f(r.x3) - f(r.x2) == pytest.approx((1 - r.beta) * 0.5, abs=1e-7)
        assert min(r.s_ip, r.s_pi) >= -1e-6
        assert not (abs(r.s_ip) <= 1e-6 and abs(r.s_pi) <= 1e-6)
        assert ic_matrix(r.allocation, e).feasible

    @pytest.mark.parametrize("rates,_", REGION_CASES)
    def test_pooling_strictly_worse(self, reports, rates, _):
        e = canonical_economy(*rates)
        assert reports[rates].welfare - pooling_welfare(e) > 1e-6
        assert pooling_welfare(e) == pytest.approx(fast_welfare(pooling_allocation(e), e), rel=1e-10)

    def test_first_best_region_equals_first_best(self, reports):
        fb = classify_first_best(canonical_economy(0.3, 1.5))
        r = reports[(0.3, 1.5)]
        assert r.beta == 0.0
        assert r.x1 == pytest.approx(fb.x1, abs=1e-9)
        assert r.welfare == pytest.approx(fb.welfare, rel=1e-12)

    def test_inside_weight_interval_gives_first_best(self):
        e = canonical_economy(0.5, 1.0)
        iv = fb_ic_interval(e)
        r = solve_second_best(e.with_alpha(0.5 * (iv.alpha_lo + iv.alpha_hi)))
        assert r.region == FIRST_BEST

    def test_disposal_matches_lp(self, reports):
        e = canonical_economy(0.05, 3.0)
        r = reports[(0.05, 3.0)]
        assert r.beta > 1e-6
        lp = oracle_second_best(discretize(e, 1000))
        assert abs(r.welfare - lp.objective) <= 1e-3 * abs(lp.objective)
        assert lp.atoms[1] > 1e-6
        assert lp.atoms[0] <= 1e-9

    def test_only_i_type_disposal(self, reports):
        for rates, _ in REGION_CASES:
            e = canonical_economy(*rates)
            assert detect_disposal(reports[rates].allocation, 0, e.supply) is None


class TestRegionRules:
    def test_full_disposal_label(self, e0):
        fb = classify_first_best(e0)
        base = solve_second_best(canonical_economy(0.02, 2.0))
        r = dataclasses.replace(base, beta=0.3, x3=base.x2, s_ip=0.1, s_pi=0.0)
        assert classify_region(r, fb) == FULL_DISPOSAL

    def test_first_best_label(self):
        e = canonical_economy(0.3, 1.5)
        fb = classify_first_best(e)
        r = solve_second_best(e)
        assert classify_region(r, fb) == FIRST_BEST

    def test_both_binding_is_invariant_violation(self, e0):
        fb = classify_first_best(e0)
        r = dataclasses.replace(solve_second_best(e0), s_ip=0.0, s_pi=0.0)
        with pytest.raises(InvariantError):
            classify_region(r, fb)


class TestPoolingDeltas:
    def test_first_best_region(self, reports):
        d_p, d_i = welfare_vs_pooling(canonical_economy(0.3, 1.5), reports[(0.3, 1.5)])
        assert d_p > 1e-6 and d_i > 1e-6

    def test_ip_binds_region(self, reports):
        d_p, d_i = welfare_vs_pooling(canonical_economy(1.0, 2.0), reports[(1.0, 2.0)])
        assert d_p > 1e-6 and abs(d_i) <= 1e-6

    def test_disposal_region(self, reports):
        d_p, d_i = welfare_vs_pooling(canonical_economy(0.05, 3.0), reports[(0.05, 3.0)])
        assert d_p < 0 < d_i

    def test_contradiction_raises(self, reports):
        r = dataclasses.replace(reports[(0.05, 3.0)], delta_pooling=(0.1, 0.1))
        with pytest.raises(InvariantError):
            welfare_vs_pooling(canonical_economy(0.05, 3.0), r)


class TestWeightInterval:
    def test_interval_and_sign_pattern(self):
        e = canonical_economy(0.5, 1.0)
        iv = fb_ic_interval(e)
        assert 0 < iv.alpha_lo < iv.alpha_hi < 1
        assert iv.alpha_hi - iv.alpha_lo > 1e-3
        assert 0 < iv.x1_lo < iv.x1_hi
        mid = e.with_alpha(0.5 * (iv.alpha_lo + iv.alpha_hi))
        assert ic_matrix(classify_first_best(mid).allocation, mid).feasible
        high = e.with_alpha(iv.alpha_hi + 0.05)
        s = ic_matrix(classify_first_best(high).allocation, high).slack
        assert s[1, 0] < -1e-6 and s[0, 1] > 0
        low = e.with_alpha(iv.alpha_lo - 0.05)
        s = ic_matrix(classify_first_best(low).allocation, low).slack
        assert s[0, 1] < -1e-6 and s[1, 0] > 0

    def test_endpoints_are_indifference_points(self):
        e = canonical_economy(0.5, 1.0)
        iv = fb_ic_interval(e)
        ok_hi, s_ip, _ = first_best_is_ic(e.with_alpha(iv.alpha_hi))
        assert abs(s_ip) <= 1e-6
        ok_lo, _, s_pi = first_best_is_ic(e.with_alpha(iv.alpha_lo))
        assert abs(s_pi) <= 1e-6

    def test_gamma_increasing_alpha_decreasing(self):
        e = canonical_economy(0.5, 1.0)
        iv = fb_ic_interval(e)
        xs = np.linspace(0.05, 1.6, 60)
        assert np.all(np.diff(gamma_ratio(e, xs)) > 0)
        assert np.all(np.diff(alpha_of_x1(e, xs)) < 0)
        assert alpha_of_x1(e, iv.x1_lo) == pytest.approx(iv.alpha_hi)


class TestNoDisposal:
    def test_same_when_unrestricted_has_no_disposal(self, reports):
        e = canonical_economy(1.0, 2.0)
        r = solve_second_best_no_disposal(e)
        assert r.welfare == pytest.approx(reports[(1.0, 2.0)].welfare, rel=1e-12)
        assert r.x1 == pytest.approx(reports[(1.0, 2.0)].x1, abs=1e-9)

    def test_disposal_regime_strictly_lower(self, reports):
        e = canonical_economy(0.05, 3.0)
        r = solve_second_best_no_disposal(e)
        assert r.beta == 0.0
        assert r.x3 == pytest.approx(e.x_bar)
        assert reports[(0.05, 3.0)].welfare - r.welfare > 1e-6

    def test_disposal_marginal_sign(self):
        assert disposal_marginal(canonical_economy(0.05, 3.0)) > 0
        assert disposal_marginal(canonical_economy(0.5, 1.0)) < 0
