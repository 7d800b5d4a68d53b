from __future__ import annotations

import math

import numpy as np
import pytest

from quality_alloc.firstbest import (
    IP,
    IPI,
    PI,
    AccordionSpec,
    build_accordion,
    classify_first_best,
    envelope_check,
    g_eval,
    g_maximizer,
    mass_threshold,
    random_accordion_spec,
    recover_welfare_weights,
)
from quality_alloc.model import (
    ArgumentError,
    InfeasibleError,
    InvariantError,
    canonical_economy,
    detect_inverted_spread,
    exponential_economy,
    fast_welfare,
    pooling_allocation,
)
from quality_alloc.oracle import compare, discretize, oracle_first_best


def bisect(f, lo, hi, n=200):
    flo = f(lo)
    for _ in range(n):
        mid = 0.5 * (lo + hi)
        if (f(mid) > 0) == (flo > 0):
            lo, flo = mid, f(mid)
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestG:
    def test_zero_at_best_quality(self):
        assert g_eval(canonical_economy(0.5, 1.0), 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_direct_evaluation(self, e0):
        expected = 0.5 * (math.exp(-1 / 6) - math.exp(-10 / 3))
        assert g_eval(e0, 5 / 3) == pytest.approx(expected, rel=1e-12)
        # The listed 0.40539 is a truncation of 0.4054039.
        assert g_eval(e0, 5 / 3) == pytest.approx(0.40539, abs=2e-5)

    def test_vanishes_far_out(self, e0):
        assert abs(g_eval(e0, 400.0)) < 1e-15

    def test_maximizer_closed_form(self):
        assert g_maximizer(canonical_economy(0.5, 1.0)) == pytest.approx(math.log(2) / 0.5, abs=1e-9)

    def test_maximizer_interior(self, e0):
        closed = math.log(20) / 1.9
        x = g_maximizer(e0)
        assert x == pytest.approx(closed, abs=1e-9)
        assert 0 < x < 10 / 3


class TestClassify:
    def test_ip_case(self):
        e = canonical_economy(0.02, 2.0)
        assert g_eval(e, 5 / 3) == pytest.approx(0.46578, abs=1e-5)
        assert g_eval(e, 10 / 3) == pytest.approx(0.46711, abs=1e-5)
        r = classify_first_best(e)
        assert r.structure == IP
        assert r.x1 == pytest.approx(5 / 3)
        assert r.x2 == pytest.approx(10 / 3)

    def test_ipi_case_against_independent_bisection(self, e0):
        r = classify_first_best(e0)
        assert r.structure == IPI
        h = lambda x: g_eval(e0, x + 5 / 3) - g_eval(e0, x)  # noqa: E731
        x1 = bisect(h, 0.0, 5 / 3)
        assert r.x1 == pytest.approx(x1, abs=1e-9)
        assert r.x2 == pytest.approx(x1 + 5 / 3, abs=1e-9)
        assert r.x1 == pytest.approx(0.966, abs=2e-3)
        assert r.x2 == pytest.approx(2.633, abs=2e-3)

    def test_ipi_beats_every_block_position(self, e0):
        r = classify_first_best(e0)
        from quality_alloc.firstbest import block_allocation

        for x1 in np.linspace(0.0, 5 / 3, 41):
            other = fast_welfare(block_allocation(e0, x1, x1 + 5 / 3, 10 / 3), e0)
            assert other <= r.welfare + 1e-12

    def test_ipi_matches_greedy_oracle(self, e0):
        r = classify_first_best(e0)
        g = discretize(e0, 2000)
        assert compare(r.allocation, oracle_first_best(g), g).objective_gap <= 1e-4

    def test_pi_case(self):
        e = canonical_economy(1.0, 2.0, alpha=0.8)
        assert g_eval(e, 5 / 3) == pytest.approx(0.1440, abs=1e-4)
        assert g_eval(e, 0.0) == pytest.approx(0.6)
        r = classify_first_best(e)
        assert r.structure == PI
        assert r.x1 == 0.0
        assert r.x2 == pytest.approx(5 / 3)

    def test_welfare_beats_pooling(self, e0):
        r = classify_first_best(e0)
        assert r.welfare > fast_welfare(pooling_allocation(e0), e0)

    def test_needs_two_types(self):
        with pytest.raises(ArgumentError):
            classify_first_best(exponential_economy([0.1, 0.5, 1.0]))


class TestMassThreshold:
    def test_flip_at_returned_split(self, e0):
        mt = mass_threshold(e0, 1.0)
        assert mt.value is not None and 0 < mt.value < 1
        assert {mt.below, mt.above} == {IP, IPI}
        for delta, label in ((-0.01, mt.below), (0.01, mt.above)):
            mu_i = mt.value + delta
            e = e0.replace(masses=(1.0 - mu_i, mu_i))
            assert classify_first_best(e).structure == label

    def test_strong_p_weight_is_always_pi(self):
        e = canonical_economy(0.1, 2.0, alpha=0.99)
        mt = mass_threshold(e, 1.0)
        assert mt.value is None
        assert mt.below == mt.above == PI

    def test_total_mass_bounds(self, e0):
        with pytest.raises(ArgumentError):
            mass_threshold(e0, 2.0)


class TestAccordion:
    def test_two_types_reproduce_ipi(self, e0):
        r = classify_first_best(e0)
        a = build_accordion(e0, AccordionSpec((r.x1, 0.0), (r.x2, r.x_bar)))
        assert fast_welfare(a, e0) == pytest.approx(r.welfare, rel=1e-12)
        got = np.array(a.lotteries[1].segments)
        np.testing.assert_allclose(got, np.array(r.allocation.lotteries[1].segments), atol=1e-12)

    def test_single_type(self):
        e = exponential_economy([1.0], masses=[0.6])
        a = build_accordion(e, AccordionSpec((1.0,), (3.0,)))
        q = a.lotteries[0]
        assert q.segments == ((1.0, 3.0),)
        assert q.mass_on(e.supply, 0.0, 5.0) == pytest.approx(1.0)

    def test_wrong_mass_names_type(self):
        e = exponential_economy([1.0], masses=[0.6])
        with pytest.raises(InfeasibleError, match="type 0"):
            build_accordion(e, AccordionSpec((1.0,), (2.0,)))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_three_type_nesting(self, seed):
        e = exponential_economy([0.2, 0.7, 1.5])
        a = build_accordion(e, random_accordion_spec(e, np.random.default_rng(seed)))
        for i in range(3):
            for j in range(i + 1, 3):
                assert detect_inverted_spread(a, i, j, e.supply) is None
        assert a.residual_mass(e.supply, 0.0, e.x_bar) == pytest.approx(0.0, abs=1e-9)


class TestWeightRecovery:
    def test_two_type_ipi_weights(self, e0):
        r = classify_first_best(e0)
        rec = recover_welfare_weights(e0, r.allocation)
        assert rec.weights[1] == 1.0 and rec.intercepts[1] == 0.0
        assert rec.weights[0] == pytest.approx(e0.alpha / (1 - e0.alpha), abs=1e-5)

    def test_single_type(self):
        e = exponential_economy([1.0], masses=[0.6])
        rec = recover_welfare_weights(e, build_accordion(e, AccordionSpec((0.0,), (2.0,))))
        assert rec.weights.tolist() == [1.0]
        assert rec.intercepts.tolist() == [0.0]

    def test_rejects_non_nested(self):
        e = canonical_economy(0.5, 1.0)
        with pytest.raises(InvariantError):
            recover_welfare_weights(e, pooling_allocation(e))

    @pytest.mark.parametrize("seed", range(3))
    def test_three_type_envelope_and_lp(self, seed):
        e = exponential_economy([0.2, 0.7, 1.5])
        a = build_accordion(e, random_accordion_spec(e, np.random.default_rng(100 + seed)))
        rec = recover_welfare_weights(e, a)
        assert np.all(rec.weights > 0)
        assert envelope_check(rec, a).ok()
        ew = e.replace(weights=rec.weights)
        lp = oracle_first_best(discretize(ew, 600), method="lp")
        w = fast_welfare(a, ew)
        assert abs(w - lp.objective) <= 1e-3 * abs(lp.objective)
