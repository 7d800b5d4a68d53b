from __future__ import annotations

import numpy as np
import pytest

from quality_alloc.firstbest import classify_first_best
from quality_alloc.model import (
    ArgumentError,
    canonical_economy,
    exponential_economy,
    fast_welfare,
    pooling_allocation,
)
from quality_alloc.oracle import (
    bin_allocation,
    compare,
    discretize,
    find_cycle,
    greedy_first_best,
    grid_pooling,
    oracle_first_best,
    oracle_second_best,
    solve_lp,
    support_shape,
)


def test_discretize_uniform_masses():
    g = discretize(canonical_economy(), 10)
    np.testing.assert_allclose(g.supply_mass, 0.15)
    assert g.supply_mass.sum() == pytest.approx(1.5)
    g5 = discretize(canonical_economy(), 10)
    assert g5.width == pytest.approx(0.5)


def test_discretize_minimum_bins():
    with pytest.raises(ArgumentError):
        discretize(canonical_economy(), 5)


def test_greedy_matches_closed_form_ipi(e0):
    g = discretize(e0, 2000)
    fb = classify_first_best(e0)
    sol = greedy_first_best(g)
    assert abs(sol.objective - fb.welfare) <= 1e-4 * fb.welfare
    assert support_shape(sol, e0.masses) == "IPI"


@pytest.mark.parametrize("rates", [(0.1, 2.0), (0.5, 1.0), (0.02, 2.0), (1.0, 1.7)])
def test_greedy_matches_lp(rates):
    g = discretize(canonical_economy(*rates), 200)
    greedy = oracle_first_best(g, method="greedy")
    lp = oracle_first_best(g, method="lp")
    assert greedy.objective == pytest.approx(lp.objective, rel=1e-9)


def test_single_type_takes_best_bins():
    e = exponential_economy([0.5], masses=[0.9])
    g = discretize(e, 500)
    sol = solve_lp(g)
    used = 0.9 * sol.q[0]
    np.testing.assert_allclose(used, g.usable_capacity(), atol=1e-9)
    exact = fast_welfare(pooling_allocation(e), e)
    assert abs(sol.objective - exact) <= 2.0 / 500 * exact


def test_pooling_binned_objective():
    e = canonical_economy(0.5, 1.0)
    g = discretize(e, 400)
    pool = grid_pooling(g)
    assert pool.objective == pytest.approx(fast_welfare(pooling_allocation(e), e), rel=1e-4)
    np.testing.assert_allclose(pool.ic_slack, 0.0, atol=1e-15)


def test_identical_allocation_zero_gap():
    e = canonical_economy(0.5, 1.0)
    g = discretize(e, 300)
    a = classify_first_best(e).allocation
    c = compare(a, bin_allocation(a, g), g)
    assert c.binned_objective_gap == 0.0
    np.testing.assert_allclose(c.threshold_gap, 0.0, atol=1e-12)
    assert c.ic_slack_gap == 0.0


def test_first_best_inside_interval_lp_matches():
    from quality_alloc.secondbest import fb_ic_interval

    base = canonical_economy(0.5, 1.0)
    iv = fb_ic_interval(base)
    e = base.with_alpha(0.5 * (iv.alpha_lo + iv.alpha_hi))
    fb = classify_first_best(e)
    for n in (200, 400):
        lp = oracle_second_best(discretize(e, n))
        assert abs(lp.objective - fb.welfare) <= 2.0 / n * fb.welfare


def test_disposal_atoms_for_i_only():
    g = discretize(canonical_economy(0.05, 3.0), 1000)
    lp = oracle_second_best(g)
    assert lp.atoms[1] > 1e-6
    assert lp.atoms[0] <= 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_four_types_share_few_bins_and_acyclic(seed):
    g = np.random.default_rng(seed)
    rates = np.sort(g.uniform(0.05, 2.0, 4))
    e = exponential_economy(rates, weights=g.uniform(0.5, 2.0, 4))
    lp = oracle_second_best(discretize(e, 1000))
    assert lp.status == "optimal"
    assert lp.shared_fraction(e.masses) <= 0.02
    assert lp.interior_shared_fraction(e.masses) == 0.0
    assert not lp.has_binding_cycle()


def test_boundary_split_detection():
    from quality_alloc.oracle import LpSolution

    masses = np.array([0.5, 0.5])
    q = np.array([[1, 1, 0.5, 0, 0, 0.3], [0, 0, 0.5, 1, 1, 0.3]], dtype=float)
    sol = LpSolution(q, np.zeros(2), 0.0, "optimal", "test")
    np.testing.assert_array_equal(sol.shared_bins(masses), [0, 0, 1, 0, 0, 1])
    # The last bin has no right neighbour, so it is not a plain boundary split.
    np.testing.assert_array_equal(sol.boundary_splits(masses), [0, 0, 1, 0, 0, 0])
    assert sol.interior_shared_fraction(masses) == pytest.approx(1 / 6)


def test_find_cycle():
    assert find_cycle(3, [(0, 1), (1, 2)]) is None
    cyc = find_cycle(3, [(0, 1), (1, 2), (2, 0)])
    assert cyc is not None and set(cyc) == {0, 1, 2}


def test_support_shape_labels():
    e = canonical_economy(0.02, 2.0)
    sol = greedy_first_best(discretize(e, 300))
    assert support_shape(sol, e.masses) == "IP"
