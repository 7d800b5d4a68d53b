from __future__ import annotations

import itertools

import numpy as np
import pytest

from quality_alloc.model import ArgumentError
from quality_alloc.simplex import (
    INFEASIBLE,
    OPTIMAL,
    UNBOUNDED,
    LinearProgram,
    simplex_solve,
)


def enumerate_vertices(c, a_ub, b_ub):
    """Best objective over all basic feasible points of {x >= 0, A x <= b}."""
    n = c.size
    rows = np.vstack([a_ub, -np.eye(n)])
    rhs = np.concatenate([b_ub, np.zeros(n)])
    best = -np.inf
    for pick in itertools.combinations(range(rows.shape[0]), n):
        sub = rows[list(pick)]
        if abs(np.linalg.det(sub)) < 1e-10:
            continue
        x = np.linalg.solve(sub, rhs[list(pick)])
        if np.all(rows @ x <= rhs + 1e-9):
            best = max(best, float(c @ x))
    return best


def test_single_variable_upper_bound():
    r = simplex_solve(LinearProgram(np.array([1.0]), np.array([[1.0]]), np.array([1.0])))
    assert r.status == OPTIMAL
    assert r.x[0] == pytest.approx(1.0)
    assert r.objective == pytest.approx(1.0)


def test_two_by_two_transport():
    # Supplies (3, 2), demands (2, 3); unit costs [[1, 4], [2, 1]] -> optimum ships 2,1 / 0,2.
    cost = np.array([1.0, 4.0, 2.0, 1.0])
    a_eq = np.array([
        [1, 1, 0, 0],
        [0, 0, 1, 1],
        [1, 0, 1, 0],
        [0, 1, 0, 1],
    ], dtype=float)
    b_eq = np.array([3.0, 2.0, 2.0, 3.0])
    r = simplex_solve(LinearProgram(-cost, a_eq=a_eq, b_eq=b_eq))
    assert r.status == OPTIMAL
    assert -r.objective == pytest.approx(2 * 1 + 1 * 4 + 2 * 1)
    np.testing.assert_allclose(r.x, [2, 1, 0, 2], atol=1e-9)


def test_infeasible_status():
    lp = LinearProgram(np.array([1.0]), np.array([[1.0]]), np.array([1.0]),
                       np.array([[1.0]]), np.array([2.0]))
    assert simplex_solve(lp).status == INFEASIBLE


def test_unbounded_status():
    lp = LinearProgram(np.array([1.0, 1.0]), np.array([[1.0, -1.0]]), np.array([1.0]))
    assert simplex_solve(lp).status == UNBOUNDED


def test_negative_rhs_equality():
    lp = LinearProgram(np.array([-1.0, -1.0]), a_eq=np.array([[-1.0, -2.0]]), b_eq=np.array([-4.0]))
    r = simplex_solve(lp)
    assert r.status == OPTIMAL
    assert r.objective == pytest.approx(-2.0)


def test_rejects_mismatched_shapes():
    with pytest.raises(ArgumentError):
        simplex_solve(LinearProgram(np.ones(2), np.ones((2, 2)), np.ones(3)))


def test_rejects_non_finite():
    with pytest.raises(ArgumentError):
        simplex_solve(LinearProgram(np.array([np.nan, 1.0]), np.ones((1, 2)), np.ones(1)))


@pytest.mark.parametrize("seed", range(30))
def test_random_lp_matches_vertex_enumeration(seed):
    g = np.random.default_rng(seed)
    n = int(g.integers(2, 9))
    m = int(g.integers(2, 7))
    a = g.uniform(-1.0, 2.0, (m, n))
    a[0] = np.abs(a[0]) + 0.1  # keeps the region bounded
    b = g.uniform(0.5, 3.0, m)
    c = g.uniform(-1.0, 2.0, n)
    r = simplex_solve(LinearProgram(c, a, b))
    assert r.status == OPTIMAL
    assert r.objective == pytest.approx(enumerate_vertices(c, a, b), abs=1e-9)
    assert np.all(a @ r.x <= b + 1e-9)
    assert np.all(r.x >= -1e-12)


def test_degenerate_lp_terminates():
    # Many constraints active at the optimum vertex.
    a = np.array([[1, 1], [1, 0], [0, 1], [2, 2], [1, 2]], dtype=float)
    b = np.array([1, 1, 1, 2, 2], dtype=float)
    r = simplex_solve(LinearProgram(np.array([1.0, 1.0]), a, b))
    assert r.status == OPTIMAL
    assert r.objective == pytest.approx(1.0)
