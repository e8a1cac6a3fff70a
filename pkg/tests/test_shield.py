from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swarmgate.shield import (
    BarrierConstraint,
    DegenerateBarrierError,
    barrier_eval,
    project_velocity,
    shield_constraints,
)


def halfspace(a, b):
    a = np.asarray(a, dtype=float)
    return BarrierConstraint(h=1.0, a=a, b=float(b), slope=1.0)


def test_worked_example():
    c = barrier_eval(np.array([1.0, 0, 0]), np.zeros(3), np.zeros(3), 0.5, 1.0)
    assert c.h == 0.75 and c.a.tolist() == [2.0, 0, 0] and c.b == -0.75
    out = project_velocity(np.array([-2.0, 0, 0]), [c])
    assert out.velocity.tolist() == [-0.375, 0.0, 0.0]
    assert float(c.a @ out.velocity) == c.b
    assert out.intervened


def test_interior_point_unchanged():
    c = barrier_eval(np.array([1.0, 0, 0]), np.zeros(3), np.zeros(3), 0.5)
    v = np.array([0.3, -0.2, 0.1])
    out = project_velocity(v, [c])
    assert np.array_equal(out.velocity, v) and not out.intervened


def test_errors_and_skips():
    with pytest.raises(DegenerateBarrierError):
        barrier_eval(np.ones(3), np.ones(3), np.zeros(3), 0.3)
    with pytest.raises(ValueError):
        barrier_eval(np.ones(3), np.zeros(3), np.zeros(3), 0.0)
    out = project_velocity(np.zeros(3), [halfspace([0, 0, 0], 1.0), halfspace([1, 0, 0], 0.5)])
    assert out.skipped == 1 and np.allclose(out.velocity, [0.5, 0, 0])


def test_moving_obstacle_shifts_bound():
    c0 = barrier_eval(np.array([1.0, 0, 0]), np.zeros(3), np.zeros(3), 0.5)
    c1 = barrier_eval(np.array([1.0, 0, 0]), np.zeros(3), np.array([1.0, 0, 0]), 0.5)
    assert c1.b == c0.b + 2.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_constraint_minimality(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=3)
    b = float(rng.normal())
    v = rng.normal(size=3) * 2
    out = project_velocity(v, [halfspace(a, b)])
    expected = max(0.0, b - a @ v) / np.linalg.norm(a)
    assert abs(np.linalg.norm(out.velocity - v) - expected) <= 1e-12 * max(1.0, expected)
    assert a @ out.velocity >= b - 1e-9


def _random_feasible(rng, k):
    x0 = rng.normal(size=3)
    A = rng.normal(size=(k, 3))
    b = A @ x0 - rng.uniform(0, 1, size=k)
    return [halfspace(A[i], b[i]) for i in range(k)]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_idempotent_and_safe(seed, k):
    rng = np.random.default_rng(seed)
    cons = _random_feasible(rng, k)
    v = rng.normal(size=3) * 3
    out = project_velocity(v, cons)
    assert out.feasible
    for c in cons:
        assert c.a @ out.velocity >= c.b - 1e-9
    again = project_velocity(out.velocity, cons)
    assert np.linalg.norm(again.velocity - out.velocity) <= 1e-9


def test_two_constraints_vs_grid_oracle():
    rng = np.random.default_rng(12)
    for _ in range(20):
        cons = _random_feasible(rng, 2)
        v = rng.normal(size=3) * 2
        out = project_velocity(v, cons)
        for c in cons:
            assert c.a @ out.velocity >= c.b - 1e-9
        # dense grid around the answer: no feasible grid point is meaningfully closer
        g = np.linspace(-0.5, 0.5, 41)
        best = np.inf
        for dx, dy, dz in itertools.product(g, g, g):
            x = out.velocity + np.array([dx, dy, dz])
            if all(c.a @ x >= c.b for c in cons):
                best = min(best, np.linalg.norm(x - v))
        assert np.linalg.norm(out.velocity - v) <= best + 1e-3


def test_exact_two_constraint_corner():
    # projection of the origin onto {x >= 1} and {y >= 1} is the corner (1, 1, 0)
    cons = [halfspace([1, 0, 0], 1.0), halfspace([0, 1, 0], 1.0)]
    out = project_velocity(np.zeros(3), cons)
    assert np.allclose(out.velocity, [1, 1, 0], atol=1e-9)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_larger_slope_relaxes_when_outside(g1, g2):
    lo, hi = sorted((g1, g2))
    p = np.array([1.0, 0.2, 0.0])
    c_lo = barrier_eval(p, np.zeros(3), np.zeros(3), 0.5, lo)
    c_hi = barrier_eval(p, np.zeros(3), np.zeros(3), 0.5, hi)
    assert c_lo.h > 0
    assert c_hi.b <= c_lo.b


def test_shield_constraints_drops_coincident():
    p = np.zeros(3)
    cons = shield_constraints(p, [(np.zeros(3), np.zeros(3), 0.3), (np.ones(3), np.zeros(3), 0.3)], [1.0, -2.0])
    assert len(cons) == 1
    assert cons[0].slope == 0.0
