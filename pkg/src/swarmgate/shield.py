"""Evaluation-time velocity shield built from distance barriers.

For an obstacle (or another drone) at ``p_o`` moving with ``v_o`` the barrier
``h = |p - p_o|^2 - r^2`` gives the affine condition on the commanded
velocity ``v``::

    2 (p - p_o) . (v - v_o) >= -gamma * h      i.e.   a . v >= b

Commands are projected onto the intersection of these halfspaces with the
smallest Euclidean change.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np


class DegenerateBarrierError(ValueError):
    """The drone sits exactly on the obstacle center; the barrier gradient vanishes."""


@dataclass(frozen=True)
class BarrierConstraint:
    h: float
    a: np.ndarray
    b: float
    slope: float

    def satisfied(self, v: np.ndarray, tol: float = 0.0) -> bool:
        return float(self.a @ v) >= self.b - tol


@dataclass
class Projection:
    velocity: np.ndarray
    feasible: bool
    intervened: bool
    sweeps: int
    skipped: int = 0


def barrier_eval(
    p: np.ndarray,
    p_o: np.ndarray,
    v_o: np.ndarray,
    r_safe: float,
    slope: float = 1.0,
) -> BarrierConstraint:
    if r_safe <= 0:
        raise ValueError(f"r_safe must be positive, got {r_safe}")
    if slope < 0:
        raise ValueError(f"class-K slope must be non-negative, got {slope}")
    rel = np.asarray(p, dtype=np.float64) - np.asarray(p_o, dtype=np.float64)
    if not np.any(rel):
        raise DegenerateBarrierError("drone position coincides with the obstacle center")
    h = float(rel @ rel) - r_safe**2
    a = 2.0 * rel
    b = -slope * h + float(a @ np.asarray(v_o, dtype=np.float64))
    return BarrierConstraint(h=h, a=a, b=b, slope=slope)


def _project_halfspace(v: np.ndarray, a: np.ndarray, b: float) -> np.ndarray:
    return v + a * (b - float(a @ v)) / float(a @ a)


def project_velocity(
    v_cmd: np.ndarray,
    constraints: Sequence[BarrierConstraint],
    max_sweeps: int = 100,
    tol: float = 1e-9,
) -> Projection:
    """Minimum-deviation velocity satisfying every ``a . v >= b``.

    One constraint is solved in closed form. Several are handled with Dykstra's
    alternating projection (cyclic projections with correction terms), which
    converges to the Euclidean projection onto the intersection rather than
    to an arbitrary feasible point. If the sweeps have not converged after
    ``max_sweeps`` (nearly parallel constraints converge slowly) the exact
    active-set solution is used instead.
    """
    v_cmd = np.asarray(v_cmd, dtype=np.float64)
    usable = [c for c in constraints if float(c.a @ c.a) > 0.0]
    skipped = len(constraints) - len(usable)
    if all(c.satisfied(v_cmd) for c in usable):
        return Projection(v_cmd.copy(), True, False, 0, skipped)
    if len(usable) == 1:
        c = usable[0]
        return Projection(_project_halfspace(v_cmd, c.a, c.b), True, True, 1, skipped)

    v = v_cmd.copy()
    corrections = [np.zeros_like(v) for _ in usable]
    sweeps = 0
    converged = False
    for sweeps in range(1, max_sweeps + 1):
        prev = v.copy()
        for k, c in enumerate(usable):
            y = v + corrections[k]
            proj = y if c.satisfied(y) else _project_halfspace(y, c.a, c.b)
            corrections[k] = y - proj
            v = proj
        if np.linalg.norm(v - prev) <= tol and all(c.satisfied(v, tol) for c in usable):
            converged = True
            break
    if not converged:
        exact = _active_set_projection(v_cmd, usable, tol)
        if exact is not None:
            v = exact
    feasible = all(c.satisfied(v, tol) for c in usable)
    return Projection(v, feasible, True, sweeps, skipped)


def _active_set_projection(v_cmd: np.ndarray, constraints: Sequence[BarrierConstraint], tol: float) -> np.ndarray | None:
    """Exact projection by enumerating active sets of up to ``dim`` constraints.

    The optimum is the projection of ``v_cmd`` onto the affine span of some
    linearly independent subset of active constraints, so the closest feasible
    candidate is the answer. Returns None when no candidate is feasible.
    """
    dim = v_cmd.shape[0]
    best, best_d = None, np.inf
    for size in range(1, min(dim, len(constraints)) + 1):
        for subset in combinations(constraints, size):
            A = np.stack([c.a for c in subset])
            r = np.array([c.b for c in subset]) - A @ v_cmd
            G = A @ A.T
            if np.linalg.matrix_rank(G) < size:
                continue
            cand = v_cmd + A.T @ np.linalg.solve(G, r)
            d = float(np.linalg.norm(cand - v_cmd))
            if d < best_d and all(c.satisfied(cand, tol) for c in constraints):
                best, best_d = cand, d
    return best


def shield_constraints(
    p: np.ndarray,
    others: Sequence[tuple[np.ndarray, np.ndarray, float]],
    slopes: Sequence[float],
) -> list[BarrierConstraint]:
    """Barriers for (position, velocity, safe radius) tuples paired with slopes.

    Entries whose positions coincide with ``p`` are dropped; the caller has
    already registered those as collisions.
    """
    out = []
    for (p_o, v_o, radius), slope in zip(others, slopes):
        try:
            out.append(barrier_eval(p, p_o, v_o, radius, max(float(slope), 0.0)))
        except DegenerateBarrierError:
            continue
    return out
