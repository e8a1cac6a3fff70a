"""Deterministic kinematic multi-drone world with obstacles and gates.

Drones are point masses that follow their commanded velocity for one control
period (first-order hold). Obstacles are spheres whose motion is evaluated in
closed form from the step counter, so circular and back-and-forth paths never
accumulate integration drift.

Observation layout for one drone (length ``13 + 3 * K``)::

    [0:3]   position minus current target gate center (zeros once finished)
    [3:7]   orientation quaternion (w, x, y, z)
    [7:10]  linear velocity
    [10:13] angular velocity
    [13:]   K obstacle slots, obstacle position minus drone position,
            nearest first; empty slots hold SENTINEL_OFFSET on each axis
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from swarmgate.nn import NumericInputError

STATE_DIM = 13
SENTINEL_OFFSET = 100.0
REWARD_EPS = 0.001
COLLISION_REWARD = -100.0

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class StaticMotion:
    kind = "static"


@dataclass(frozen=True)
class LinearMotion:
    """Back-and-forth travel between two endpoints at constant speed.

    ``phase`` is the arc length already travelled at step 0, in [0, 2L).
    """

    start: tuple[float, float, float]
    end: tuple[float, float, float]
    speed: float
    phase: float = 0.0
    kind = "linear"


@dataclass(frozen=True)
class CircularMotion:
    """Horizontal circle around ``center``; angle = phase + rate * t."""

    center: tuple[float, float, float]
    radius: float
    rate: float
    phase: float = 0.0
    kind = "circular"


Motion = StaticMotion | LinearMotion | CircularMotion


@dataclass
class ObstacleState:
    position: np.ndarray
    velocity: np.ndarray
    radius: float
    motion: Motion = field(default_factory=StaticMotion)


@dataclass(frozen=True)
class GateSpec:
    center: np.ndarray
    normal: np.ndarray
    half_width: float
    half_height: float
    order: int = 0

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """In-plane unit vectors (u across the width, w across the height)."""
        n = self.normal
        up = np.array([0.0, 0.0, 1.0])
        if abs(float(n @ up)) > 0.999:
            up = np.array([1.0, 0.0, 0.0])
        u = np.cross(up, n)
        u /= np.linalg.norm(u)
        w = np.cross(n, u)
        return u, w


@dataclass(frozen=True)
class DroneState:
    position: np.ndarray
    orientation: np.ndarray
    velocity: np.ndarray
    angular_velocity: np.ndarray
    alive: bool = True


@dataclass
class WorldConfig:
    dt: float = 0.05
    max_steps: int = 400
    obstacle_slots: int = 2
    v_max: float = 1.5
    drone_radius: float = 0.06
    r_safe: float = 0.3


@dataclass
class WorldState:
    """Full snapshot. Per-drone quantities are stacked arrays."""

    positions: np.ndarray  # (n, 3)
    orientations: np.ndarray  # (n, 4)
    velocities: np.ndarray  # (n, 3)
    angular_velocities: np.ndarray  # (n, 3)
    alive: np.ndarray  # (n,) bool
    next_gate: np.ndarray  # (n,) int, == len(gates) once finished
    obstacles: list[ObstacleState]
    gates: list[GateSpec]
    config: WorldConfig
    step: int = 0

    @property
    def n_drones(self) -> int:
        return len(self.positions)

    @property
    def dt(self) -> float:
        return self.config.dt

    @property
    def finished(self) -> np.ndarray:
        return self.next_gate >= len(self.gates)

    @property
    def active(self) -> np.ndarray:
        """Drones still flying: alive and course not yet complete."""
        return self.alive & ~self.finished

    def drone(self, i: int) -> DroneState:
        return DroneState(
            self.positions[i].copy(),
            self.orientations[i].copy(),
            self.velocities[i].copy(),
            self.angular_velocities[i].copy(),
            bool(self.alive[i]),
        )

    def copy(self) -> "WorldState":
        return replace(
            self,
            positions=self.positions.copy(),
            orientations=self.orientations.copy(),
            velocities=self.velocities.copy(),
            angular_velocities=self.angular_velocities.copy(),
            alive=self.alive.copy(),
            next_gate=self.next_gate.copy(),
            obstacles=[replace(o, position=o.position.copy(), velocity=o.velocity.copy()) for o in self.obstacles],
        )

    @property
    def obs_dim(self) -> int:
        return STATE_DIM + 3 * self.config.obstacle_slots

    @property
    def n_constraints(self) -> int:
        return self.config.obstacle_slots + self.n_drones - 1


@dataclass
class StepResult:
    rewards: np.ndarray
    observations: np.ndarray
    done: bool
    collided: np.ndarray
    passed_gate: np.ndarray
    distances: np.ndarray


def make_world(
    drone_positions: Sequence[Sequence[float]],
    obstacles: Sequence[ObstacleState],
    gates: Sequence[GateSpec],
    config: WorldConfig | None = None,
) -> WorldState:
    config = config or WorldConfig()
    pos = np.array(drone_positions, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    gates = sorted(gates, key=lambda g: g.order)
    world = WorldState(
        positions=pos,
        orientations=np.tile(IDENTITY_QUAT, (n, 1)),
        velocities=np.zeros((n, 3)),
        angular_velocities=np.zeros((n, 3)),
        alive=np.ones(n, dtype=bool),
        next_gate=np.zeros(n, dtype=np.int64),
        obstacles=[replace(o) for o in obstacles],
        gates=list(gates),
        config=config,
    )
    world.obstacles = [obstacle_at(o, 0.0) for o in world.obstacles]
    return world


# ---------------------------------------------------------------------------
# obstacle motion


def obstacle_at(obs: ObstacleState, t: float) -> ObstacleState:
    """Closed-form obstacle position and velocity at time ``t``."""
    m = obs.motion
    if isinstance(m, LinearMotion):
        a = np.asarray(m.start, dtype=np.float64)
        b = np.asarray(m.end, dtype=np.float64)
        seg = b - a
        length = float(np.linalg.norm(seg))
        if length == 0.0 or m.speed == 0.0:
            return replace(obs, position=a.copy(), velocity=np.zeros(3))
        s = (m.phase + m.speed * t) % (2.0 * length)
        direction = seg / length
        if s <= length:
            pos, vel = a + direction * s, direction * m.speed
        else:
            pos, vel = b - direction * (s - length), -direction * m.speed
        return replace(obs, position=pos, velocity=vel)
    if isinstance(m, CircularMotion):
        ang = m.phase + m.rate * t
        c = np.asarray(m.center, dtype=np.float64)
        pos = c + m.radius * np.array([math.cos(ang), math.sin(ang), 0.0])
        vel = m.radius * m.rate * np.array([-math.sin(ang), math.cos(ang), 0.0])
        return replace(obs, position=pos, velocity=vel)
    return replace(obs, position=np.asarray(obs.position, dtype=np.float64).copy(), velocity=np.zeros(3))


# ---------------------------------------------------------------------------
# observation


def target_centers(world: WorldState) -> np.ndarray:
    """Current target gate center per drone; finished drones map to their own position."""
    G = len(world.gates)
    out = world.positions.copy()
    for i, g in enumerate(world.next_gate):
        if g < G:
            out[i] = world.gates[g].center
    return out


def nearest_obstacles(world: WorldState, drone_id: int, k: int) -> list[int]:
    """Indices of the ``k`` nearest obstacles, ascending center distance (stable)."""
    if not world.obstacles:
        return []
    p = world.positions[drone_id]
    d = np.array([np.linalg.norm(o.position - p) for o in world.obstacles])
    return [int(i) for i in np.argsort(d, kind="stable")[:k]]


def build_observation(world: WorldState, drone_id: int) -> np.ndarray:
    if not 0 <= drone_id < world.n_drones:
        raise IndexError(f"drone_id {drone_id} out of range for {world.n_drones} drones")
    K = world.config.obstacle_slots
    p = world.positions[drone_id]
    obs = np.empty(STATE_DIM + 3 * K)
    g = world.next_gate[drone_id]
    obs[0:3] = p - world.gates[g].center if g < len(world.gates) else 0.0
    obs[3:7] = world.orientations[drone_id]
    obs[7:10] = world.velocities[drone_id]
    obs[10:13] = world.angular_velocities[drone_id]
    block = np.full((K, 3), SENTINEL_OFFSET)
    for slot, j in enumerate(nearest_obstacles(world, drone_id, K)):
        block[slot] = world.obstacles[j].position - p
    obs[STATE_DIM:] = block.ravel()
    return obs


def observe_all(world: WorldState) -> np.ndarray:
    return np.stack([build_observation(world, i) for i in range(world.n_drones)])


# ---------------------------------------------------------------------------
# reward, collisions, gates


def reward(d: float, collided: bool) -> float:
    """-100 on collision, otherwise 1 / (d + 0.001)."""
    if d < 0:
        raise ValueError(f"distance must be non-negative, got {d}")
    if collided:
        return COLLISION_REWARD
    return 1.0 / (d + REWARD_EPS)


def detect_collisions(world: WorldState, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-drone collision flags.

    Only drones selected by ``mask`` (default: all) take part, against all
    obstacles and against each other.
    """
    n = world.n_drones
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    r = world.config.drone_radius
    flags = np.zeros(n, dtype=bool)
    P = world.positions
    for o in world.obstacles:
        d = np.linalg.norm(P - o.position, axis=1)
        flags |= mask & (d < o.radius + r)
    if n > 1:
        diff = P[:, None, :] - P[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        hit = (dist < 2 * r) & mask[:, None] & mask[None, :]
        np.fill_diagonal(hit, False)
        flags |= hit.any(axis=1)
    return flags


def check_gate_passage(prev_p: np.ndarray, next_p: np.ndarray, gate: GateSpec) -> bool:
    """Segment prev->next crosses the gate plane along +normal inside the frame."""
    n = gate.normal
    s0 = float(n @ (prev_p - gate.center))
    s1 = float(n @ (next_p - gate.center))
    if not (s0 < 0.0 <= s1):
        return False
    t = -s0 / (s1 - s0)
    x = prev_p + t * (next_p - prev_p) - gate.center
    u, w = gate.basis()
    return abs(float(u @ x)) <= gate.half_width and abs(float(w @ x)) <= gate.half_height


def clearances(world: WorldState, drone_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Surface clearances of one drone to every obstacle and every other drone."""
    p = world.positions[drone_id]
    r = world.config.drone_radius
    obs = np.array(
        [np.linalg.norm(o.position - p) - o.radius - r for o in world.obstacles]
    )
    others = [j for j in range(world.n_drones) if j != drone_id]
    drones = np.array(
        [np.linalg.norm(world.positions[j] - p) - 2 * r for j in others]
    )
    return obs, drones


def constraint_clearances(world: WorldState, drone_id: int) -> np.ndarray:
    """Clearance per constraint slot (K obstacle slots, then n-1 drone slots).

    Obstacle slots follow the observation ordering; drone slots are the other
    active drones, nearest first. Empty slots are NaN.
    """
    K = world.config.obstacle_slots
    out = np.full(K + world.n_drones - 1, np.nan)
    p = world.positions[drone_id]
    r = world.config.drone_radius
    for slot, j in enumerate(nearest_obstacles(world, drone_id, K)):
        o = world.obstacles[j]
        out[slot] = np.linalg.norm(o.position - p) - o.radius - r
    active = world.active
    dd = [
        np.linalg.norm(world.positions[j] - p) - 2 * r
        for j in range(world.n_drones)
        if j != drone_id and active[j]
    ]
    dd.sort()
    out[K : K + len(dd)] = dd
    return out


# ---------------------------------------------------------------------------
# stepping


def step_world(world: WorldState, actions: np.ndarray) -> tuple[WorldState, StepResult]:
    """Advance one control period.

    ``actions`` is (n_drones, 3) commanded velocities; rows for drones that are
    no longer flying are ignored. The dynamics are noise-free, so no random
    stream is consumed here.
    """
    actions = np.asarray(actions, dtype=np.float64)
    n = world.n_drones
    if actions.shape != (n, 3):
        raise ValueError(f"expected actions of shape {(n, 3)}, got {actions.shape}")
    if np.any(np.isnan(actions)):
        raise NumericInputError("NaN in actions")
    cfg = world.config
    new = world.copy()
    active = world.active
    v = np.clip(actions, -cfg.v_max, cfg.v_max)
    v[~active] = 0.0
    new.velocities = v
    new.positions = world.positions + v * cfg.dt
    new.step = world.step + 1
    t = new.step * cfg.dt
    new.obstacles = [obstacle_at(o, t) for o in world.obstacles]

    collided = detect_collisions(new, mask=active)
    passed = np.zeros(n, dtype=bool)
    G = len(world.gates)
    for i in np.flatnonzero(active & ~collided):
        g = world.next_gate[i]
        if check_gate_passage(world.positions[i], new.positions[i], world.gates[g]):
            passed[i] = True
            new.next_gate[i] = g + 1
    new.alive = world.alive & ~collided

    centers = target_centers(new)
    dist = np.linalg.norm(new.positions - centers, axis=1)
    # reaching a gate counts as arriving at its center
    dist[passed] = 0.0
    rewards = np.zeros(n)
    for i in np.flatnonzero(active):
        rewards[i] = reward(float(dist[i]), bool(collided[i]))

    done = bool(not new.active.any() or new.step >= cfg.max_steps)
    result = StepResult(
        rewards=rewards,
        observations=observe_all(new),
        done=done,
        collided=collided,
        passed_gate=passed,
        distances=dist,
    )
    return new, result
