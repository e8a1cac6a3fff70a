"""Scenario files, the resettable environment wrapper and the built-in suite.

Scenario files are YAML::

    name: smoke
    dt: 0.05                 # control period, s
    max_steps: 400           # episode cap
    obstacle_slots: 1        # K, obstacle slots in each observation
    v_max: 1.5
    drone_radius: 0.06
    r_safe: 0.3
    spawn_jitter: 0.3        # uniform +/- per axis on drone start positions
    obstacle_jitter: 0.1     # uniform +/- per axis on static obstacles;
                             # moving obstacles get a random phase instead
    shield: off              # on|off, evaluation-time velocity shield
    drones:
      - [0.0, 0.0, 1.0]
    obstacles:
      - {position: [1.5, 0.3, 1.0], radius: 0.1, motion: {type: static}}
      - {radius: 0.1, motion: {type: linear, start: [..], end: [..], speed: 0.5}}
      - {radius: 0.1, motion: {type: circular, center: [..], radius: 1.0, rate: 0.5}}
    gates:
      - {center: [3.0, 0.0, 1.0], normal: [1.0, 0.0, 0.0],
         half_width: 0.25, half_height: 0.25, order: 0}
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from swarmgate.world import (
    CircularMotion,
    GateSpec,
    LinearMotion,
    ObstacleState,
    StaticMotion,
    StepResult,
    WorldConfig,
    WorldState,
    detect_collisions,
    make_world,
    observe_all,
    obstacle_at,
    step_world,
)


class ScenarioError(ValueError):
    """Validation failure; ``field`` is a dotted path into the document."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class Scenario:
    name: str
    drones: list[list[float]]
    obstacles: list[dict[str, Any]] = field(default_factory=list)
    gates: list[dict[str, Any]] = field(default_factory=list)
    dt: float = 0.05
    max_steps: int = 400
    obstacle_slots: int = 2
    v_max: float = 1.5
    drone_radius: float = 0.06
    r_safe: float = 0.3
    spawn_jitter: float = 0.0
    obstacle_jitter: float = 0.0
    shield: bool = False

    @property
    def n_drones(self) -> int:
        return len(self.drones)

    @property
    def obs_dim(self) -> int:
        return 13 + 3 * self.obstacle_slots

    @property
    def n_constraints(self) -> int:
        return self.obstacle_slots + self.n_drones - 1

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            dt=self.dt,
            max_steps=self.max_steps,
            obstacle_slots=self.obstacle_slots,
            v_max=self.v_max,
            drone_radius=self.drone_radius,
            r_safe=self.r_safe,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "dt": self.dt,
            "max_steps": self.max_steps,
            "obstacle_slots": self.obstacle_slots,
            "v_max": self.v_max,
            "drone_radius": self.drone_radius,
            "r_safe": self.r_safe,
            "spawn_jitter": self.spawn_jitter,
            "obstacle_jitter": self.obstacle_jitter,
            "shield": "on" if self.shield else "off",
            "drones": [list(map(float, d)) for d in self.drones],
            "obstacles": copy.deepcopy(self.obstacles),
            "gates": copy.deepcopy(self.gates),
        }

    @classmethod
    def from_dict(cls, doc: Any) -> "Scenario":
        return validate(doc)

    def build_world(self) -> WorldState:
        return make_world(
            self.drones,
            [_obstacle_from_doc(o) for o in self.obstacles],
            [_gate_from_doc(g) for g in self.gates],
            self.world_config(),
        )


# ---------------------------------------------------------------------------
# validation


def _vec3(value: Any, where: str) -> list[float]:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ScenarioError(where, "expected a list of 3 numbers")
    out = []
    for k, x in enumerate(value):
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise ScenarioError(f"{where}[{k}]", "expected a finite number")
        out.append(float(x))
    return out


def _number(doc: dict, key: str, where: str, default: Any, positive: bool = False, minimum: float | None = None):
    if key not in doc:
        return default
    x = doc[key]
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise ScenarioError(f"{where}{key}", "expected a finite number")
    if positive and x <= 0:
        raise ScenarioError(f"{where}{key}", "must be positive")
    if minimum is not None and x < minimum:
        raise ScenarioError(f"{where}{key}", f"must be >= {minimum}")
    return x


def _int(doc: dict, key: str, where: str, default: int, minimum: int) -> int:
    if key not in doc:
        return default
    x = doc[key]
    if isinstance(x, bool) or not isinstance(x, int):
        raise ScenarioError(f"{where}{key}", "expected an integer")
    if x < minimum:
        raise ScenarioError(f"{where}{key}", f"must be >= {minimum}")
    return x


def _validate_obstacle(o: Any, where: str) -> dict[str, Any]:
    if not isinstance(o, dict):
        raise ScenarioError(where, "expected a mapping")
    radius = _number(o, "radius", f"{where}.", 0.1, positive=True)
    motion = o.get("motion", {"type": "static"})
    if not isinstance(motion, dict):
        raise ScenarioError(f"{where}.motion", "expected a mapping")
    kind = motion.get("type", "static")
    mw = f"{where}.motion."
    if kind == "static":
        if "position" not in o:
            raise ScenarioError(f"{where}.position", "required for static obstacles")
        return {"position": _vec3(o["position"], f"{where}.position"), "radius": radius,
                "motion": {"type": "static"}}
    if kind == "linear":
        for key in ("start", "end"):
            if key not in motion:
                raise ScenarioError(f"{mw}{key}", "required for linear motion")
        m = {
            "type": "linear",
            "start": _vec3(motion["start"], f"{mw}start"),
            "end": _vec3(motion["end"], f"{mw}end"),
            "speed": _number(motion, "speed", mw, 0.5, minimum=0.0),
            "phase": _number(motion, "phase", mw, 0.0, minimum=0.0),
        }
        return {"radius": radius, "motion": m}
    if kind == "circular":
        if "center" not in motion:
            raise ScenarioError(f"{mw}center", "required for circular motion")
        m = {
            "type": "circular",
            "center": _vec3(motion["center"], f"{mw}center"),
            "radius": _number(motion, "radius", mw, 1.0, positive=True),
            "rate": _number(motion, "rate", mw, 0.5),
            "phase": _number(motion, "phase", mw, 0.0),
        }
        return {"radius": radius, "motion": m}
    raise ScenarioError(f"{mw}type", f"unknown motion type {kind!r}")


def _validate_gate(g: Any, where: str) -> dict[str, Any]:
    if not isinstance(g, dict):
        raise ScenarioError(where, "expected a mapping")
    for key in ("center", "normal"):
        if key not in g:
            raise ScenarioError(f"{where}.{key}", "required")
    normal = _vec3(g["normal"], f"{where}.normal")
    if abs(math.sqrt(sum(x * x for x in normal)) - 1.0) > 1e-9:
        raise ScenarioError(f"{where}.normal", "must be unit length")
    return {
        "center": _vec3(g["center"], f"{where}.center"),
        "normal": normal,
        "half_width": _number(g, "half_width", f"{where}.", 0.25, positive=True),
        "half_height": _number(g, "half_height", f"{where}.", 0.25, positive=True),
        "order": _int(g, "order", f"{where}.", 0, 0),
    }


def validate(doc: Any) -> Scenario:
    """Check a parsed scenario document and build a :class:`Scenario`."""
    if not isinstance(doc, dict):
        raise ScenarioError("<root>", "expected a mapping")
    known = {
        "name", "dt", "max_steps", "obstacle_slots", "v_max", "drone_radius", "r_safe",
        "spawn_jitter", "obstacle_jitter", "shield", "drones", "obstacles", "gates",
    }
    for key in doc:
        if key not in known:
            raise ScenarioError(str(key), "unknown field")
    name = doc.get("name", "unnamed")
    if not isinstance(name, str):
        raise ScenarioError("name", "expected a string")
    drones = doc.get("drones")
    if not isinstance(drones, list) or not drones:
        raise ScenarioError("drones", "expected a non-empty list of positions")
    drones = [_vec3(d, f"drones[{i}]") for i, d in enumerate(drones)]
    obstacles = doc.get("obstacles", []) or []
    if not isinstance(obstacles, list):
        raise ScenarioError("obstacles", "expected a list")
    obstacles = [_validate_obstacle(o, f"obstacles[{i}]") for i, o in enumerate(obstacles)]
    gates = doc.get("gates", []) or []
    if not isinstance(gates, list) or not gates:
        raise ScenarioError("gates", "expected a non-empty list")
    gates = [_validate_gate(g, f"gates[{i}]") for i, g in enumerate(gates)]
    orders = sorted(g["order"] for g in gates)
    if orders != list(range(len(gates))):
        raise ScenarioError("gates", "order indices must be a permutation of 0..G-1")
    shield = doc.get("shield", "off")
    if shield in (True, "on"):
        shield = True
    elif shield in (False, "off"):
        shield = False
    else:
        raise ScenarioError("shield", "expected on or off")
    return Scenario(
        name=name,
        drones=drones,
        obstacles=obstacles,
        gates=gates,
        dt=_number(doc, "dt", "", 0.05, positive=True),
        max_steps=_int(doc, "max_steps", "", 400, 1),
        obstacle_slots=_int(doc, "obstacle_slots", "", 2, 0),
        v_max=_number(doc, "v_max", "", 1.5, positive=True),
        drone_radius=_number(doc, "drone_radius", "", 0.06, positive=True),
        r_safe=_number(doc, "r_safe", "", 0.3, positive=True),
        spawn_jitter=_number(doc, "spawn_jitter", "", 0.0, minimum=0.0),
        obstacle_jitter=_number(doc, "obstacle_jitter", "", 0.0, minimum=0.0),
        shield=shield,
    )


def load_scenario(path: str | Path) -> Scenario:
    """Read a scenario file, or a built-in scenario by name."""
    p = Path(path)
    if not p.exists() and str(path) in BUILTIN:
        return builtin(str(path))
    with open(p) as fh:
        doc = yaml.safe_load(fh)
    return validate(doc)


def dump_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False, default_flow_style=None)


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(dump_scenario(scenario))


def _obstacle_from_doc(o: dict[str, Any]) -> ObstacleState:
    m = o["motion"]
    if m["type"] == "linear":
        motion = LinearMotion(tuple(m["start"]), tuple(m["end"]), m["speed"], m["phase"])
        pos = np.array(m["start"])
    elif m["type"] == "circular":
        motion = CircularMotion(tuple(m["center"]), m["radius"], m["rate"], m["phase"])
        pos = np.array(m["center"])
    else:
        motion = StaticMotion()
        pos = np.array(o["position"])
    return ObstacleState(position=pos, velocity=np.zeros(3), radius=o["radius"], motion=motion)


def _gate_from_doc(g: dict[str, Any]) -> GateSpec:
    return GateSpec(
        center=np.array(g["center"], dtype=np.float64),
        normal=np.array(g["normal"], dtype=np.float64),
        half_width=g["half_width"],
        half_height=g["half_height"],
        order=g["order"],
    )


# ---------------------------------------------------------------------------
# randomised resets and world serialisation


def sample_world(scenario: Scenario, rng: np.random.Generator, max_tries: int = 100) -> WorldState:
    """Initial world with jittered drones/obstacles; resamples overlapping draws."""
    base = scenario.build_world()
    for _ in range(max_tries):
        world = base.copy()
        if scenario.spawn_jitter > 0:
            world.positions = world.positions + rng.uniform(
                -scenario.spawn_jitter, scenario.spawn_jitter, size=world.positions.shape
            )
        obstacles = []
        for o in base.obstacles:
            m = o.motion
            if isinstance(m, StaticMotion):
                pos = o.position
                if scenario.obstacle_jitter > 0:
                    pos = pos + rng.uniform(-scenario.obstacle_jitter, scenario.obstacle_jitter, size=3)
                o = ObstacleState(pos, np.zeros(3), o.radius, m)
            elif scenario.obstacle_jitter > 0:
                if isinstance(m, LinearMotion):
                    span = 2.0 * float(np.linalg.norm(np.subtract(m.end, m.start)))
                    m = LinearMotion(m.start, m.end, m.speed, float(rng.uniform(0.0, span)) if span else 0.0)
                else:
                    m = CircularMotion(m.center, m.radius, m.rate, float(rng.uniform(0.0, 2 * math.pi)))
                o = obstacle_at(ObstacleState(o.position, o.velocity, o.radius, m), 0.0)
            obstacles.append(o)
        world.obstacles = obstacles
        # keep a safety margin at spawn so episodes do not start in a collision
        margin = replace(world, config=replace(world.config, drone_radius=world.config.drone_radius + 0.1))
        if not detect_collisions(margin).any():
            return world
    raise ScenarioError("spawn_jitter", "could not sample a collision-free start")


def motion_to_dict(m) -> dict[str, Any]:
    if isinstance(m, LinearMotion):
        return {"type": "linear", "start": list(m.start), "end": list(m.end), "speed": m.speed, "phase": m.phase}
    if isinstance(m, CircularMotion):
        return {"type": "circular", "center": list(m.center), "radius": m.radius, "rate": m.rate, "phase": m.phase}
    return {"type": "static"}


def world_to_dict(world: WorldState) -> dict[str, Any]:
    """Exact JSON-able snapshot (floats round-trip through repr)."""
    return {
        "step": world.step,
        "config": dict(world.config.__dict__),
        "positions": world.positions.tolist(),
        "orientations": world.orientations.tolist(),
        "velocities": world.velocities.tolist(),
        "angular_velocities": world.angular_velocities.tolist(),
        "alive": world.alive.tolist(),
        "next_gate": world.next_gate.tolist(),
        "obstacles": [
            {
                "position": o.position.tolist(),
                "velocity": o.velocity.tolist(),
                "radius": o.radius,
                "motion": motion_to_dict(o.motion),
            }
            for o in world.obstacles
        ],
        "gates": [
            {
                "center": g.center.tolist(),
                "normal": g.normal.tolist(),
                "half_width": g.half_width,
                "half_height": g.half_height,
                "order": g.order,
            }
            for g in world.gates
        ],
    }


def world_from_dict(doc: dict[str, Any]) -> WorldState:
    obstacles = []
    for o in doc["obstacles"]:
        m = o["motion"]
        if m["type"] == "linear":
            motion = LinearMotion(tuple(m["start"]), tuple(m["end"]), m["speed"], m["phase"])
        elif m["type"] == "circular":
            motion = CircularMotion(tuple(m["center"]), m["radius"], m["rate"], m["phase"])
        else:
            motion = StaticMotion()
        obstacles.append(ObstacleState(np.array(o["position"]), np.array(o["velocity"]), o["radius"], motion))
    return WorldState(
        positions=np.array(doc["positions"], dtype=np.float64).reshape(-1, 3),
        orientations=np.array(doc["orientations"], dtype=np.float64).reshape(-1, 4),
        velocities=np.array(doc["velocities"], dtype=np.float64).reshape(-1, 3),
        angular_velocities=np.array(doc["angular_velocities"], dtype=np.float64).reshape(-1, 3),
        alive=np.array(doc["alive"], dtype=bool),
        next_gate=np.array(doc["next_gate"], dtype=np.int64),
        obstacles=obstacles,
        gates=[_gate_from_doc(g) for g in doc["gates"]],
        config=WorldConfig(**doc["config"]),
        step=doc["step"],
    )


# ---------------------------------------------------------------------------
# environment


class SwarmEnv:
    """Resettable wrapper that owns one world and one private random stream."""

    def __init__(self, scenario: Scenario, rng: np.random.Generator):
        self.scenario = scenario
        self.rng = rng
        self.world = sample_world(scenario, rng)

    def reset(self) -> np.ndarray:
        self.world = sample_world(self.scenario, self.rng)
        return observe_all(self.world)

    def observe(self) -> np.ndarray:
        return observe_all(self.world)

    def step(self, actions: np.ndarray) -> StepResult:
        self.world, result = step_world(self.world, actions)
        return result


# ---------------------------------------------------------------------------
# built-in suite


def _static(x: float, y: float, z: float = 1.0, r: float = 0.1) -> dict[str, Any]:
    return {"position": [x, y, z], "radius": r, "motion": {"type": "static"}}


def _gate(c, n, hw=0.25, hh=0.25, order=0) -> dict[str, Any]:
    return {"center": list(map(float, c)), "normal": list(map(float, n)),
            "half_width": hw, "half_height": hh, "order": order}


def _smoke() -> Scenario:
    return Scenario(
        name="smoke",
        drones=[[0.0, 0.0, 1.0]],
        obstacles=[_static(1.5, 0.3)],
        gates=[_gate((3.0, 0.0, 1.0), (1.0, 0.0, 0.0))],
        obstacle_slots=1,
        spawn_jitter=0.2,
        obstacle_jitter=0.1,
    )


def _case1() -> Scenario:
    # four drones fly straight through a cluttered band and cross a finish plane
    ys = [-0.9, -0.3, 0.3, 0.9]
    obstacles = [
        _static(1.6, -0.6), _static(1.6, 0.0), _static(1.6, 0.6), _static(1.6, 1.2),
        _static(2.8, -0.9), _static(2.8, -0.3), _static(2.8, 0.3), _static(2.8, 0.9),
    ]
    return Scenario(
        name="case1",
        drones=[[0.0, y, 1.0] for y in ys],
        obstacles=obstacles,
        gates=[_gate((4.5, 0.0, 1.0), (1.0, 0.0, 0.0), hw=2.0, hh=1.0)],
        obstacle_slots=4,
        spawn_jitter=0.05,
        obstacle_jitter=0.05,
    )


def _case2() -> Scenario:
    # closed circuit around (3, 3): four gates on the sides of a 6 m square
    gates = [
        _gate((3.0, 0.0, 1.0), (1.0, 0.0, 0.0), hw=0.5, hh=0.5, order=0),
        _gate((6.0, 3.0, 1.0), (0.0, 1.0, 0.0), hw=0.5, hh=0.5, order=1),
        _gate((3.0, 6.0, 1.0), (-1.0, 0.0, 0.0), hw=0.5, hh=0.5, order=2),
        _gate((0.0, 3.0, 1.0), (0.0, -1.0, 0.0), hw=0.5, hh=0.5, order=3),
    ]
    obstacles = [
        _static(1.5, 0.6), _static(4.6, 0.6), _static(5.4, 1.6), _static(5.4, 4.5),
        _static(4.5, 5.4), _static(1.5, 5.4), _static(0.6, 4.5), _static(0.6, 1.6),
    ]
    return Scenario(
        name="case2",
        drones=[[0.0, -0.45, 1.0], [0.0, -0.15, 1.0], [0.0, 0.15, 1.0], [0.0, 0.45, 1.0]],
        obstacles=obstacles,
        gates=gates,
        obstacle_slots=4,
        max_steps=600,
        spawn_jitter=0.03,
        obstacle_jitter=0.05,
    )


def _real_mimic() -> Scenario:
    return Scenario(
        name="real-mimic",
        drones=[[0.0, -0.4, 1.0], [0.0, 0.4, 1.0]],
        obstacles=[
            _static(1.4, -0.2),
            _static(1.4, 0.35),
            {"radius": 0.1, "motion": {"type": "linear", "start": [3.6, -0.8, 1.0],
                                       "end": [3.6, 0.8, 1.0], "speed": 0.4, "phase": 0.0}},
        ],
        gates=[
            _gate((2.5, 0.0, 1.0), (1.0, 0.0, 0.0), hw=0.5, hh=0.35, order=0),
            _gate((5.0, 0.0, 1.0), (1.0, 0.0, 0.0), hw=0.5, hh=0.35, order=1),
        ],
        obstacle_slots=3,
        spawn_jitter=0.1,
        obstacle_jitter=0.1,
    )


BUILTIN = {
    "smoke": _smoke,
    "case1": _case1,
    "case2": _case2,
    "real-mimic": _real_mimic,
}


def builtin(name: str) -> Scenario:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise ScenarioError("name", f"no built-in scenario {name!r}") from None
