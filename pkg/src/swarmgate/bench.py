"""Evaluation harness: mean-action rollouts, trajectory export, reports,
checkpoint comparison and trajectory replay checks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from swarmgate.mappo import Agent
from swarmgate.nn import load_checkpoint
from swarmgate.scenario import Scenario, sample_world, world_from_dict, world_to_dict
from swarmgate.shield import project_velocity, shield_constraints
from swarmgate.world import (
    REWARD_EPS,
    WorldState,
    nearest_obstacles,
    observe_all,
    obstacle_at,
    reward,
    step_world,
)

REPORT_FIELDS = (
    "trials",
    "success_rate",
    "collision_rate",
    "timeout_rate",
    "min_obstacle_clearance",
    "mean_separation_time_avg",
    "mean_separation_min_avg",
    "mean_mission_time",
    "mean_speed",
    "shield_interventions",
)


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class TrialResult:
    outcome: str  # "success" | "collision" | "timeout"
    steps: int
    min_obstacle_clearance: float
    separation_time_avg: float | None
    separation_min: float | None
    speed_sum: float
    speed_count: int
    shield_interventions: int


@dataclass
class EvalReport:
    trials: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    min_obstacle_clearance: float | None
    mean_separation_time_avg: float | None
    mean_separation_min_avg: float | None
    mean_mission_time: float | None
    mean_speed: float | None
    shield_interventions: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def table(self, title: str = "") -> str:
        rows = [(k, fmt(getattr(self, k))) for k in REPORT_FIELDS]
        width = max(len(k) for k, _ in rows)
        lines = [title] if title else []
        lines += [f"{k.ljust(width)}  {v}" for k, v in rows]
        return "\n".join(lines)


def fmt(x: Any) -> str:
    """Six significant digits for floats; ints and missing values verbatim."""
    if x is None:
        return "n/a"
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def round6(x: Any) -> Any:
    if isinstance(x, float):
        return float(f"{x:.6g}")
    if isinstance(x, dict):
        return {k: round6(v) for k, v in x.items()}
    if isinstance(x, list):
        return [round6(v) for v in x]
    return x


# ---------------------------------------------------------------------------
# loading


def load_agent(path: str | Path, scenario: Scenario) -> Agent:
    ckpt = load_checkpoint(path)
    agent = Agent.from_nets(ckpt.nets, ckpt.meta)
    if (agent.n_drones, agent.obs_dim, agent.n_constraints) != (
        scenario.n_drones,
        scenario.obs_dim,
        scenario.n_constraints,
    ):
        raise CheckpointMismatchError(
            f"checkpoint expects {agent.n_drones} drones, observation width {agent.obs_dim} and "
            f"{agent.n_constraints} constraints; scenario {scenario.name!r} has {scenario.n_drones}, "
            f"{scenario.obs_dim} and {scenario.n_constraints}"
        )
    return agent


# ---------------------------------------------------------------------------
# evaluation


def trial_seeds(seed: int, trials: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(trials)


def _shield_actions(agent: Agent, world: WorldState, obs: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, int]:
    """Project each active drone's command onto its barrier halfspaces."""
    cfg = world.config
    K = cfg.obstacle_slots
    theta = agent.theta(obs)
    out = actions.copy()
    count = 0
    active = world.active
    for i in np.flatnonzero(active):
        p = world.positions[i]
        others, slopes = [], []
        for slot, j in enumerate(nearest_obstacles(world, i, K)):
            o = world.obstacles[j]
            others.append((o.position, o.velocity, o.radius + cfg.drone_radius + cfg.r_safe))
            slopes.append(theta[i, slot])
        peers = [j for j in range(world.n_drones) if j != i and active[j]]
        peers.sort(key=lambda j: float(np.linalg.norm(world.positions[j] - p)))
        for slot, j in enumerate(peers):
            others.append((world.positions[j], world.velocities[j], 2 * cfg.drone_radius + cfg.r_safe))
            slopes.append(theta[i, K + slot])
        proj = project_velocity(out[i], shield_constraints(p, others, slopes))
        if proj.intervened:
            count += 1
            out[i] = proj.velocity
    return out, count


def _drone_records(world: WorldState, rewards: np.ndarray, shielded: np.ndarray) -> list[dict]:
    return [
        {
            "type": "drone",
            "step": world.step,
            "drone_id": i,
            "p": world.positions[i].tolist(),
            "v": world.velocities[i].tolist(),
            "reward": float(rewards[i]),
            "alive": bool(world.alive[i]),
            "next_gate": int(world.next_gate[i]),
            "shielded": bool(shielded[i]),
        }
        for i in range(world.n_drones)
    ]


def _obstacle_record(world: WorldState) -> dict:
    return {"type": "obstacles", "step": world.step, "positions": [o.position.tolist() for o in world.obstacles]}


def run_trial(
    agent: Agent,
    scenario: Scenario,
    seed_seq: np.random.SeedSequence,
    shield: bool = False,
    records: list[dict] | None = None,
) -> TrialResult:
    """One deterministic mean-action episode."""
    world = sample_world(scenario, np.random.default_rng(seed_seq))
    n = world.n_drones
    if records is not None:
        records.append({"type": "header", "scenario": scenario.name, "shield": shield, "world": world_to_dict(world)})
        records.extend(_drone_records(world, np.zeros(n), np.zeros(n, dtype=bool)))
        records.append(_obstacle_record(world))
    stats = _TrialStats(n)
    stats.observe(world)
    collided = False
    interventions = 0
    done = False
    while not done:
        obs = observe_all(world)
        actions = agent.mean_action(obs.reshape(1, -1))[0].reshape(n, 3)
        shielded = np.zeros(n, dtype=bool)
        if shield:
            safe, _ = _shield_actions(agent, world, obs, actions)
            shielded = np.any(safe != actions, axis=1)
            interventions += int(shielded.sum())
            actions = safe
        was_active = world.active
        world, res = step_world(world, actions)
        collided |= bool(res.collided.any())
        stats.speeds(world, was_active)
        stats.observe(world)
        done = res.done
        if records is not None:
            records.extend(_drone_records(world, res.rewards, shielded))
            records.append(_obstacle_record(world))
    if collided:
        outcome = "collision"
    elif world.finished.all():
        outcome = "success"
    else:
        outcome = "timeout"
    return stats.result(outcome, world.step, interventions)


class _TrialStats:
    def __init__(self, n: int):
        self.n = n
        self.min_clear = math.inf
        self.sep_sum = 0.0
        self.sep_count = 0
        self.sep_min = math.inf
        self.speed_sum = 0.0
        self.speed_count = 0

    def observe(self, world: WorldState) -> None:
        active = world.active
        P = world.positions
        r = world.config.drone_radius
        for o in world.obstacles:
            d = np.linalg.norm(P[active] - o.position, axis=1) - o.radius - r
            if d.size:
                self.min_clear = min(self.min_clear, float(d.min()))
        idx = np.flatnonzero(active)
        if len(idx) > 1:
            diff = P[idx][:, None, :] - P[idx][None, :, :]
            dist = np.linalg.norm(diff, axis=2)
            iu = np.triu_indices(len(idx), 1)
            pair = dist[iu]
            self.sep_sum += float(pair.mean())
            self.sep_count += 1
            self.sep_min = min(self.sep_min, float(pair.min()))

    def speeds(self, world: WorldState, was_active: np.ndarray) -> None:
        v = np.linalg.norm(world.velocities[was_active], axis=1)
        self.speed_sum += float(v.sum())
        self.speed_count += int(v.size)

    def result(self, outcome: str, steps: int, interventions: int) -> TrialResult:
        return TrialResult(
            outcome=outcome,
            steps=steps,
            min_obstacle_clearance=max(self.min_clear, 0.0) if math.isfinite(self.min_clear) else math.nan,
            separation_time_avg=self.sep_sum / self.sep_count if self.sep_count else None,
            separation_min=self.sep_min if math.isfinite(self.sep_min) else None,
            speed_sum=self.speed_sum,
            speed_count=self.speed_count,
            shield_interventions=interventions,
        )


def aggregate(results: Iterable[TrialResult], dt: float) -> EvalReport:
    results = list(results)
    T = len(results)
    outcomes = [r.outcome for r in results]

    def mean_or_none(xs):
        xs = [x for x in xs if x is not None and math.isfinite(x)]
        return float(np.mean(xs)) if xs else None

    clears = [r.min_obstacle_clearance for r in results if math.isfinite(r.min_obstacle_clearance)]
    speed_count = sum(r.speed_count for r in results)
    return EvalReport(
        trials=T,
        success_rate=100.0 * outcomes.count("success") / T,
        collision_rate=100.0 * outcomes.count("collision") / T,
        timeout_rate=100.0 * outcomes.count("timeout") / T,
        min_obstacle_clearance=min(clears) if clears else None,
        mean_separation_time_avg=mean_or_none(r.separation_time_avg for r in results),
        mean_separation_min_avg=mean_or_none(r.separation_min for r in results),
        mean_mission_time=mean_or_none(r.steps * dt for r in results if r.outcome == "success"),
        mean_speed=sum(r.speed_sum for r in results) / speed_count if speed_count else None,
        shield_interventions=sum(r.shield_interventions for r in results),
    )


def evaluate(
    agent: Agent,
    scenario: Scenario,
    trials: int,
    seed: int,
    shield: bool = False,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """Mean-action evaluation over ``trials`` episodes with derived per-trial seeds."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results = []
    for k, seq in enumerate(trial_seeds(seed, trials)):
        records: list[dict] | None = [] if out is not None else None
        results.append(run_trial(agent, scenario, seq, shield, records))
        if out is not None:
            write_jsonl(out / f"trajectory_{k:04d}.jsonl", records)
    report = aggregate(results, scenario.dt)
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return report


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# comparison


@dataclass
class Comparison:
    a: EvalReport
    b: EvalReport
    deltas: dict[str, float | None] = field(default_factory=dict)

    @classmethod
    def of(cls, a: EvalReport, b: EvalReport) -> "Comparison":
        deltas: dict[str, float | None] = {}
        for k in REPORT_FIELDS:
            if k == "trials":
                continue
            x, y = getattr(a, k), getattr(b, k)
            deltas[k] = None if x is None or y is None else y - x
        return cls(a, b, deltas)

    def to_dict(self) -> dict[str, Any]:
        return {"a": self.a.to_dict(), "b": self.b.to_dict(), "delta_b_minus_a": self.deltas}

    def table(self, name_a: str = "A", name_b: str = "B") -> str:
        width = max(len(k) for k in REPORT_FIELDS)
        head = f"{'metric'.ljust(width)}  {name_a:>12}  {name_b:>12}  {'B - A':>12}"
        lines = [head, "-" * len(head)]
        for k in REPORT_FIELDS:
            d = self.deltas.get(k)
            lines.append(
                f"{k.ljust(width)}  {fmt(getattr(self.a, k)):>12}  {fmt(getattr(self.b, k)):>12}  "
                f"{fmt(d) if k != 'trials' else '':>12}"
            )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# replay


@dataclass
class ReplayFlag:
    step: int
    drone_id: int
    kind: str
    detail: str


@dataclass
class ReplaySummary:
    steps: int
    drones: int
    total_reward: float
    flags: list[ReplayFlag]

    @property
    def ok(self) -> bool:
        return not self.flags


class TrajectoryParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_trajectory(path: str | Path) -> tuple[dict, list[dict]]:
    header = None
    drones: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryParseError(lineno, f"invalid JSON ({exc.msg})") from None
            kind = rec.get("type") if isinstance(rec, dict) else None
            if kind == "header":
                header = rec
            elif kind == "drone":
                missing = {"step", "drone_id", "p", "v", "reward", "alive", "next_gate"} - set(rec)
                if missing:
                    raise TrajectoryParseError(lineno, f"missing field(s) {sorted(missing)}")
                drones.append(rec)
            elif kind != "obstacles":
                raise TrajectoryParseError(lineno, f"unknown record type {kind!r}")
    if header is None:
        raise TrajectoryParseError(1, "no header record")
    return header, drones


def replay(path: str | Path, tol: float = 1e-9) -> ReplaySummary:
    """Check kinematic consistency and recompute rewards from positions.

    Positions are compared against the path obtained by integrating the logged
    velocities from the previous logged position, so a single corrupted row
    produces one flag at its own step. All problems found at one (step, drone)
    are merged into a single flag.
    """
    header, records = read_trajectory(path)
    world = world_from_dict(header["world"])
    dt = world.config.dt
    G = len(world.gates)
    by_drone: dict[int, list[dict]] = {}
    for r in records:
        by_drone.setdefault(r["drone_id"], []).append(r)
    flags: list[ReplayFlag] = []
    total = 0.0
    steps = 0
    for i, seq in sorted(by_drone.items()):
        seq.sort(key=lambda r: r["step"])
        ref = np.array(seq[0]["p"], dtype=np.float64)
        for prev, cur in zip(seq, seq[1:]):
            problems = []
            p1, v = np.array(cur["p"]), np.array(cur["v"])
            expected_p = ref + v * dt
            err = float(np.linalg.norm(p1 - expected_p))
            if err > tol:
                problems.append(("kinematics", f"|dp - v dt| = {err:.3e}"))
            ref = expected_p
            expected = _replayed_reward(world, prev, cur, G)
            if abs(expected - cur["reward"]) > tol * max(1.0, abs(expected)):
                problems.append(("reward", f"logged {cur['reward']!r}, recomputed {expected!r}"))
            if problems:
                flags.append(
                    ReplayFlag(cur["step"], i, "+".join(k for k, _ in problems), "; ".join(d for _, d in problems))
                )
            total += cur["reward"]
        steps = max(steps, seq[-1]["step"])
    return ReplaySummary(steps=steps, drones=len(by_drone), total_reward=total, flags=flags)


def _replayed_reward(world: WorldState, prev: dict, cur: dict, G: int) -> float:
    active_before = prev["alive"] and prev["next_gate"] < G
    if not active_before:
        return 0.0
    if not cur["alive"]:
        return reward(0.0, True)
    if cur["next_gate"] > prev["next_gate"]:
        return reward(0.0, False)
    center = world.gates[cur["next_gate"]].center
    return reward(float(np.linalg.norm(np.array(cur["p"]) - center)), False)
