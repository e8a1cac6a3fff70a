"""Command-line entry point: ``swarmgate train|eval|compare|replay|scenario``.

Exit codes: 0 ok, 2 unreadable or unparsable input, 3 validation failure,
4 checkpoint/scenario shape mismatch, 5 training diverged.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from swarmgate.bench import (
    CheckpointMismatchError,
    Comparison,
    TrajectoryParseError,
    evaluate,
    fmt,
    load_agent,
    replay,
)
from swarmgate.mappo import TrainConfig, TrainingDivergedError, resume_state, train
from swarmgate.scenario import BUILTIN, Scenario, ScenarioError, builtin, dump_scenario, validate

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVALID = 3
EXIT_MISMATCH = 4
EXIT_DIVERGED = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _read_yaml(path: str | Path, what: str) -> Any:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"{what} file not found: {p}")
    try:
        with open(p) as fh:
            return yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else "?"
        raise CliError(EXIT_INPUT, f"{p}: parse error at line {line}: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise CliError(EXIT_INPUT, f"{p}: parse error: {exc}") from None


def read_scenario(arg: str) -> Scenario:
    if not Path(arg).exists() and arg in BUILTIN:
        return builtin(arg)
    doc = _read_yaml(arg, "scenario")
    try:
        return validate(doc)
    except ScenarioError as exc:
        raise CliError(EXIT_INVALID, f"{arg}: invalid field {exc.field!r}: {exc}") from None


def read_config(arg: str | None) -> TrainConfig:
    if arg is None:
        return TrainConfig()
    doc = _read_yaml(arg, "config") or {}
    if not isinstance(doc, dict):
        raise CliError(EXIT_INVALID, f"{arg}: expected a mapping of training settings")
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INVALID, f"{arg}: {exc}") from None


def read_agent(path: str, scenario: Scenario):
    if not Path(path).is_file():
        raise CliError(EXIT_INPUT, f"checkpoint file not found: {path}")
    try:
        return load_agent(path, scenario)
    except CheckpointMismatchError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: unreadable checkpoint ({exc})") from None


def _shield_flag(value: str | None, scenario: Scenario) -> bool:
    return scenario.shield if value is None else value == "on"


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    scenario = read_scenario(args.scenario)
    state = None
    if args.resume:
        read_agent(args.resume, scenario)  # existence and shape checks
        state, saved = resume_state(args.resume, scenario)
        config = read_config(args.config) if args.config else saved
    else:
        config = read_config(args.config)
    if args.updates is not None:
        doc = {k: getattr(config, k) for k in config.__dataclass_fields__}
        doc["updates"] = args.updates
        try:
            config = TrainConfig(**doc)
        except ValueError as exc:
            raise CliError(EXIT_INVALID, f"--updates: {exc}") from None
    if args.baseline:
        config = config.baseline()
    out = Path(args.out)

    def report(rec: dict) -> None:
        if args.quiet:
            return
        keys = ("mean_reward", "success_rate", "collision_rate", "explained_variance")
        print(f"update {rec['update']:>5}  steps {rec['env_steps']:>8}  " + "  ".join(f"{k} {fmt(rec[k])}" for k in keys))

    try:
        state, _ = train(config, scenario, args.seed, out_dir=out, state=state, on_update=report)
    except TrainingDivergedError as exc:
        print(f"error: {exc}; state saved to {out / 'diverged.npz'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {out / 'checkpoint.npz'} after {state.update_index} updates, {state.env_steps} env steps")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    scenario = read_scenario(args.scenario)
    agent = read_agent(args.checkpoint, scenario)
    if args.trials < 1:
        raise CliError(EXIT_INVALID, "--trials must be >= 1")
    report = evaluate(agent, scenario, args.trials, args.seed, _shield_flag(args.shield, scenario), args.out)
    print(report.table())
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = read_scenario(args.scenario)
    a = read_agent(args.checkpoint_a, scenario)
    b = read_agent(args.checkpoint_b, scenario)
    if args.trials < 1:
        raise CliError(EXIT_INVALID, "--trials must be >= 1")
    shield = _shield_flag(args.shield, scenario)
    out = Path(args.out) if args.out else None
    ra = evaluate(a, scenario, args.trials, args.seed, shield, out / "a" if out else None)
    rb = evaluate(b, scenario, args.trials, args.seed, shield, out / "b" if out else None)
    comp = Comparison.of(ra, rb)
    print(f"A = {args.checkpoint_a}\nB = {args.checkpoint_b}")
    print(comp.table())
    if out is not None:
        (out / "comparison.json").write_text(json.dumps(comp.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    if not Path(args.trajectory).is_file():
        raise CliError(EXIT_INPUT, f"trajectory file not found: {args.trajectory}")
    try:
        summary = replay(args.trajectory)
    except TrajectoryParseError as exc:
        raise CliError(EXIT_INPUT, f"{args.trajectory}: {exc}") from None
    print(f"steps {summary.steps}  drones {summary.drones}  total_reward {fmt(summary.total_reward)}  flags {len(summary.flags)}")
    for f in summary.flags:
        print(f"  step {f.step} drone {f.drone_id}: {f.kind}: {f.detail}")
    return EXIT_OK if summary.ok else 1


def cmd_scenario_validate(args: argparse.Namespace) -> int:
    sc = read_scenario(args.file)
    print(
        f"ok: {sc.name}: {sc.n_drones} drone(s), {len(sc.obstacles)} obstacle(s), "
        f"{len(sc.gates)} gate(s), observation width {sc.obs_dim}"
    )
    return EXIT_OK


def cmd_scenario_export(args: argparse.Namespace) -> int:
    if args.name not in BUILTIN:
        raise CliError(EXIT_INVALID, f"unknown built-in scenario {args.name!r}; choose from {', '.join(BUILTIN)}")
    text = dump_scenario(builtin(args.name))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarmgate", description="Drone swarm MAPPO with attention-weighted barrier penalties.")
    sub = parser.add_subparsers(dest="command", required=True)

    def seed_arg(p):
        p.add_argument("--seed", type=int, default=0, help="root seed (non-negative integer)")

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("scenario", help="scenario file or built-in name")
    p.add_argument("--config", help="training settings (YAML mapping of config fields)")
    seed_arg(p)
    p.add_argument("--updates", type=int, help="override the number of updates")
    p.add_argument("--out", default="runs/train", help="output directory")
    p.add_argument("--baseline", action="store_true", help="plain MAPPO: no barrier weights or barrier loss")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint with mean actions")
    p.add_argument("checkpoint")
    p.add_argument("scenario")
    p.add_argument("--trials", type=int, default=20)
    seed_arg(p)
    p.add_argument("--shield", choices=("on", "off"), help="default: the scenario's setting")
    p.add_argument("--out", help="directory for trajectories and report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="evaluate two checkpoints side by side")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("scenario")
    p.add_argument("--trials", type=int, default=20)
    seed_arg(p)
    p.add_argument("--shield", choices=("on", "off"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("replay", help="re-validate an exported trajectory")
    p.add_argument("trajectory")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("scenario", help="scenario utilities")
    ssub = p.add_subparsers(dest="scenario_command", required=True)
    q = ssub.add_parser("validate")
    q.add_argument("file")
    q.set_defaults(func=cmd_scenario_validate)
    q = ssub.add_parser("export", help="write a built-in scenario as YAML")
    q.add_argument("name")
    q.add_argument("--out")
    q.set_defaults(func=cmd_scenario_export)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", 0) < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
