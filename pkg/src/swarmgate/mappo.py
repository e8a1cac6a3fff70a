"""Centralized MAPPO with attention-CBF penalty weights.

One actor maps the joint observation (all drones concatenated) to Gaussian
means for every drone's velocity command; one critic maps it to a scalar
value. The CBF network produces per-drone, per-constraint weights that scale
cost advantages inside the clipped surrogate (a Lagrangian-style penalty whose
multipliers come from a network instead of scalars).

Training alternates on-policy rollout collection with several epochs of
mini-batch updates; the rollout buffer is discarded after every update.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from swarmgate.attention import (
    CbfTargetConfig,
    attention_backward,
    cbf_forward,
    cbf_loss,
    init_cbf_params,
    target_from_clearance,
)
from swarmgate.nn import (
    Checkpoint,
    NumericInputError,
    OptimState,
    ParamSet,
    clip_grad_norm,
    init_params,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    optim_step,
    save_checkpoint,
    soft_update,
)
from swarmgate.scenario import Scenario, SwarmEnv, world_from_dict, world_to_dict
from swarmgate.world import constraint_clearances

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
LOG_2PI = math.log(2.0 * math.pi)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    actor_lr: float = 5e-4
    critic_lr: float = 5e-3
    cbf_lr: float = 1e-3
    clip_eps: float = 0.1
    gae_lambda: float = 0.95
    gamma: float = 0.95
    cbf_coef: float = 0.1  # c2
    value_coef: float = 0.5  # c1
    tau: float = 0.005
    horizon: int = 2048
    n_envs: int = 4
    epochs: int = 10
    minibatch: int = 256
    cost_threshold: float = 0.0
    use_cbf: bool = True
    reward_scale: float = 0.01
    max_grad_norm: float = 0.5
    log_std_init: float = -0.5
    actor_hidden: tuple[int, ...] = (128, 128)
    critic_hidden: tuple[int, ...] = (128, 128)
    key_dim: int = 32
    h_dim: int = 32
    cbf_hidden: tuple[int, ...] = (1024, 256)
    kappa: float = 0.5
    w_max: float = 10.0
    delta: float = 0.01
    updates: int = 100
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("actor_lr", "critic_lr", "cbf_lr", "tau", "reward_scale"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        for name in ("gamma", "gae_lambda"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.cbf_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        for name in ("n_envs", "epochs", "minibatch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.horizon < 0 or self.updates < 0:
            raise ValueError("horizon and updates must be non-negative")
        for name in ("actor_hidden", "critic_hidden", "cbf_hidden"):
            setattr(self, name, tuple(int(x) for x in getattr(self, name)))

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown train config field(s): {', '.join(sorted(unknown))}")
        return cls(**doc)

    def baseline(self) -> "TrainConfig":
        """Plain MAPPO: no CBF weights, no CBF loss."""
        doc = asdict(self)
        doc.update(use_cbf=False, cbf_coef=0.0)
        return TrainConfig(**doc)

    @property
    def target_cfg(self) -> CbfTargetConfig:
        return CbfTargetConfig(kappa=self.kappa, w_max=self.w_max, delta=self.delta)


# ---------------------------------------------------------------------------
# networks


@dataclass
class Agent:
    actor: ParamSet
    critic: ParamSet
    cbf: ParamSet
    actor_target: ParamSet
    critic_target: ParamSet
    cbf_target: ParamSet
    n_drones: int
    obs_dim: int

    @classmethod
    def init(cls, scenario: Scenario, config: TrainConfig, rng: np.random.Generator) -> "Agent":
        n, D = scenario.n_drones, scenario.obs_dim
        joint = n * D
        actor = init_params([joint, *config.actor_hidden, 3 * n], rng)
        actor["log_std"] = np.full(3 * n, config.log_std_init)
        critic = init_params([joint, *config.critic_hidden, 1], rng)
        cbf = init_cbf_params(
            scenario.n_constraints, rng, key_dim=config.key_dim, h_dim=config.h_dim, hidden=config.cbf_hidden
        )
        return cls(actor, critic, cbf, actor.copy(), critic.copy(), cbf.copy(), n, D)

    def nets(self) -> dict[str, ParamSet]:
        return {
            "actor": self.actor,
            "critic": self.critic,
            "cbf": self.cbf,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
            "cbf_target": self.cbf_target,
        }

    @classmethod
    def from_nets(cls, nets: dict[str, ParamSet], meta: dict) -> "Agent":
        return cls(
            nets["actor"], nets["critic"], nets["cbf"],
            nets["actor_target"], nets["critic_target"], nets["cbf_target"],
            meta["n_drones"], meta["obs_dim"],
        )

    @property
    def n_constraints(self) -> int:
        i = 0
        while f"head.l{i + 1}.W" in self.cbf:
            i += 1
        return self.cbf[f"head.l{i}.W"].shape[0]

    def mean_action(self, joint_obs: np.ndarray) -> np.ndarray:
        mean, _ = actor_forward(self.actor, joint_obs)
        return mean

    def value(self, joint_obs: np.ndarray) -> np.ndarray:
        v, _ = mlp_forward(self.critic, np.atleast_2d(joint_obs))
        return v[:, 0]

    def theta(self, drone_obs: np.ndarray) -> np.ndarray:
        out, _ = cbf_forward(self.cbf, drone_obs)
        return out.theta


def actor_forward(actor: ParamSet, joint_obs: np.ndarray):
    return mlp_forward(actor, np.atleast_2d(joint_obs))


def clamped_log_std(actor: ParamSet) -> np.ndarray:
    return np.clip(actor["log_std"], LOG_STD_MIN, LOG_STD_MAX)


def gaussian_logp(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


# ---------------------------------------------------------------------------
# losses


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates along axis 0.

    ``values`` has one more row than ``rewards``: the last row is the bootstrap
    value of the state after the final step. Extra trailing axes are treated as
    independent sequences (``dones`` broadcasts against them).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or values.shape[1:] != rewards.shape[1:]:
        raise ValueError(f"values must have shape {(T + 1, *rewards.shape[1:])}, got {values.shape}")
    if dones.shape[0] != T:
        raise ValueError(f"dones must have {T} rows, got {dones.shape[0]}")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:T]


def normalize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean()) / (x.std() + 1e-8)


def ppo_loss(
    logp_new: np.ndarray,
    logp_old: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Negated clipped surrogate.

    Returns ``(loss, dL/dlogp_new, dL/dadvantages)``.
    """
    logp_new = np.asarray(logp_new, dtype=np.float64)
    logp_old = np.asarray(logp_old, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if not logp_new.shape == logp_old.shape == adv.shape:
        raise ValueError("log-probabilities and advantages must be aligned")
    B = adv.size
    with np.errstate(over="ignore"):
        ratio = np.exp(logp_new - logp_old)
    bad = np.flatnonzero(~np.isfinite(ratio))
    if bad.size:
        raise NumericInputError(f"non-finite probability ratio at sample {int(bad[0])}")
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_obj = ratio * adv
    clipped_obj = clipped * adv
    use_unclipped = unclipped_obj <= clipped_obj
    loss = -float(np.mean(np.where(use_unclipped, unclipped_obj, clipped_obj)))
    g_logp = np.where(use_unclipped, -adv * ratio / B, 0.0)
    g_adv = -np.where(use_unclipped, ratio, clipped) / B
    return loss, g_logp, g_adv


def value_loss(values: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    values = np.asarray(values, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if values.shape != targets.shape:
        raise ValueError("values and targets must be aligned")
    diff = values - targets
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def constrained_policy_objective(
    advantages: np.ndarray,
    cost_advantages: np.ndarray,
    theta: np.ndarray,
    cost_gaps: np.ndarray,
) -> np.ndarray:
    """Effective advantage A - sum_j theta_j * (A_cost_j + d_j).

    ``cost_advantages`` and ``theta`` are (B, ..., m) with any constraint
    layout after the batch axis; ``cost_gaps`` broadcasts against them.
    """
    adv = np.asarray(advantages, dtype=np.float64)
    A_c = np.asarray(cost_advantages, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if A_c.shape != theta.shape:
        raise ValueError(f"cost advantages {A_c.shape} and theta {theta.shape} differ")
    if A_c.shape[0] != adv.shape[0]:
        raise ValueError("batch sizes differ")
    penalty = theta * (A_c + cost_gaps)
    return adv - penalty.reshape(len(adv), -1).sum(axis=1)


def total_loss(l_ppo: float, l_value: float, l_cbf: float, c1: float, c2: float) -> float:
    if c1 < 0 or c2 < 0:
        raise ValueError("loss coefficients must be non-negative")
    return l_ppo + c1 * l_value + c2 * l_cbf


def explained_variance(values: np.ndarray, returns: np.ndarray) -> float:
    var = float(np.var(returns))
    if var == 0.0:
        return float("nan")
    return 1.0 - float(np.var(returns - values)) / var


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class EpisodeRecord:
    reward: float
    steps: int
    collided: bool
    success: bool


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, E, n, D)
    actions: np.ndarray  # (T, E, 3n)
    logp: np.ndarray  # (T, E)
    rewards: np.ndarray  # (T, E) summed over drones, unscaled
    costs: np.ndarray  # (T, E, n, m)
    values: np.ndarray  # (T + 1, E), last row is the bootstrap
    dones: np.ndarray  # (T, E)
    theta: np.ndarray  # (T, E, n, m)
    cbf_targets: np.ndarray  # (T, E, n, m)
    episodes: list[EpisodeRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return self.rewards.size

    def clear(self) -> None:
        T0 = slice(0, 0)
        for name in ("obs", "actions", "logp", "rewards", "costs", "dones", "theta", "cbf_targets"):
            setattr(self, name, getattr(self, name)[T0])
        self.values = self.values[T0]
        self.episodes = []


class EnvPool:
    """Environments plus running per-episode accumulators."""

    def __init__(self, scenario: Scenario, n_envs: int, seed_seq: np.random.SeedSequence):
        self.scenario = scenario
        self.envs = [SwarmEnv(scenario, np.random.default_rng(s)) for s in seed_seq.spawn(n_envs)]
        self.ep_reward = np.zeros(n_envs)
        self.ep_steps = np.zeros(n_envs, dtype=np.int64)
        self.ep_collided = np.zeros(n_envs, dtype=bool)

    def observe(self) -> np.ndarray:
        return np.stack([e.observe() for e in self.envs])

    def state(self) -> dict:
        return {
            "worlds": [world_to_dict(e.world) for e in self.envs],
            "rngs": [e.rng.bit_generator.state for e in self.envs],
            "ep_reward": self.ep_reward.tolist(),
            "ep_steps": self.ep_steps.tolist(),
            "ep_collided": self.ep_collided.tolist(),
        }

    def restore(self, state: dict) -> None:
        for env, w, r in zip(self.envs, state["worlds"], state["rngs"]):
            env.world = world_from_dict(w)
            env.rng.bit_generator.state = r
        self.ep_reward = np.array(state["ep_reward"], dtype=np.float64)
        self.ep_steps = np.array(state["ep_steps"], dtype=np.int64)
        self.ep_collided = np.array(state["ep_collided"], dtype=bool)


def all_clearances(world, m: int) -> np.ndarray:
    """Constraint-slot clearances for every drone, (n, m); empty slots NaN."""
    return np.stack([constraint_clearances(world, i) for i in range(world.n_drones)]).reshape(world.n_drones, m)


def step_costs(clear: np.ndarray, was_active: np.ndarray, r_safe: float) -> np.ndarray:
    """max(0, r_safe - clearance) per drone and constraint slot; zero for idle drones."""
    cost = np.where(np.isnan(clear), 0.0, np.maximum(0.0, r_safe - np.nan_to_num(clear, nan=r_safe)))
    return np.where(was_active[:, None], cost, 0.0)


def _batched(fn, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([fn(x[i : i + chunk]) for i in range(0, len(x), chunk)]) if len(x) else fn(x)


def collect_rollout(
    pool: EnvPool,
    agent: Agent,
    horizon: int,
    rng: np.random.Generator,
    config: TrainConfig,
) -> RolloutBuffer:
    """Run the stochastic policy for ``horizon`` steps in every environment.

    Values and theta depend only on the (frozen) parameters and the recorded
    observations, so they are evaluated in one batched pass at the end.
    """
    E = len(pool.envs)
    n, D, m = agent.n_drones, agent.obs_dim, agent.n_constraints
    tcfg = CbfTargetConfig(config.kappa, config.w_max, config.delta, pool.scenario.r_safe)
    r_safe = pool.scenario.r_safe
    buf = RolloutBuffer(
        obs=np.zeros((horizon, E, n, D)),
        actions=np.zeros((horizon, E, 3 * n)),
        logp=np.zeros((horizon, E)),
        rewards=np.zeros((horizon, E)),
        costs=np.zeros((horizon, E, n, m)),
        values=np.zeros((horizon + 1, E)),
        dones=np.zeros((horizon, E)),
        theta=np.zeros((horizon, E, n, m)),
        cbf_targets=np.zeros((horizon, E, n, m)),
    )
    obs = pool.observe()
    clear = np.stack([all_clearances(env.world, m) for env in pool.envs])
    log_std = clamped_log_std(agent.actor)
    std = np.exp(log_std)
    for t in range(horizon):
        mean, _ = actor_forward(agent.actor, obs.reshape(E, n * D))
        actions = mean + std * rng.standard_normal(mean.shape)
        buf.obs[t] = obs
        buf.actions[t] = actions
        buf.logp[t] = gaussian_logp(actions, mean, log_std)
        buf.cbf_targets[t] = target_from_clearance(clear, tcfg)
        for e, env in enumerate(pool.envs):
            was_active = env.world.active
            try:
                res = env.step(actions[e].reshape(n, 3))
            except Exception as exc:
                raise RuntimeError(f"environment {e} failed at rollout step {t}: {exc}") from exc
            total = res.rewards.sum()
            buf.rewards[t, e] = total
            buf.costs[t, e] = step_costs(all_clearances(env.world, m), was_active, r_safe)
            pool.ep_reward[e] += total
            pool.ep_steps[e] += 1
            pool.ep_collided[e] |= bool(res.collided.any())
            if res.done:
                buf.dones[t, e] = 1.0
                success = bool(env.world.finished.all() and not pool.ep_collided[e])
                buf.episodes.append(
                    EpisodeRecord(float(pool.ep_reward[e]), int(pool.ep_steps[e]), bool(pool.ep_collided[e]), success)
                )
                pool.ep_reward[e] = 0.0
                pool.ep_steps[e] = 0
                pool.ep_collided[e] = False
                obs[e] = env.reset()
            else:
                obs[e] = res.observations
            clear[e] = all_clearances(env.world, m)
    joint = np.concatenate([buf.obs.reshape(horizon * E, n * D), obs.reshape(E, n * D)])
    buf.values = _batched(agent.value, joint).reshape(horizon + 1, E)
    if config.use_cbf and horizon:
        flat = buf.obs.reshape(horizon * E * n, D)
        buf.theta = _batched(agent.theta, flat).reshape(horizon, E, n, m)
    return buf


# ---------------------------------------------------------------------------
# update


@dataclass
class Optimizers:
    actor: OptimState
    critic: OptimState
    cbf: OptimState

    @classmethod
    def init(cls, agent: Agent, config: TrainConfig) -> "Optimizers":
        return cls(
            OptimState.for_params(agent.actor, config.actor_lr),
            OptimState.for_params(agent.critic, config.critic_lr),
            OptimState.for_params(agent.cbf, config.cbf_lr),
        )


@dataclass
class Batch:
    joint_obs: np.ndarray  # (B, n*D)
    drone_obs: np.ndarray  # (B, n, D)
    actions: np.ndarray  # (B, 3n)
    logp_old: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,) normalized
    returns: np.ndarray  # (B,)
    cost_adv: np.ndarray  # (B, n, m)
    cbf_targets: np.ndarray  # (B, n, m)

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class LossInfo:
    ppo: float
    value: float
    cbf: float
    total: float


def loss_and_grads(
    agent: Agent,
    batch: Batch,
    cost_gaps: np.ndarray,
    config: TrainConfig,
) -> tuple[LossInfo, dict[str, ParamSet]]:
    """Loss components and routed gradients for one mini-batch.

    Actor gets dL_PPO, critic c1 * dL_V. The CBF network gets c2 * dL_CBF
    minus dL_PPO: it ascends the surrogate loss (the inner minimisation of the
    penalised objective) while regressing onto the clearance targets.
    """
    B = len(batch.advantages)
    n, D = agent.n_drones, agent.obs_dim

    mean, acache = actor_forward(agent.actor, batch.joint_obs)
    log_std = clamped_log_std(agent.actor)
    logp = gaussian_logp(batch.actions, mean, log_std)

    if config.use_cbf:
        out, ccache = cbf_forward(agent.cbf, batch.drone_obs.reshape(B * n, D))
        theta = out.theta.reshape(batch.cost_adv.shape)
        adv = constrained_policy_objective(batch.advantages, batch.cost_adv, theta, cost_gaps)
    else:
        theta = None
        adv = batch.advantages
    l_ppo, g_logp, g_adv = ppo_loss(logp, batch.logp_old, adv, config.clip_eps)

    inv_var = np.exp(-2.0 * log_std)
    resid = batch.actions - mean
    g_mean = g_logp[:, None] * resid * inv_var
    actor_grads, _ = mlp_backward(acache, g_mean)
    g_log_std = (g_logp[:, None] * (resid * resid * inv_var - 1.0)).sum(axis=0)
    inside = (agent.actor["log_std"] >= LOG_STD_MIN) & (agent.actor["log_std"] <= LOG_STD_MAX)
    actor_grads["log_std"] = np.where(inside, g_log_std, 0.0)

    v, vcache = mlp_forward(agent.critic, batch.joint_obs)
    l_v, g_v = value_loss(v[:, 0], batch.returns)
    critic_grads, _ = mlp_backward(vcache, config.value_coef * g_v[:, None])

    l_cbf = 0.0
    if config.use_cbf:
        l_cbf, g_theta = cbf_loss(theta.reshape(B, -1), batch.cbf_targets.reshape(B, -1))
        # dL_PPO/dtheta = g_adv * -(A_c + d); ascent on L_PPO flips that sign
        g_from_ppo = g_adv[:, None, None] * (batch.cost_adv + cost_gaps)
        g_total = config.cbf_coef * g_theta.reshape(theta.shape) + g_from_ppo
        cbf_grads, _ = attention_backward(agent.cbf, ccache, grad_theta=g_total.reshape(B * n, -1))
    else:
        cbf_grads = agent.cbf.zeros_like()

    info = LossInfo(l_ppo, l_v, l_cbf, total_loss(l_ppo, l_v, l_cbf, config.value_coef, config.cbf_coef))
    return info, {"actor": actor_grads, "critic": critic_grads, "cbf": cbf_grads}


def make_batch(buf: RolloutBuffer, config: TrainConfig) -> tuple[Batch, np.ndarray, dict]:
    T, E = buf.rewards.shape
    n, D = buf.obs.shape[2], buf.obs.shape[3]
    adv, returns = compute_gae(
        buf.rewards * config.reward_scale, buf.values, buf.dones, config.gamma, config.gae_lambda
    )
    dones_c = buf.dones[:, :, None, None]
    cost_adv, _ = compute_gae(
        buf.costs, np.zeros((T + 1, *buf.costs.shape[1:])), dones_c, config.gamma, config.gae_lambda
    )
    # no cost critic: cost advantages are lambda-discounted cost-to-go
    cost_gaps = cost_adv.reshape(T * E, *cost_adv.shape[2:]).mean(axis=0) - config.cost_threshold
    N = T * E
    batch = Batch(
        joint_obs=buf.obs.reshape(N, n * D),
        drone_obs=buf.obs.reshape(N, n, D),
        actions=buf.actions.reshape(N, -1),
        logp_old=buf.logp.reshape(N),
        advantages=normalize(adv.reshape(N)),
        returns=returns.reshape(N),
        cost_adv=cost_adv.reshape(N, *cost_adv.shape[2:]),
        cbf_targets=buf.cbf_targets.reshape(N, *buf.cbf_targets.shape[2:]),
    )
    stats = {"explained_variance": explained_variance(buf.values[:T].ravel(), returns.ravel())}
    return batch, cost_gaps, stats


def update(
    agent: Agent,
    optims: Optimizers,
    buf: RolloutBuffer,
    rng: np.random.Generator,
    config: TrainConfig,
) -> dict:
    batch, cost_gaps, stats = make_batch(buf, config)
    N = len(batch.advantages)
    infos: list[LossInfo] = []
    for _ in range(config.epochs):
        perm = rng.permutation(N)
        for start in range(0, N, config.minibatch):
            idx = perm[start : start + config.minibatch]
            info, grads = loss_and_grads(agent, batch.take(idx), cost_gaps, config)
            if not math.isfinite(info.total):
                raise TrainingDivergedError(f"non-finite loss {info}")
            infos.append(info)
            for name in ("actor", "critic") + (("cbf",) if config.use_cbf else ()):
                g = grads[name]
                clip_grad_norm(g, config.max_grad_norm)
                optim_step(getattr(agent, name), g, getattr(optims, name))
    agent.actor_target = soft_update(agent.actor_target, agent.actor, config.tau)
    agent.critic_target = soft_update(agent.critic_target, agent.critic, config.tau)
    agent.cbf_target = soft_update(agent.cbf_target, agent.cbf, config.tau)
    buf.clear()
    if infos:
        stats.update(
            loss_ppo=float(np.mean([i.ppo for i in infos])),
            loss_value=float(np.mean([i.value for i in infos])),
            loss_cbf=float(np.mean([i.cbf for i in infos])),
            loss_total=float(np.mean([i.total for i in infos])),
        )
    stats["cost_gap"] = float(cost_gaps.mean()) if cost_gaps.size else 0.0
    return stats


# ---------------------------------------------------------------------------
# driver


@dataclass
class TrainState:
    agent: Agent
    optims: Optimizers
    pool: EnvPool
    rng: np.random.Generator
    update_index: int = 0
    env_steps: int = 0


def init_state(scenario: Scenario, config: TrainConfig, seed: int) -> TrainState:
    root = np.random.SeedSequence(seed)
    init_seq, train_seq, env_seq = root.spawn(3)
    agent = Agent.init(scenario, config, np.random.default_rng(init_seq))
    return TrainState(
        agent=agent,
        optims=Optimizers.init(agent, config),
        pool=EnvPool(scenario, config.n_envs, env_seq),
        rng=np.random.default_rng(train_seq),
    )


def _finite_or_none(x: float) -> float | None:
    return x if x is not None and math.isfinite(x) else None


def metrics_record(state: TrainState, buf_episodes: Sequence[EpisodeRecord], stats: dict, dt: float) -> dict:
    eps = list(buf_episodes)
    rec = {
        "update": state.update_index,
        "env_steps": state.env_steps,
        "episodes": len(eps),
        "mean_reward": float(np.mean([e.reward for e in eps])) if eps else None,
        "mean_episode_time": float(np.mean([e.steps for e in eps]) * dt) if eps else None,
        "explained_variance": _finite_or_none(stats.get("explained_variance")),
        "collision_rate": float(np.mean([e.collided for e in eps])) if eps else None,
        "success_rate": float(np.mean([e.success for e in eps])) if eps else None,
    }
    for key in ("loss_ppo", "loss_value", "loss_cbf", "loss_total", "cost_gap"):
        rec[key] = _finite_or_none(stats.get(key))
    return rec


def checkpoint_of(state: TrainState, config: TrainConfig, scenario: Scenario) -> Checkpoint:
    return Checkpoint(
        nets=state.agent.nets(),
        optims={"actor": state.optims.actor, "critic": state.optims.critic, "cbf": state.optims.cbf},
        rng_state=state.rng.bit_generator.state,
        meta={
            "n_drones": state.agent.n_drones,
            "obs_dim": state.agent.obs_dim,
            "n_constraints": state.agent.n_constraints,
            "scenario": scenario.name,
            "config": asdict(config),
            "update_index": state.update_index,
            "env_steps": state.env_steps,
            "envs": state.pool.state(),
        },
    )


def resume_state(path: str | Path, scenario: Scenario) -> tuple[TrainState, TrainConfig]:
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.meta["config"])
    agent = Agent.from_nets(ckpt.nets, ckpt.meta)
    optims = Optimizers(ckpt.optims["actor"], ckpt.optims["critic"], ckpt.optims["cbf"])
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    pool = EnvPool(scenario, config.n_envs, np.random.SeedSequence(0))
    pool.restore(ckpt.meta["envs"])
    state = TrainState(agent, optims, pool, rng, ckpt.meta["update_index"], ckpt.meta["env_steps"])
    return state, config


def train(
    config: TrainConfig,
    scenario: Scenario,
    seed: int,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    on_update: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Alternate rollouts and updates for ``config.updates`` iterations.

    With ``out_dir`` set, appends one JSON line per update to ``metrics.jsonl``
    and writes ``checkpoint.npz`` at exit (plus ``checkpoint_XXXX.npz`` every
    ``checkpoint_every`` updates).
    """
    state = state or init_state(scenario, config, seed)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "a" if state.update_index else "w")
    history: list[dict] = []
    try:
        for _ in range(config.updates):
            buf = collect_rollout(state.pool, state.agent, config.horizon, state.rng, config)
            state.env_steps += len(buf)
            episodes = list(buf.episodes)
            try:
                stats = update(state.agent, state.optims, buf, state.rng, config)
            except (TrainingDivergedError, NumericInputError) as exc:
                if out is not None:
                    save_checkpoint(out / "diverged.npz", checkpoint_of(state, config, scenario))
                raise TrainingDivergedError(
                    f"update {state.update_index} diverged after {state.env_steps} env steps: {exc}"
                ) from exc
            state.update_index += 1
            rec = metrics_record(state, episodes, stats, scenario.dt)
            history.append(rec)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            if on_update is not None:
                on_update(rec)
            if out is not None and config.checkpoint_every and state.update_index % config.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{state.update_index:04d}.npz", checkpoint_of(state, config, scenario))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.npz", checkpoint_of(state, config, scenario))
    return state, history
