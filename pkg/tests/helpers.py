"""Shared oracles for the test suite."""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_max_rel_error(f, params, grads, rng: np.random.Generator, per_param: int = 8, names=None) -> float:
    """Central differences on a random sample of coordinates of each named array.

    ``f()`` evaluates the scalar objective at the current contents of
    ``params``; entries are perturbed in place and restored.
    """
    worst = 0.0
    for name in names or list(params.keys()):
        arr = params[name]
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        idx = rng.choice(flat.size, size=min(per_param, flat.size), replace=False)
        for k in idx:
            old = flat[k]
            flat[k] = old + FD_STEP
            fp = f()
            flat[k] = old - FD_STEP
            fm = f()
            flat[k] = old
            num = (fp - fm) / (2 * FD_STEP)
            worst = max(worst, rel_error(float(g[k]), num))
    return worst


def random_batch(
    rng: np.random.Generator,
    n_drones: int = 2,
    K: int = 3,
    B: int = 6,
    empty_slots: int = 1,
    cbf_hidden: tuple[int, ...] = (24, 16),
):
    """A synthetic mini-batch, cost gaps and a small agent for gradient checks."""
    from swarmgate.mappo import Agent, Batch, TrainConfig, actor_forward, clamped_log_std, gaussian_logp
    from swarmgate.scenario import Scenario
    from swarmgate.world import SENTINEL_OFFSET

    sc = Scenario(
        name="fd",
        drones=[[0.0, float(i), 1.0] for i in range(n_drones)],
        gates=[{"center": [5.0, 0, 1.0], "normal": [1.0, 0, 0], "half_width": 0.25, "half_height": 0.25, "order": 0}],
        obstacle_slots=K,
    )
    cfg = TrainConfig(actor_hidden=(16, 12), critic_hidden=(16, 12), cbf_hidden=cbf_hidden, clip_eps=0.2)
    agent = Agent.init(sc, cfg, rng)
    for net in (agent.actor, agent.critic, agent.cbf):
        for k in net:
            if k != "log_std":
                net[k] = net[k] + rng.normal(scale=0.05, size=net[k].shape)
    agent.actor["log_std"] = rng.uniform(-1.0, 0.5, size=agent.actor["log_std"].shape)
    n, D, m = n_drones, sc.obs_dim, sc.n_constraints
    obs = rng.normal(size=(B, n, D))
    obs[:, :, 13 + 3 * (K - empty_slots) :] = SENTINEL_OFFSET
    joint = obs.reshape(B, n * D)
    mean, _ = actor_forward(agent.actor, joint)
    actions = mean + np.exp(clamped_log_std(agent.actor)) * rng.normal(size=mean.shape)
    logp = gaussian_logp(actions, mean, clamped_log_std(agent.actor))
    batch = Batch(
        joint_obs=joint,
        drone_obs=obs,
        actions=actions,
        logp_old=logp + rng.uniform(-0.05, 0.05, size=B),
        advantages=rng.normal(size=B),
        returns=rng.normal(size=B),
        cost_adv=np.abs(rng.normal(scale=0.3, size=(B, n, m))),
        cbf_targets=rng.uniform(0, 3, size=(B, n, m)),
    )
    cost_gaps = rng.normal(scale=0.1, size=(n, m))
    return agent, batch, cost_gaps, cfg
