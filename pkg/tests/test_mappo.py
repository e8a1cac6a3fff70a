from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import fd_max_rel_error, random_batch
from swarmgate.attention import cbf_forward, cbf_loss
from swarmgate.mappo import (
    TrainConfig,
    TrainingDivergedError,
    actor_forward,
    checkpoint_of,
    clamped_log_std,
    collect_rollout,
    compute_gae,
    constrained_policy_objective,
    explained_variance,
    gaussian_logp,
    init_state,
    loss_and_grads,
    make_batch,
    ppo_loss,
    resume_state,
    step_costs,
    total_loss,
    train,
    value_loss,
)
from swarmgate.nn import mlp_forward, save_checkpoint
from swarmgate.scenario import builtin

TINY = dict(horizon=32, n_envs=2, epochs=2, minibatch=32, actor_hidden=(16,), critic_hidden=(16,), cbf_hidden=(16, 8))


def test_gae_single_step():
    adv, ret = compute_gae(np.array([1.0]), np.array([0.5, 2.0]), np.array([0.0]), 0.9, 0.95)
    assert adv[0] == 1.0 + 0.9 * 2.0 - 0.5
    assert ret[0] == adv[0] + 0.5


def test_gae_done_blocks_bootstrap():
    adv, _ = compute_gae(np.array([1.0, 1.0]), np.array([0.0, 5.0, 7.0]), np.array([1.0, 0.0]), 0.9, 0.95)
    assert adv[0] == 1.0 - 0.0


def test_gae_shape_errors():
    with pytest.raises(ValueError):
        compute_gae(np.ones(3), np.ones(3), np.zeros(3), 0.9, 0.9)


def test_gae_trailing_axes_independent():
    rng = np.random.default_rng(0)
    r, v, d = rng.normal(size=(6, 2, 3)), rng.normal(size=(7, 2, 3)), (rng.random((6, 2, 1)) < 0.2) * 1.0
    adv, _ = compute_gae(r, v, d, 0.9, 0.8)
    for i in range(2):
        for j in range(3):
            a, _ = compute_gae(r[:, i, j], v[:, i, j], d[:, i, 0], 0.9, 0.8)
            assert np.array_equal(a, adv[:, i, j])


def test_ppo_loss_unit_ratio():
    adv = np.array([1.0, -2.0, 0.5])
    loss, g_logp, g_adv = ppo_loss(np.zeros(3), np.zeros(3), adv, 0.2)
    assert loss == -np.mean(adv)
    assert np.array_equal(g_adv, -np.ones(3) / 3)


def test_ppo_loss_clipped_has_no_logp_gradient():
    loss, g_logp, _ = ppo_loss(np.array([0.5]), np.array([0.0]), np.array([1.0]), 0.2)
    assert loss == -1.2 and g_logp[0] == 0.0
    loss, g_logp, _ = ppo_loss(np.array([0.5]), np.array([0.0]), np.array([-1.0]), 0.2)
    assert math.isclose(loss, math.exp(0.5)) and g_logp[0] != 0.0


def test_ppo_loss_nonfinite_ratio():
    from swarmgate.nn import NumericInputError

    with pytest.raises(NumericInputError, match="sample 1"):
        ppo_loss(np.array([0.0, 1000.0]), np.zeros(2), np.ones(2), 0.2)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ppo_gradients_fd(seed):
    rng = np.random.default_rng(seed)
    B = 5
    lo, ln, A = rng.normal(size=B), rng.normal(size=B) * 0.3, rng.normal(size=B)
    lp = lo + ln
    _, g_logp, g_adv = ppo_loss(lp, lo, A, 0.2)
    h = 1e-6
    for i in range(B):
        r = math.exp(ln[i])
        if abs(r - 0.8) < 1e-4 or abs(r - 1.2) < 1e-4:
            continue
        e = np.zeros(B)
        e[i] = h
        num = (ppo_loss(lp + e, lo, A, 0.2)[0] - ppo_loss(lp - e, lo, A, 0.2)[0]) / (2 * h)
        assert abs(num - g_logp[i]) <= 1e-6
        num = (ppo_loss(lp, lo, A + e, 0.2)[0] - ppo_loss(lp, lo, A - e, 0.2)[0]) / (2 * h)
        assert abs(num - g_adv[i]) <= 1e-6


def test_value_loss():
    loss, g = value_loss(np.array([1.0, 3.0]), np.array([0.0, 1.0]))
    assert loss == 2.5 and g.tolist() == [1.0, 2.0]


def test_constrained_objective_and_total_loss():
    adv = np.array([1.0, 2.0])
    ca = np.ones((2, 1, 2))
    th = np.array([[[0.5, 0.0]], [[1.0, 2.0]]])
    out = constrained_policy_objective(adv, ca, th, np.array([0.5, -0.5]))
    assert out.tolist() == [1.0 - 0.75, 2.0 - (1.5 + 1.0)]
    assert total_loss(1.0, 2.0, 3.0, 0.5, 0.1) == 1.0 + 1.0 + 0.3
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, 1.0, -0.1, 0.0)


def test_explained_variance():
    y = np.array([1.0, 2.0, 3.0])
    assert explained_variance(y, y) == 1.0
    assert explained_variance(np.zeros(3), y) == 0.0
    assert math.isnan(explained_variance(y, np.ones(3)))


def test_step_costs():
    clear = np.array([[0.1, np.nan, 0.5], [0.0, 0.2, 0.4]])
    c = step_costs(clear, np.array([True, False]), 0.3)
    assert np.allclose(c, [[0.2, 0.0, 0.0], [0.0, 0.0, 0.0]])


def _objectives(agent, batch, gaps, cfg):
    B, n, D = batch.drone_obs.shape

    def l_ppo():
        mean, _ = actor_forward(agent.actor, batch.joint_obs)
        logp = gaussian_logp(batch.actions, mean, clamped_log_std(agent.actor))
        out, _ = cbf_forward(agent.cbf, batch.drone_obs.reshape(B * n, D))
        adv = constrained_policy_objective(batch.advantages, batch.cost_adv, out.theta.reshape(batch.cost_adv.shape), gaps)
        return ppo_loss(logp, batch.logp_old, adv, cfg.clip_eps)[0]

    def l_v():
        v, _ = mlp_forward(agent.critic, batch.joint_obs)
        return cfg.value_coef * value_loss(v[:, 0], batch.returns)[0]

    def l_cbf_side():
        out, _ = cbf_forward(agent.cbf, batch.drone_obs.reshape(B * n, D))
        return cfg.cbf_coef * cbf_loss(out.theta.reshape(B, -1), batch.cbf_targets.reshape(B, -1))[0] - l_ppo()

    return l_ppo, l_v, l_cbf_side


def test_loss_and_grads_match_objectives():
    # sentinel-free observations: a 1e-5 step on a weight that multiplies a
    # +100 input is too coarse for central differences at this tolerance
    rng = np.random.default_rng(21)
    for _ in range(5):
        agent, batch, gaps, cfg = random_batch(rng, empty_slots=0)
        info, grads = loss_and_grads(agent, batch, gaps, cfg)
        l_ppo, l_v, l_side = _objectives(agent, batch, gaps, cfg)
        assert math.isclose(info.ppo, l_ppo(), rel_tol=1e-12)
        assert fd_max_rel_error(l_ppo, agent.actor, grads["actor"], rng, per_param=5) < 1e-4
        assert fd_max_rel_error(l_v, agent.critic, grads["critic"], rng, per_param=5) < 1e-4
        assert fd_max_rel_error(l_side, agent.cbf, grads["cbf"], rng, per_param=5) < 1e-4


def test_zero_theta_equals_plain_ppo():
    rng = np.random.default_rng(5)
    agent, batch, gaps, cfg = random_batch(rng)
    last = max(int(k.split(".")[1][1:]) for k in agent.cbf if k.startswith("head.l"))
    agent.cbf[f"head.l{last}.W"][:] = 0.0
    agent.cbf[f"head.l{last}.b"][:] = -800.0  # softplus underflows to exactly 0
    out, _ = cbf_forward(agent.cbf, batch.drone_obs.reshape(-1, batch.drone_obs.shape[-1]))
    assert not out.theta.any()
    with_cbf, _ = loss_and_grads(agent, batch, gaps, cfg)
    plain, _ = loss_and_grads(agent, batch, gaps, cfg.baseline())
    assert with_cbf.ppo == plain.ppo


def test_log_std_gradient_zero_outside_clamp():
    rng = np.random.default_rng(8)
    agent, batch, gaps, cfg = random_batch(rng)
    agent.actor["log_std"][0] = 3.0
    _, grads = loss_and_grads(agent, batch, gaps, cfg)
    assert grads["actor"]["log_std"][0] == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(clip_eps=1.5)
    with pytest.raises(ValueError):
        TrainConfig(cbf_coef=-1)
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    b = TrainConfig().baseline()
    assert not b.use_cbf and b.cbf_coef == 0.0


def test_rollout_shapes_and_bookkeeping():
    sc = builtin("real-mimic")
    cfg = TrainConfig(**TINY)
    state = init_state(sc, cfg, 0)
    buf = collect_rollout(state.pool, state.agent, 40, state.rng, cfg)
    assert buf.obs.shape == (40, 2, 2, 22)
    assert buf.values.shape == (41, 2)
    assert buf.costs.shape == (40, 2, 2, 4) and np.all(buf.costs >= 0)
    assert np.all(buf.theta >= 0)
    assert np.all((buf.cbf_targets >= 0) & (buf.cbf_targets <= cfg.w_max))
    # values come from the critic on the recorded observations
    v, _ = mlp_forward(state.agent.critic, buf.obs[3, 1].reshape(1, -1))
    assert math.isclose(v[0, 0], buf.values[3, 1], rel_tol=1e-12)
    batch, gaps, _ = make_batch(buf, cfg)
    assert len(batch.advantages) == 80 and gaps.shape == (2, 4)
    assert abs(batch.advantages.mean()) < 1e-9


def test_train_deterministic_and_clears_buffer(tmp_path):
    sc = builtin("smoke")
    cfg = TrainConfig(**{**TINY, "updates": 2})
    train(cfg, sc, 4, out_dir=tmp_path / "a")
    train(cfg, sc, 4, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    lines = [json.loads(x) for x in a.splitlines()]
    assert [r["update"] for r in lines] == [1, 2]
    assert lines[-1]["env_steps"] == 2 * 32 * 2


def test_resume_matches_uninterrupted(tmp_path):
    sc = builtin("smoke")
    cfg = TrainConfig(**{**TINY, "updates": 2})
    _, full = train(cfg, sc, 7)
    one = TrainConfig(**{**TINY, "updates": 1})
    state, _ = train(one, sc, 7)
    save_checkpoint(tmp_path / "c.npz", checkpoint_of(state, one, sc))
    state2, _ = resume_state(tmp_path / "c.npz", sc)
    _, rest = train(one, sc, 7, state=state2)
    assert rest[0] == full[1]


def test_zero_updates_keep_init(tmp_path):
    sc = builtin("smoke")
    cfg = TrainConfig(**{**TINY, "updates": 0})
    state, hist = train(cfg, sc, 1, out_dir=tmp_path)
    ref = init_state(sc, cfg, 1)
    assert hist == [] and state.agent.actor.allclose(ref.agent.actor)


def test_divergence_saves_state(tmp_path, monkeypatch):
    import swarmgate.mappo as mappo

    def boom(*args, **kwargs):
        raise TrainingDivergedError("non-finite loss")

    monkeypatch.setattr(mappo, "update", boom)
    with pytest.raises(TrainingDivergedError, match="update 0"):
        train(TrainConfig(**{**TINY, "updates": 1}), builtin("smoke"), 0, out_dir=tmp_path)
    assert (tmp_path / "diverged.npz").exists()
