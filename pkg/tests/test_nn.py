from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from helpers import fd_max_rel_error
from swarmgate.nn import (
    Checkpoint,
    NumericInputError,
    OptimState,
    ParamSet,
    clip_grad_norm,
    gelu,
    gelu_derivative,
    init_params,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    optim_step,
    save_checkpoint,
    soft_update,
    softplus,
)


def test_gelu_matches_erf_form():
    x = np.linspace(-6, 6, 101)
    assert np.allclose(gelu(x), 0.5 * x * (1 + erf(x / math.sqrt(2))), atol=1e-15, rtol=1e-14)
    assert gelu(0.0) == 0.0


def test_gelu_derivative_fd():
    x = np.linspace(-5, 5, 41)
    h = 1e-6
    num = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert np.allclose(gelu_derivative(x), num, atol=1e-8)


def test_softplus_stable():
    x = np.array([-800.0, -1.0, 0.0, 1.0, 800.0])
    y = softplus(x)
    assert np.all(np.isfinite(y)) and np.all(y >= 0)
    assert y[2] == math.log(2.0) and y[4] == 800.0


def test_glorot_bounds_and_zero_bias():
    p = init_params([7, 5, 3], np.random.default_rng(0))
    assert p["l0.W"].shape == (5, 7) and p["l1.W"].shape == (3, 5)
    assert np.all(np.abs(p["l0.W"]) <= math.sqrt(6 / 12))
    assert not p["l0.b"].any() and not p["l1.b"].any()
    with pytest.raises(ValueError):
        init_params([3], np.random.default_rng(0))


def test_forward_single_vs_batch():
    rng = np.random.default_rng(1)
    p = init_params([4, 6, 2], rng)
    X = rng.normal(size=(5, 4))
    Y, _ = mlp_forward(p, X)
    for i in range(5):
        y, _ = mlp_forward(p, X[i])
        assert np.allclose(y, Y[i], atol=1e-15)


def test_forward_errors():
    p = init_params([4, 2], np.random.default_rng(0))
    with pytest.raises(NumericInputError):
        mlp_forward(p, np.array([1.0, np.nan, 0, 0]))
    with pytest.raises(ValueError):
        mlp_forward(p, np.ones(3))


@pytest.mark.parametrize("out_act", [None, "softplus"])
def test_mlp_backward_fd(out_act):
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = init_params([5, 7, 6, 3], rng)
        for k in p:
            p[k] = p[k] + rng.normal(scale=0.1, size=p[k].shape)
        X = rng.normal(size=(4, 5))
        R = rng.normal(size=(4, 3))
        y, cache = mlp_forward(p, X, out_act=out_act)
        grads, gx = mlp_backward(cache, R)
        assert list(grads.keys()) == list(p.keys())

        def f():
            return float(np.sum(mlp_forward(p, X, out_act=out_act)[0] * R))

        assert fd_max_rel_error(f, p, grads, rng, per_param=10) < 1e-4
        # input gradient
        h = 1e-5
        for j in range(5):
            Xp, Xm = X.copy(), X.copy()
            Xp[1, j] += h
            Xm[1, j] -= h
            num = (np.sum(mlp_forward(p, Xp, out_act=out_act)[0] * R) - np.sum(mlp_forward(p, Xm, out_act=out_act)[0] * R)) / (2 * h)
            assert abs(gx[1, j] - num) <= 1e-4 * max(abs(num), 1e-8) + 1e-10


def test_backward_shape_mismatch():
    p = init_params([3, 2], np.random.default_rng(0))
    _, cache = mlp_forward(p, np.ones((2, 3)))
    with pytest.raises(ValueError):
        mlp_backward(cache, np.ones((2, 5)))


def test_adam_first_step_is_signed_lr():
    p = ParamSet({"w": np.array([1.0, -2.0, 3.0])})
    g = ParamSet({"w": np.array([0.5, -0.1, 0.0])})
    st_ = OptimState.for_params(p, lr=0.01)
    optim_step(p, g, st_)
    # bias-corrected first step moves each coordinate by lr * g / (|g| + eps)
    expected = np.array([1.0 - 0.01 * 0.5 / (0.5 + 1e-8), -2.0 + 0.01 * 0.1 / (0.1 + 1e-8), 3.0])
    assert np.allclose(p["w"], expected, atol=1e-15)
    assert st_.step == 1


def test_adam_reference_sequence():
    """Compare against a direct transcription of the bias-corrected update."""
    rng = np.random.default_rng(3)
    w = rng.normal(size=6)
    p = ParamSet({"w": w.copy()})
    st_ = OptimState.for_params(p, lr=1e-3)
    m = np.zeros(6)
    v = np.zeros(6)
    for t in range(1, 11):
        g = rng.normal(size=6)
        optim_step(p, ParamSet({"w": g}), st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p["w"], w, atol=1e-14)


def test_adam_rejects_nonfinite():
    p = ParamSet({"a": np.zeros(2), "b": np.zeros(2)})
    with pytest.raises(NumericInputError, match="'b'"):
        optim_step(p, ParamSet({"a": np.zeros(2), "b": np.array([0.0, np.inf])}), OptimState.for_params(p, 0.1))


@given(st.floats(0.01, 10.0), st.integers(0, 2**32 - 1))
def test_clip_grad_norm(max_norm, seed):
    rng = np.random.default_rng(seed)
    g = ParamSet({"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)})
    before = np.linalg.norm(g.flat())
    reported = clip_grad_norm(g, max_norm)
    assert math.isclose(reported, before, rel_tol=1e-12)
    assert np.linalg.norm(g.flat()) <= max_norm * (1 + 1e-9) or before <= max_norm


def test_soft_update():
    t = ParamSet({"w": np.zeros(3)})
    o = ParamSet({"w": np.ones(3)})
    assert np.allclose(soft_update(t, o, 0.25)["w"], 0.25)
    assert np.array_equal(soft_update(t, o, 0.0)["w"], t["w"])
    assert np.array_equal(soft_update(t, o, 1.0)["w"], o["w"])
    with pytest.raises(ValueError):
        soft_update(t, o, 1.5)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    p = init_params([3, 4, 2], rng)
    p["log_std"] = np.full(2, -0.5)
    st_ = OptimState.for_params(p, 1e-3)
    optim_step(p, ParamSet((k, rng.normal(size=v.shape)) for k, v in p.items()), st_)
    ckpt = Checkpoint({"actor": p}, {"actor": st_}, rng.bit_generator.state, {"note": "x", "n": 3})
    save_checkpoint(tmp_path / "c.npz", ckpt)
    back = load_checkpoint(tmp_path / "c.npz")
    assert list(back.nets["actor"].keys()) == list(p.keys())
    assert back.nets["actor"].allclose(p)
    assert back.optims["actor"].step == 1 and back.optims["actor"].m.allclose(st_.m)
    assert back.meta == {"note": "x", "n": 3}
    r2 = np.random.default_rng()
    r2.bit_generator.state = back.rng_state
    assert r2.random() == rng.random()
