"""Attention-based CBF parameter network.

A drone's own 13-scalar state block is embedded into a query source ``h``.
Each tracked obstacle (relative position, 3 scalars) yields a key and a value;
scaled dot-product attention pools the values into a context vector ``c`` and
a GeLU MLP head maps ``[h, c]`` through a softplus to non-negative
per-constraint weights ``theta``.

Sentinel obstacle slots are masked out of the softmax. A drone with no real
obstacle in view gets ``alpha = 0`` and ``c = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from swarmgate.nn import (
    GradSet,
    MLPCache,
    NumericInputError,
    ParamSet,
    init_params,
    mlp_backward,
    mlp_forward,
)
from swarmgate.world import SENTINEL_OFFSET, STATE_DIM, WorldState, constraint_clearances

N_EMBED = 3
HEAD_HIDDEN = (1024, 256)


@dataclass(frozen=True)
class CbfTargetConfig:
    kappa: float = 0.5
    w_max: float = 10.0
    delta: float = 0.01
    r_safe: float = 0.3


@dataclass
class AttentionCache:
    h: np.ndarray  # (B, h_dim)
    x: np.ndarray  # (B, K, 3)
    mask: np.ndarray  # (B, K)
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    squeeze: bool


@dataclass
class CbfCache:
    state: np.ndarray
    attn: AttentionCache
    head: MLPCache


@dataclass
class CbfOutput:
    alpha: np.ndarray
    context: np.ndarray
    theta: np.ndarray


def init_cbf_params(
    n_constraints: int,
    rng: np.random.Generator,
    key_dim: int = 32,
    h_dim: int = 32,
    hidden: tuple[int, ...] = HEAD_HIDDEN,
) -> ParamSet:
    """Embedding, W_Q/W_K/W_V projections and the f_CBF head."""

    def glorot(out: int, inp: int) -> np.ndarray:
        bound = math.sqrt(6.0 / (out + inp))
        return rng.uniform(-bound, bound, size=(out, inp))

    params = ParamSet()
    params["embed.W"] = glorot(h_dim, STATE_DIM)
    params["embed.b"] = np.zeros(h_dim)
    params["W_Q"] = glorot(key_dim, h_dim)
    params["W_K"] = glorot(key_dim, N_EMBED)
    params["W_V"] = glorot(key_dim, N_EMBED)
    params.update(init_params([h_dim + key_dim, *hidden, n_constraints], rng, prefix="head."))
    return params


def n_constraints_of(params: ParamSet) -> int:
    i = 0
    while f"head.l{i + 1}.W" in params:
        i += 1
    return params[f"head.l{i}.W"].shape[0]


# ---------------------------------------------------------------------------
# attention


def attention_forward(
    params: ParamSet,
    h: np.ndarray,
    features: np.ndarray,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, AttentionCache]:
    """Scaled dot-product attention of one query over obstacle features.

    Single sample: ``h`` (h_dim,), ``features`` (n, 3). Batched: ``h``
    (B, h_dim), ``features`` (B, K, 3), optional boolean ``mask`` (B, K)
    marking real obstacles.
    """
    h = np.asarray(h, dtype=np.float64)
    x = np.asarray(features, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None]
        x = x.reshape(1, -1, N_EMBED)
        mask = None if mask is None else np.asarray(mask, dtype=bool)[None]
    if not np.all(np.isfinite(x)):
        raise NumericInputError("non-finite obstacle features")
    if x.ndim != 3 or x.shape[-1] != N_EMBED:
        raise ValueError(f"features must have trailing width {N_EMBED}, got {x.shape}")
    B, n_obs, _ = x.shape
    mask = np.ones((B, n_obs), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    W_Q, W_K, W_V = params["W_Q"], params["W_K"], params["W_V"]
    d = W_K.shape[0]
    Q = h @ W_Q.T  # (B, d)
    K = x @ W_K.T  # (B, n, d)
    V = x @ W_V.T
    alpha = np.zeros((B, n_obs))
    if n_obs:
        logits = np.einsum("bd,bkd->bk", Q, K) / math.sqrt(d)
        logits = np.where(mask, logits, -np.inf)
        top = logits.max(axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.exp(logits - top)
        z = e.sum(axis=1, keepdims=True)
        alpha = np.divide(e, z, out=np.zeros_like(e), where=z > 0)
    c = np.einsum("bk,bkd->bd", alpha, V)
    cache = AttentionCache(h, x, mask, Q, K, V, alpha, squeeze)
    if squeeze:
        return alpha[0], c[0], cache
    return alpha, c, cache


def _attention_backward(
    params: ParamSet, cache: AttentionCache, grad_alpha: np.ndarray, grad_c: np.ndarray
) -> tuple[GradSet, np.ndarray]:
    d = params["W_K"].shape[0]
    alpha, V, K, Q, x = cache.alpha, cache.V, cache.K, cache.Q, cache.x
    ga = grad_alpha + np.einsum("bd,bkd->bk", grad_c, V)
    g_logit = alpha * (ga - np.sum(alpha * ga, axis=1, keepdims=True))
    g_logit = g_logit / math.sqrt(d)
    g_Q = np.einsum("bk,bkd->bd", g_logit, K)
    g_K = g_logit[:, :, None] * Q[:, None, :]
    g_V = alpha[:, :, None] * grad_c[:, None, :]
    grads = GradSet()
    grads["W_Q"] = g_Q.T @ cache.h
    grads["W_K"] = np.einsum("bkd,bke->de", g_K, x)
    grads["W_V"] = np.einsum("bkd,bke->de", g_V, x)
    return grads, g_Q @ params["W_Q"]


# ---------------------------------------------------------------------------
# full CBF network


def split_observation(obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Own-state block, obstacle features and real-obstacle mask from observations."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    state = obs[:, :STATE_DIM]
    feats = obs[:, STATE_DIM:].reshape(len(obs), -1, N_EMBED)
    mask = ~np.all(feats == SENTINEL_OFFSET, axis=2)
    return state, feats, mask


def embed(params: ParamSet, state: np.ndarray) -> np.ndarray:
    return state @ params["embed.W"].T + params["embed.b"]


def cbf_head(params: ParamSet, h: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, MLPCache]:
    """theta = softplus(MLP([h, c]))."""
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if h.shape[:-1] != c.shape[:-1]:
        raise ValueError(f"h {h.shape} and c {c.shape} disagree on batch shape")
    return mlp_forward(params, np.concatenate([h, c], axis=-1), prefix="head.", out_act="softplus")


def cbf_forward(params: ParamSet, obs: np.ndarray) -> tuple[CbfOutput, CbfCache]:
    """Run the whole network on a batch of per-drone observations (B, 13 + 3K)."""
    state, feats, mask = split_observation(obs)
    h = embed(params, state)
    alpha, c, acache = attention_forward(params, h, feats, mask)
    theta, hcache = cbf_head(params, h, c)
    return CbfOutput(alpha, c, theta), CbfCache(state, acache, hcache)


def attention_backward(
    params: ParamSet,
    cache: CbfCache,
    grad_alpha: np.ndarray | None = None,
    grad_c: np.ndarray | None = None,
    grad_theta: np.ndarray | None = None,
) -> tuple[GradSet, np.ndarray]:
    """Gradients of all CBF parameters and of ``h`` for the given cotangents.

    Returns ``(grads, grad_h)``; grads are ordered like ``params``.
    """
    a = cache.attn
    B, n_obs = a.alpha.shape
    h_dim = a.h.shape[1]
    d = params["W_K"].shape[0]
    if params["W_Q"].shape[1] != h_dim or a.K.shape[-1] != d:
        raise ValueError("cache does not match parameter shapes")
    ga = np.zeros((B, n_obs)) if grad_alpha is None else np.asarray(grad_alpha).reshape(B, n_obs)
    gc = np.zeros((B, d)) if grad_c is None else np.asarray(grad_c, dtype=np.float64).reshape(B, d)

    grads = GradSet()
    grad_h = np.zeros((B, h_dim))
    head_grads = None
    if grad_theta is not None:
        gt = np.asarray(grad_theta, dtype=np.float64).reshape(B, -1)
        head_grads, g_in = mlp_backward(cache.head, gt)
        grad_h += g_in[:, :h_dim]
        gc = gc + g_in[:, h_dim:]
    attn_grads, g_h_attn = _attention_backward(params, a, ga, gc)
    grad_h += g_h_attn
    grads["embed.W"] = grad_h.T @ cache.state
    grads["embed.b"] = grad_h.sum(axis=0)
    grads.update(attn_grads)
    if head_grads is None:
        head_grads = GradSet((k, np.zeros_like(v)) for k, v in params.items() if k.startswith("head."))
    grads.update(head_grads)
    grads = GradSet((k, grads[k]) for k in params)
    return grads, grad_h


# ---------------------------------------------------------------------------
# supervision


def cbf_target(world: WorldState, drone_id: int, cfg: CbfTargetConfig = CbfTargetConfig()) -> np.ndarray:
    """Saturated inverse-clearance weights per constraint slot; empty slots get 0."""
    clear = constraint_clearances(world, drone_id)
    return target_from_clearance(clear, cfg)


def target_from_clearance(clear: np.ndarray, cfg: CbfTargetConfig = CbfTargetConfig()) -> np.ndarray:
    clear = np.asarray(clear, dtype=np.float64)
    empty = np.isnan(clear)
    margin = np.maximum(np.where(empty, 1.0, clear) - cfg.r_safe, cfg.delta)
    return np.where(empty, 0.0, np.minimum(cfg.w_max, cfg.kappa / margin))


def cbf_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over the leading batch axis of the squared Euclidean distance.

    Returns the loss and its gradient with respect to ``pred``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    if pred.ndim == 1:
        pred, target = pred[None], target[None]
    diff = pred - target
    B = diff.shape[0]
    loss = float(np.sum(diff * diff) / B)
    return loss, 2.0 * diff / B
