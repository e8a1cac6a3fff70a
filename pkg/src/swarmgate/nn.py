"""Dense network kernel: GeLU MLPs with hand-written backward passes, Adam,
soft target updates and checkpoint I/O.

Everything is float64 numpy. Networks are fixed architectures, so there is no
autodiff graph: each forward returns a cache that the matching backward
consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
from scipy.special import ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)


class NumericInputError(ValueError):
    """Raised when a numeric input or gradient is NaN/inf."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# parameter containers


class ParamSet:
    """Ordered name -> float64 array mapping with a flat view.

    Used for network weights, their gradients (a GradSet is just a ParamSet of
    the same shapes) and optimizer moments.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = arrays.items() if isinstance(arrays, Mapping) else arrays
        self._arrays: dict[str, np.ndarray] = {
            k: np.array(v, dtype=np.float64) for k, v in items
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: object) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._arrays.items()}

    @property
    def size(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._arrays.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.size}")
        i = 0
        for k, v in self._arrays.items():
            self._arrays[k] = vec[i : i + v.size].reshape(v.shape).copy()
            i += v.size

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._arrays.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._arrays.items())

    def update(self, other: "ParamSet") -> None:
        for k, v in other.items():
            self[k] = v

    def subset(self, prefix: str) -> "ParamSet":
        """Entries under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return ParamSet((k[n:], v) for k, v in self._arrays.items() if k.startswith(prefix))

    def same_shapes(self, other: "ParamSet") -> bool:
        return self.shapes == other.shapes

    def allclose(self, other: "ParamSet", atol: float = 0.0) -> bool:
        if not self.same_shapes(other):
            return False
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}{list(v.shape)}" for k, v in self._arrays.items())
        return f"ParamSet({inner})"


GradSet = ParamSet


# ---------------------------------------------------------------------------
# activations


def gelu(x):
    """Exact GeLU, x * Phi(x)."""
    return x * ndtr(x)


def gelu_derivative(x):
    return ndtr(x) + x * np.exp(-0.5 * np.square(x)) / SQRT_2PI


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_derivative(x):
    # logistic sigmoid, written to avoid overflow for large |x|
    return np.exp(-np.logaddexp(0.0, -x))


# ---------------------------------------------------------------------------
# MLP


def layer_sizes(params: ParamSet, prefix: str = "") -> list[int]:
    sizes = []
    i = 0
    while f"{prefix}l{i}.W" in params:
        W = params[f"{prefix}l{i}.W"]
        if not sizes:
            sizes.append(W.shape[1])
        sizes.append(W.shape[0])
        i += 1
    return sizes


def init_params(sizes: Iterable[int], rng: np.random.Generator, prefix: str = "") -> ParamSet:
    """Glorot-uniform weights (out x in), zero biases."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    if any(int(s) < 1 for s in sizes):
        raise ValueError(f"layer sizes must be >= 1, got {sizes}")
    params = ParamSet()
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{prefix}l{i}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"{prefix}l{i}.b"] = np.zeros(fan_out)
    return params


@dataclass
class MLPCache:
    params: ParamSet
    prefix: str
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each layer
    cdfs: list[np.ndarray]  # Phi(preact) of each hidden layer
    squeeze: bool
    out_act: str | None


def mlp_forward(
    params: ParamSet,
    x: np.ndarray,
    prefix: str = "",
    out_act: str | None = None,
) -> tuple[np.ndarray, MLPCache]:
    """GeLU hidden layers, linear (or softplus) output.

    ``x`` may be a single vector or a (batch, in) matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    _check_finite(x, "mlp input")
    n_layers = len(layer_sizes(params, prefix)) - 1
    if n_layers < 1:
        raise ValueError(f"no layers under prefix {prefix!r}")
    inputs, preacts, cdfs = [], [], []
    a = x
    for i in range(n_layers):
        W = params[f"{prefix}l{i}.W"]
        b = params[f"{prefix}l{i}.b"]
        if a.shape[1] != W.shape[1]:
            raise ValueError(f"layer {prefix}l{i} expects width {W.shape[1]}, got {a.shape[1]}")
        inputs.append(a)
        z = a @ W.T + b
        preacts.append(z)
        if i < n_layers - 1:
            cdf = ndtr(z)
            cdfs.append(cdf)
            a = z * cdf
        elif out_act == "softplus":
            a = softplus(z)
        elif out_act is None:
            a = z
        else:
            raise ValueError(f"unknown output activation {out_act!r}")
    cache = MLPCache(params, prefix, inputs, preacts, cdfs, squeeze, out_act)
    return (a[0] if squeeze else a), cache


def mlp_backward(cache: MLPCache, grad_output: np.ndarray) -> tuple[GradSet, np.ndarray]:
    """Reverse-mode gradients of a summed-over-batch scalar with cotangent ``grad_output``."""
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    n_layers = len(cache.preacts)
    if g.shape != cache.preacts[-1].shape:
        raise ValueError(
            f"grad_output shape {g.shape} does not match output {cache.preacts[-1].shape}"
        )
    p = cache.prefix
    collected: list[tuple[str, np.ndarray]] = []
    for i in reversed(range(n_layers)):
        z = cache.preacts[i]
        if i == n_layers - 1:
            if cache.out_act == "softplus":
                g = g * softplus_derivative(z)
        else:
            g = g * (cache.cdfs[i] + z * np.exp(-0.5 * z * z) / SQRT_2PI)
        W = cache.params[f"{p}l{i}.W"]
        if W.shape[0] != z.shape[1]:
            raise ValueError("cache does not match parameter shapes")
        collected.append((f"{p}l{i}.b", g.sum(axis=0)))
        collected.append((f"{p}l{i}.W", g.T @ cache.inputs[i]))
        g = g @ W
    grads = GradSet(reversed(collected))
    return grads, (g[0] if cache.squeeze else g)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    """Adam moments for one ParamSet."""

    lr: float
    m: ParamSet
    v: ParamSet
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, lr: float) -> "OptimState":
        return cls(lr=lr, m=params.zeros_like(), v=params.zeros_like())


def optim_step(params: ParamSet, grads: GradSet, state: OptimState) -> tuple[ParamSet, OptimState]:
    """Bias-corrected Adam update, applied in place and returned."""
    if not params.same_shapes(grads):
        raise ValueError("gradient shapes do not match parameters")
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NumericInputError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name in params:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads: GradSet, max_norm: float) -> float:
    """Scale ``grads`` in place to a global L2 norm of at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for _, g in grads.items()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k, g in grads.items():
            grads[k] = g * scale
    return norm


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """tau * online + (1 - tau) * target, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if not target.same_shapes(online):
        raise ValueError("target and online parameter shapes differ")
    return ParamSet((k, tau * online[k] + (1.0 - tau) * target[k]) for k in target)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    nets: dict[str, ParamSet]
    optims: dict[str, OptimState] = field(default_factory=dict)
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    """Write a single ``.npz`` file: flat float64 payloads plus a JSON header.

    The header records layer names/shapes, optimizer scalars, the RNG state and
    free-form metadata.
    """
    arrays: dict[str, np.ndarray] = {}
    header: dict = {"nets": {}, "optims": {}, "rng_state": ckpt.rng_state, "meta": ckpt.meta}
    for name, ps in ckpt.nets.items():
        header["nets"][name] = [[k, list(v.shape)] for k, v in ps.items()]
        arrays[f"net/{name}"] = ps.flat()
    for name, st in ckpt.optims.items():
        header["optims"][name] = {
            "lr": st.lr,
            "step": st.step,
            "beta1": st.beta1,
            "beta2": st.beta2,
            "eps": st.eps,
        }
        arrays[f"optim/{name}/m"] = st.m.flat()
        arrays[f"optim/{name}/v"] = st.v.flat()
    arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _unflatten(layout: list, flat: np.ndarray) -> ParamSet:
    ps = ParamSet((k, np.zeros(shape)) for k, shape in layout)
    ps.load_flat(flat)
    return ps


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(Path(path)) as data:
        header = json.loads(data["header"].tobytes().decode())
        nets = {
            name: _unflatten(layout, data[f"net/{name}"]) for name, layout in header["nets"].items()
        }
        optims = {}
        for name, info in header["optims"].items():
            layout = header["nets"][name]
            optims[name] = OptimState(
                lr=info["lr"],
                m=_unflatten(layout, data[f"optim/{name}/m"]),
                v=_unflatten(layout, data[f"optim/{name}/v"]),
                step=info["step"],
                beta1=info["beta1"],
                beta2=info["beta2"],
                eps=info["eps"],
            )
    return Checkpoint(nets=nets, optims=optims, rng_state=header["rng_state"], meta=header["meta"])
