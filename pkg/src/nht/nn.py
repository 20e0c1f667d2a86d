"""Shallow ReLU MLP with manual backprop, Adam, LR schedules and EMA weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class StaleCacheError(RuntimeError):
    pass


@dataclass
class MlpParams:
    weights: list            # (out, in) matrices
    biases: list             # (out,) vectors
    revision: int = 0

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.revision)

    def astype(self, dtype):
        return MlpParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases], self.revision)


def init_mlp(dims, rng, dtype=np.float64) -> MlpParams:
    """He-uniform init on ReLU layers, zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = math.sqrt(6.0 / fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        bs.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(ws, bs)


@dataclass
class MlpCache:
    inputs: list
    pre: list
    revision: int


def mlp_forward(params: MlpParams, x):
    """ReLU on hidden layers, identity output. Returns (y, cache)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"input shape {x.shape} does not match MLP input width {params.weights[0].shape[1]}")
    inputs, pre = [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if k < last else z
    return h, MlpCache(inputs, pre, params.revision)


def mlp_backward(params: MlpParams, cache: MlpCache, dy):
    """Returns (list of (dW, db), dx)."""
    if cache.revision != params.revision:
        raise StaleCacheError("cache was produced by a different parameter revision")
    grads = [None] * len(params.weights)
    g = dy
    for k in range(len(params.weights) - 1, -1, -1):
        if k < len(params.weights) - 1:
            g = g * (cache.pre[k] > 0)
        grads[k] = (g.T @ cache.inputs[k], g.sum(axis=0))
        g = g @ params.weights[k]
    return grads, g


# -- Adam -------------------------------------------------------------------------

@dataclass
class Adam:
    """Adam over a list of arrays (updated in place)."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads, lr):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Adam, lr):
    """Functional wrapper: one Adam update of ``params`` in place."""
    state.step(params, grads, lr)
    return params


def resize_moments(state: Adam, index: int, n_rows: int):
    """Grow the moments of array ``index`` to ``n_rows`` rows, zero-filling new rows."""
    if not state.m:
        return
    for buf in (state.m, state.v):
        old = buf[index]
        new = np.zeros((n_rows,) + old.shape[1:], dtype=old.dtype)
        new[:len(old)] = old[:n_rows]
        buf[index] = new


# -- schedules -----------------------------------------------------------------------

def lr_at(schedule, t, base, total=None, final_factor=None):
    """Learning rate at step t.

    exp2d:  base * 0.33 ** max(0, (t - 20000) / 10000)
    cosine: cosine annealing from base to 0.1 * base at t = total
    exp3d:  exponential decay from base to 0.01 * base at t = total
    """
    if t < 0:
        raise ValueError("step must be non-negative")
    if schedule == "exp2d":
        return base * 0.33 ** max(0.0, (t - 20000) / 10000)
    if schedule == "constant":
        return base
    if total is None or total <= 0:
        raise ValueError(f"schedule {schedule!r} needs a positive total step count")
    frac = min(t / total, 1.0)
    if schedule == "cosine":
        f = 0.1 if final_factor is None else final_factor
        return base * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * frac)))
    if schedule == "exp3d":
        f = 0.01 if final_factor is None else final_factor
        return base * f ** frac
    raise ValueError(f"unknown schedule {schedule!r}")


# -- EMA -------------------------------------------------------------------------------

@dataclass
class Ema:
    """Shadow copy updated as shadow = gamma * shadow + (1 - gamma) * current."""
    gamma: float = 0.95
    shadow: list | None = None

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("EMA decay must lie in [0, 1)")

    def update(self, arrays):
        if self.shadow is None:
            self.shadow = [a.copy() for a in arrays]
            return self.shadow
        for s, a in zip(self.shadow, arrays):
            s *= self.gamma
            s += (1.0 - self.gamma) * a
        return self.shadow


def ema_update(shadow, current, gamma):
    """Scalar/array form of the EMA recurrence."""
    return gamma * np.asarray(shadow) + (1.0 - gamma) * np.asarray(current)


def params_from_arrays(template: MlpParams, arrays) -> MlpParams:
    return MlpParams([a.copy() for a in arrays[0::2]], [a.copy() for a in arrays[1::2]], template.revision)
