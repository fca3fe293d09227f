"""Parameter initialization, pooling, and the Adam optimizer."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeError


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_conv(rng, cout, cin, k, dtype=np.float32):
    kernel = glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
    bias = np.zeros(cout, dtype=dtype)
    return ad.Tensor(kernel, requires_grad=True), ad.Tensor(bias, requires_grad=True)

def init_fc(rng, n_in, n_out, dtype=np.float32):
    weight = glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype)
    bias = np.zeros(n_out, dtype=dtype)
    return ad.Tensor(weight, requires_grad=True), ad.Tensor(bias, requires_grad=True)


def init_transform(rng, m, d_in, n_times_d_out, dtype=np.float32):
    """Per-capsule (or shared, m == 1) vote transformation matrices."""
    w = glorot_uniform(rng, (m, d_in, n_times_d_out), d_in, n_times_d_out, dtype)
    return ad.Tensor(w, requires_grad=True)


def fc_forward(x, weight, bias):
    return ad.bias_add(ad.matmul(x, weight), bias)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects a 4-d tensor, got {x.data.shape}")
    return ad.reduce_mean(x, axes=(2, 3))


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(params, state, grads=None):
    """One Adam update in place. ``grads`` defaults to each param's ``.grad``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != param {p.data.shape} ({name})")
        m = state.m[name]
        v = state.v[name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
