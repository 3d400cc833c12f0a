from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ShapeMismatch


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def decays(name):
    """Decoupled weight decay applies to weight arrays, never to biases."""
    return name.endswith("weights")


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, t=None):
    """One in-place Adam update with bias correction and decoupled decay.

    ``params`` and ``grads`` are name -> array mappings. ``t`` defaults to
    ``state.t + 1``. Returns ``(params, state)``.
    """
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("step counter must be >= 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and decays(name):
            step = step + lr * weight_decay * p
        p -= step.astype(p.dtype, copy=False)
    state.t = t
    return params, state
