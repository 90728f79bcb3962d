"""Nesterov-momentum SGD with decoupled-from-nothing classic weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerState", "sgd_nesterov_step"]


@dataclass
class OptimizerState:
    """Per-parameter velocity buffers plus the momentum/decay constants."""

    velocity: dict = field(default_factory=dict)
    momentum: float = 0.9
    weight_decay: float = 0.0005

    @classmethod
    def for_params(cls, params, momentum=0.9, weight_decay=0.0005):
        vel = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(velocity=vel, momentum=momentum, weight_decay=weight_decay)


def sgd_nesterov_step(params, grads, lr, state):
    """One Nesterov update: v <- m*v - lr*(g + wd*p); p <- p + m*v - lr*(g + wd*p).

    The lookahead uses the freshly updated velocity. With momentum 0 and decay
    0 this reduces exactly to vanilla gradient descent. Mutates params and
    state in place and returns both.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    m, wd = state.momentum, state.weight_decay
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name!r}")
        v = state.velocity[name]
        d = g + wd * p.data
        v_new = m * v - lr * d
        state.velocity[name] = v_new
        p.data = (p.data + m * v_new - lr * d).astype(p.data.dtype)
    return params, state
