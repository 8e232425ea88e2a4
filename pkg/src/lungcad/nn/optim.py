from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0, decoupled: bool = False):
    """One Adam update, in place on ``params``.

    Weight decay is added to the gradient before the moment updates unless
    ``decoupled`` is set, in which case it is applied directly to the weights.
    """
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and decoupled:
            step = step + lr * weight_decay * p
        p -= step.astype(p.dtype, copy=False)
    return params, state
