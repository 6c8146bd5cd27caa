"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float | None = None,
               no_decay=()) -> OptimizerState:
    """Update ``params`` in place.

    theta <- theta - lr*wd*theta - lr * mhat / (sqrt(vhat) + eps), with the
    decay term skipped for names in ``no_decay``. ``lr`` overrides
    ``state.lr`` for this step (schedules pass it in).
    """
    lr = state.lr if lr is None else lr
    missing = set(params) ^ set(grads)
    if missing:
        raise ValueError(f"params/grads key mismatch: {sorted(missing)[:5]}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.weight_decay and name not in no_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
