"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericsError, ShapeError


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0     # L2 term added to the gradient
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One update; returns new parameter arrays and advances ``state`` in place."""
    if set(grads) != set(params):
        raise ShapeError(f"gradient names differ from parameters: {sorted(set(grads) ^ set(params))}")
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"{name}: gradient {np.shape(g)} vs parameter {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = {}
    for name in sorted(params):
        p = np.asarray(params[name])
        g = np.asarray(grads[name], dtype=np.float64)
        if state.weight_decay and not name.endswith(".b"):
            g = g + state.weight_decay * p
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - upd).astype(p.dtype)
    return out
