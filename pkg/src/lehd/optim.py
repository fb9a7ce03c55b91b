from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        self.param_name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, grads: dict[str, np.ndarray] | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Gradients are taken from ``grads`` when given, else from each ``param.grad``
    (a missing gradient counts as zero).  Every gradient is checked for NaN/Inf
    before any parameter is touched.
    """
    if state.step < 0:
        raise ValueError("AdamState.step must be >= 0")
    resolved = {}
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        resolved[name] = g

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = resolved[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
