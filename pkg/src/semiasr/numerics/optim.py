from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Parameters whose gradient is None are treated as having zero gradient.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        p.data = p.data - update
    return state


def global_norm(grads: dict[str, np.ndarray | None]) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for k, g in grads.items():
            if g is not None:
                grads[k] = (g * factor).astype(g.dtype)
    return norm


class Adam:
    """Adam over a fixed name->Tensor map."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, lr: float) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, lr)

    def add_params(self, params: dict[str, Tensor]) -> None:
        self.params.update(params)
