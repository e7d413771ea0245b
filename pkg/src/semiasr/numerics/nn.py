"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ForwardContext:
    """Train flag plus a counter-based RNG stream for dropout.

    Each dropout call draws from a generator seeded by (seed, step, op index),
    so a step is reproducible regardless of what ran before it.
    """

    def __init__(self, train: bool = False, seed: int = 0, step: int = 0):
        self.train = train
        self.seed = int(seed)
        self.step = int(step)
        self._op = 0

    def rng(self) -> np.random.Generator:
        self._op += 1
        return np.random.default_rng([self.seed, self.step, self._op])

    def dropout(self, x: Tensor, p: float) -> Tensor:
        if not self.train or p == 0.0:
            return x
        return T.dropout(x, p, self.rng(), train=True)


EVAL = ForwardContext(train=False)


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data.astype(T.get_default_dtype()), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return _param(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return _param(np.zeros(shape))


def ones(*shape) -> Tensor:
    return _param(np.ones(shape))


class Module:
    """Attribute-walking parameter container.

    Parameters are Tensors with ``requires_grad``; submodules may be held
    directly or in lists. Names are dotted attribute paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters; returns the names loaded."""
        own = dict(self.named_parameters())
        loaded = []
        for name, arr in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            p = own[name]
            if p.shape != arr.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} does not match model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)
            loaded.append(name)
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing}")
        return loaded

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = xavier(rng, d_in, d_out)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = ones(d)
        self.beta = zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    ``mask`` is boolean, broadcastable to (B, heads, Tq, Tk); True = may attend.
    The last attention weights (B, heads, Tq, Tk) are kept in ``last_weights``
    when ``retain`` is set.
    """

    def __init__(self, rng: np.random.Generator, d_model: int, heads: int, attn_dropout: float = 0.0):
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(rng, d_model, d_model)
        self.wk = Linear(rng, d_model, d_model)
        self.wv = Linear(rng, d_model, d_model)
        self.wo = Linear(rng, d_model, d_model)
        self.attn_dropout = attn_dropout
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return T.transpose(T.reshape(x, (b, t, self.heads, self.d_head)), (0, 2, 1, 3))

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None, ctx: ForwardContext,
                 retain: bool = False) -> Tensor:
        b, tq, d = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(memory))
        v = self._split(self.wv(memory))
        scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.d_head))
        if mask is not None:
            mask = np.broadcast_to(mask, scores.shape)
        weights = T.softmax(scores, axis=-1, mask=mask)
        self.last_weights = weights.data if retain else None
        weights = ctx.dropout(weights, self.attn_dropout)
        out = T.matmul(weights, v)
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, tq, d))
        return self.wo(out)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_ff: int):
        self.w1 = Linear(rng, d_model, d_ff)
        self.w2 = Linear(rng, d_ff, d_model)

    def __call__(self, x: Tensor, ctx: ForwardContext, p: float = 0.0) -> Tensor:
        return self.w2(ctx.dropout(T.relu(self.w1(x)), p))


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even channels, cos on odd ones."""
    if d_model % 2:
        raise ValueError(f"positional encoding needs even d_model, got {d_model}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe
