"""Masked pretrained encoder: strided conv downsampler, frame masking,
sinusoidal positions, bidirectional post-LN transformer, and the L1
reconstruction objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import tensor as T
from .numerics.nn import (
    EVAL,
    FeedForward,
    ForwardContext,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    _param,
    positional_encoding,
    zeros,
)
from .numerics.tensor import Tensor

ZERO, SWAP, KEEP = 0, 1, 2
LOSS_MODES = ("masked", "unmasked", "all")

__all__ = [
    "ZERO", "SWAP", "KEEP", "MaskPlan", "make_mask_plan", "apply_mask", "apply_masks",
    "downsampled_length", "positional_encoding", "EncoderOutput", "MaskedPretrainedEncoder",
    "reconstruction_loss", "position_selection", "pretrain_loss", "band_mass",
]


def downsampled_length(t: int | np.ndarray, layers: int = 2, stride: int = 2):
    """Frames left after ``layers`` stride-``stride`` convs with padding 1, kernel 3."""
    out = np.asarray(t)
    for _ in range(layers):
        out = -(-out // stride)
    return int(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    length: int
    indices: np.ndarray
    actions: np.ndarray
    sources: np.ndarray
    seed: object = None

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.sources = np.asarray(self.sources, dtype=np.int64)

    @classmethod
    def empty(cls, length: int) -> MaskPlan:
        return cls(length, np.zeros(0), np.zeros(0), np.zeros(0))

    def __len__(self) -> int:
        return len(self.indices)

    def validate(self, length: int) -> None:
        if self.length != length:
            raise ValueError(f"mask plan built for T={self.length} applied to T={length}")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= length):
            raise ValueError("mask plan index out of range")
        swaps = self.actions == SWAP
        if swaps.any() and (self.sources[swaps].min() < 0 or self.sources[swaps].max() >= length):
            raise ValueError("mask plan swap source out of range")


def make_mask_plan(length: int, seed, ratio: float = 0.15, probs=(0.8, 0.1, 0.1)) -> MaskPlan:
    """Pick round(ratio * length) frames; each is zeroed, swapped or kept."""
    rng = np.random.default_rng(seed)
    n = int(math.floor(ratio * length + 0.5))
    idx = np.sort(rng.choice(length, size=n, replace=False)) if n else np.zeros(0, dtype=np.int64)
    actions = rng.choice(3, size=n, p=probs)
    sources = np.full(n, -1, dtype=np.int64)
    for j in np.flatnonzero(actions == SWAP):
        if length == 1:
            sources[j] = 0
        else:
            s = int(rng.integers(length - 1))
            sources[j] = s + (s >= idx[j])
    return MaskPlan(length, idx, actions, sources, seed)


def _mask_maps(plans: list[MaskPlan], t_max: int) -> tuple[np.ndarray, np.ndarray]:
    b = len(plans)
    src = np.tile(np.arange(t_max), (b, 1))
    keep = np.ones((b, t_max))
    for i, plan in enumerate(plans):
        plan.validate(plan.length)
        if plan.length > t_max:
            raise ValueError(f"mask plan length {plan.length} exceeds batch T={t_max}")
        for pos, act, s in zip(plan.indices, plan.actions, plan.sources):
            if act == ZERO:
                keep[i, pos] = 0.0
            elif act == SWAP:
                src[i, pos] = s
    return src, keep


def apply_masks(h: Tensor, plans: list[MaskPlan]) -> Tensor:
    """Batched masking of (B, T, d) downsampled frames."""
    b, t_max, _ = h.shape
    if len(plans) != b:
        raise ValueError(f"{len(plans)} mask plans for batch of {b}")
    src, keep = _mask_maps(plans, t_max)
    if (src == np.arange(t_max)).all() and keep.all():
        return h
    rows = np.arange(b)[:, None]
    gathered = T.getitem(h, (rows, src))
    return T.mul(gathered, Tensor(keep[..., None], dtype=h.dtype))


def apply_mask(h: Tensor, plan: MaskPlan) -> Tensor:
    """Mask one (T, d) sequence."""
    plan.validate(h.shape[0])
    return T.reshape(apply_masks(T.reshape(h, (1,) + h.shape), [plan]), h.shape)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3):
        fan_in = c_in * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        self.weight = _param(rng.uniform(-bound, bound, size=(kernel, kernel, c_in, c_out)))
        self.bias = zeros(c_out)

    def __call__(self, x: Tensor, stride: int, padding: int) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=stride, padding=padding)


class EncoderBlock(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, heads: int, d_ff: int, dropout: float,
                 attn_dropout: float):
        self.attn = MultiHeadAttention(rng, d_model, heads, attn_dropout)
        self.ln1 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)
        self.ln2 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, x: Tensor, mask: np.ndarray | None, ctx: ForwardContext, retain: bool = False) -> Tensor:
        x = self.ln1(x + ctx.dropout(self.attn(x, x, mask, ctx, retain), self.dropout))
        return self.ln2(x + ctx.dropout(self.ff(x, ctx, self.dropout), self.dropout))


@dataclass
class EncoderOutput:
    e: Tensor
    lengths: np.ndarray
    attention_maps: list[np.ndarray] = field(default_factory=list)


class MaskedPretrainedEncoder(Module):
    """Conv/conv downsampler + linear projection + N_e bidirectional blocks.

    Input features are (B, t, channels * bins) with channel-major layout,
    i.e. [static | delta | delta-delta] for the default three channels.
    """

    def __init__(self, rng: np.random.Generator, *, feature_dim: int = 80, in_channels: int = 3,
                 conv_channels=(64, 128), d_model: int = 64, heads: int = 4, layers: int = 4,
                 d_ff: int = 256, dropout: float = 0.1, attn_dropout: float = 0.1):
        self.feature_dim = feature_dim
        self.in_channels = in_channels
        self.d_model = d_model
        chans = [in_channels] + list(conv_channels)
        self.convs = [Conv2d(rng, chans[i], chans[i + 1]) for i in range(len(conv_channels))]
        bins = downsampled_length(feature_dim, layers=len(conv_channels))
        self.proj = Linear(rng, bins * chans[-1], d_model)
        self.blocks = [EncoderBlock(rng, d_model, heads, d_ff, dropout, attn_dropout) for _ in range(layers)]

    def output_lengths(self, lengths: np.ndarray) -> np.ndarray:
        return np.asarray(downsampled_length(np.asarray(lengths), layers=len(self.convs)))

    def downsample(self, features: Tensor, lengths: np.ndarray) -> Tensor:
        """(B, t, C*F) -> (B, T, d_model). Frames past each length are zeroed
        between convolutions so padding never leaks into valid outputs."""
        b, t, dim = features.shape
        if dim != self.in_channels * self.feature_dim:
            raise ValueError(f"downsample: expected {self.in_channels}x{self.feature_dim} features, got {dim}")
        x = T.transpose(T.reshape(features, (b, t, self.in_channels, self.feature_dim)), (0, 1, 3, 2))
        lens = np.asarray(lengths)
        x = self._zero_past(x, lens)
        for conv in self.convs:
            x = T.relu(conv(x, stride=2, padding=1))
            lens = -(-lens // 2)
            x = self._zero_past(x, lens)
        b, tt, f, c = x.shape
        return self.proj(T.reshape(x, (b, tt, f * c)))

    @staticmethod
    def _zero_past(x: Tensor, lens: np.ndarray) -> Tensor:
        valid = np.arange(x.shape[1])[None, :] < lens[:, None]
        if valid.all():
            return x
        return T.mul(x, Tensor(valid[:, :, None, None].astype(x.dtype), dtype=x.dtype))

    @staticmethod
    def add_positions(h: Tensor) -> Tensor:
        _, t, d = h.shape
        return h + Tensor(positional_encoding(t, d), dtype=h.dtype)

    def encode(self, x: Tensor, lengths: np.ndarray, ctx: ForwardContext = EVAL,
               retain_attention: bool = False) -> EncoderOutput:
        """Run the bidirectional block stack on (B, T, d) position-tagged inputs."""
        t = x.shape[1]
        valid = np.arange(t)[None, :] < np.asarray(lengths)[:, None]
        mask = valid[:, None, None, :]
        maps = []
        for block in self.blocks:
            x = block(x, mask, ctx, retain_attention)
            if retain_attention:
                maps.append(block.attn.last_weights)
        return EncoderOutput(x, np.asarray(lengths), maps)

    def __call__(self, features: Tensor, lengths: np.ndarray, ctx: ForwardContext = EVAL,
                 retain_attention: bool = False) -> EncoderOutput:
        h = self.add_positions(self.downsample(features, lengths))
        return self.encode(h, self.output_lengths(lengths), ctx, retain_attention)


# ---------------------------------------------------------------------------
# pretraining objective
# ---------------------------------------------------------------------------


def position_selection(plans: list[MaskPlan], lengths: np.ndarray, t_max: int, mode: str) -> np.ndarray:
    """(B, T) boolean map of the frames scored under ``mode``."""
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    valid = np.arange(t_max)[None, :] < np.asarray(lengths)[:, None]
    masked = np.zeros_like(valid)
    for i, plan in enumerate(plans):
        masked[i, plan.indices] = True
    if mode == "masked":
        return masked & valid
    if mode == "unmasked":
        return valid & ~masked
    return valid


def reconstruction_loss(e: Tensor, target: Tensor, selection: np.ndarray) -> Tensor:
    """Mean absolute error over the selected (B, T) positions and all dims."""
    count = int(selection.sum())
    if count == 0:
        raise ValueError("reconstruction_loss: no positions selected")
    if e.shape != target.shape:
        raise ValueError(f"reconstruction_loss: shape mismatch {e.shape} vs {target.shape}")
    sel = Tensor(selection[..., None].astype(e.dtype), dtype=e.dtype)
    return T.scale(T.tsum(T.mul(T.tabs(e - target), sel)), 1.0 / (count * e.shape[-1]))


def pretrain_loss(model: MaskedPretrainedEncoder, features: Tensor, lengths: np.ndarray, plans: list[MaskPlan],
                  ctx: ForwardContext, mode: str = "masked", retain_attention: bool = False,
                  train_downsampler: bool = False):
    """Downsample, mask, encode and score against the clean downsampled frames.

    The target is always detached. With ``train_downsampler`` off the
    downsampler receives no gradient at all and acts as a fixed feature map;
    when on, the masked-input path updates it and the target drifts with it.
    """
    h_clean = model.downsample(features, lengths)
    if not train_downsampler:
        h_clean = h_clean.detach()
    out_lens = model.output_lengths(lengths)
    h_masked = apply_masks(h_clean, plans)
    out = model.encode(model.add_positions(h_masked), out_lens, ctx, retain_attention)
    sel = position_selection(plans, out_lens, h_clean.shape[1], mode)
    return reconstruction_loss(out.e, h_clean.detach(), sel), out


def band_mass(weights: np.ndarray, length: int | None = None, width: int = 2) -> float:
    """Mean over query rows of the attention mass within ``|i - j| <= width``."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[-1] if length is None else int(length)
    w = w[..., :n, :n]
    i, j = np.indices((n, n))
    return float((w * (np.abs(i - j) <= width)).sum(-1).mean())
