"""Autoregressive transformer decoder, the joint CTC/attention model and its
beam search."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ctc import CtcPrefixScorer, ctc_loss_batch
from .encoder import MaskedPretrainedEncoder
from .features import Batch, Vocabulary
from .numerics import tensor as T
from .numerics.nn import (
    EVAL,
    FeedForward,
    ForwardContext,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    positional_encoding,
    xavier,
    zeros,
)
from .numerics.tensor import Tensor, custom_op


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular (n, n) 0/1 matrix: row u may attend to columns <= u."""
    if n < 1:
        raise ValueError("causal_mask needs n >= 1")
    return np.tril(np.ones((n, n), dtype=np.int64))


class DecoderBlock(Module):
    def __init__(self, rng, d_model: int, heads: int, d_ff: int, dropout: float, attn_dropout: float):
        self.self_attn = MultiHeadAttention(rng, d_model, heads, attn_dropout)
        self.ln1 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, heads, attn_dropout)
        self.ln2 = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)
        self.ln3 = LayerNorm(d_model)
        self.dropout = dropout

    def __call__(self, x, memory, self_mask, mem_mask, ctx, retain=False):
        p = self.dropout
        x = self.ln1(x + ctx.dropout(self.self_attn(x, x, self_mask, ctx, retain), p))
        x = self.ln2(x + ctx.dropout(self.cross_attn(x, memory, mem_mask, ctx, retain), p))
        return self.ln3(x + ctx.dropout(self.ff(x, ctx, p), p))


class TransformerDecoder(Module):
    def __init__(self, rng, vocab_size: int, d_model: int = 64, heads: int = 4, layers: int = 2, d_ff: int = 256,
                 dropout: float = 0.1, attn_dropout: float = 0.1, tie_embeddings: bool = False):
        self.d_model = d_model
        self.embed = xavier(rng, vocab_size, d_model)
        self.blocks = [DecoderBlock(rng, d_model, heads, d_ff, dropout, attn_dropout) for _ in range(layers)]
        self.tie_embeddings = tie_embeddings
        if tie_embeddings:
            self.out_bias = zeros(vocab_size)
        else:
            self.out = Linear(rng, d_model, vocab_size)
        self.dropout = dropout

    def __call__(self, ys_in: np.ndarray, memory: Tensor, mem_lengths, ys_lengths=None,
                 ctx: ForwardContext = EVAL, retain_attention: bool = False) -> Tensor:
        """(B, N) token ids attending over (B, T, d) memory -> (B, N, V) logits."""
        ys_in = np.asarray(ys_in)
        b, n = ys_in.shape
        x = T.scale(T.embedding(self.embed, ys_in), math.sqrt(self.d_model))
        x = ctx.dropout(x + Tensor(positional_encoding(n, self.d_model), dtype=x.dtype), self.dropout)
        if ys_lengths is None:
            ys_lengths = np.full(b, n)
        key_ok = np.arange(n)[None, :] < np.asarray(ys_lengths)[:, None]
        self_mask = causal_mask(n).astype(bool)[None, None] & key_ok[:, None, None, :]
        t = memory.shape[1]
        mem_mask = (np.arange(t)[None, :] < np.asarray(mem_lengths)[:, None])[:, None, None, :]
        for block in self.blocks:
            x = block(x, memory, self_mask, mem_mask, ctx, retain_attention)
        if self.tie_embeddings:
            return T.matmul(x, T.transpose(self.embed, (1, 0))) + self.out_bias
        return self.out(x)


def attention_loss(logits: Tensor, targets: np.ndarray, eps: float = 0.1, ignore_id: int | None = Vocabulary.pad) -> Tensor:
    """Label-smoothed cross-entropy, averaged over non-ignored positions.

    The smoothed target puts 1 - eps on the reference token and
    eps / (V - 1) on each other token.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps}")
    z = logits.data
    v = z.shape[-1]
    targets = np.asarray(targets)
    valid = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    count = int(valid.sum())
    m = z.max(axis=-1, keepdims=True)
    logp = z - (np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m)
    q = np.full(z.shape, eps / (v - 1) if v > 1 else 0.0, dtype=z.dtype)
    np.put_along_axis(q, targets[..., None], 1.0 - eps if v > 1 else 1.0, axis=-1)
    q *= valid[..., None]
    value = -(q * logp).sum() / max(count, 1)
    p = np.exp(logp)

    def bw(g):
        return (g * (p * valid[..., None] - q) / max(count, 1),)

    return custom_op(np.asarray(value, dtype=z.dtype), (logits,), bw, "attention_loss")


def joint_loss(l_ctc, l_att, alpha: float):
    """alpha * ctc + (1 - alpha) * attention."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(l_ctc, Tensor) or isinstance(l_att, Tensor):
        return T.add(T.scale(T.as_tensor(l_ctc), alpha), T.scale(T.as_tensor(l_att), 1.0 - alpha))
    return alpha * l_ctc + (1.0 - alpha) * l_att


def decoder_io(batch: Batch, sos: int = Vocabulary.sos, eos: int = Vocabulary.eos, pad: int = Vocabulary.pad):
    """Teacher-forcing inputs (sos + y) and outputs (y + eos), pad-filled."""
    b = len(batch)
    n = int(batch.target_lengths.max()) + 1
    ys_in = np.full((b, n), pad, dtype=np.int64)
    ys_out = np.full((b, n), pad, dtype=np.int64)
    for i in range(b):
        k = int(batch.target_lengths[i])
        y = batch.targets[i, :k]
        ys_in[i, 0] = sos
        ys_in[i, 1 : k + 1] = y
        ys_out[i, :k] = y
        ys_out[i, k] = eos
    return ys_in, ys_out, batch.target_lengths + 1


class JointCTCTransformer(Module):
    """Shared encoder with a CTC head and an attention decoder."""

    def __init__(self, rng: np.random.Generator, vocab_size: int, *, feature_dim=80, in_channels=3,
                 conv_channels=(64, 128), d_model=64, heads=4, enc_layers=4, dec_layers=2, d_ff=256,
                 dropout=0.1, attn_dropout=0.1, tie_embeddings=False):
        self.vocab_size = vocab_size
        self.mpe = MaskedPretrainedEncoder(rng, feature_dim=feature_dim, in_channels=in_channels,
                                           conv_channels=conv_channels, d_model=d_model, heads=heads,
                                           layers=enc_layers, d_ff=d_ff, dropout=dropout, attn_dropout=attn_dropout)
        self.ctc_head = Linear(rng, d_model, vocab_size)
        self.dec = TransformerDecoder(rng, vocab_size, d_model, heads, dec_layers, d_ff, dropout, attn_dropout,
                                      tie_embeddings)

    def encoder_parameter_names(self) -> list[str]:
        return [f"mpe.{k}" for k, _ in self.mpe.named_parameters()]

    def ctc_log_probs(self, e: Tensor) -> Tensor:
        return T.log_softmax(self.ctc_head(e), axis=-1)

    def losses(self, batch: Batch, alpha: float, eps: float, ctx: ForwardContext = EVAL) -> dict:
        feats = Tensor(batch.features, dtype=T.get_default_dtype())
        enc = self.mpe(feats, batch.feature_lengths, ctx)
        l_ctc, per_utt, feasible = ctc_loss_batch(self.ctc_log_probs(enc.e), enc.lengths, batch.targets,
                                                  batch.target_lengths)
        ys_in, ys_out, ys_len = decoder_io(batch)
        logits = self.dec(ys_in, enc.e, enc.lengths, ys_len, ctx)
        l_att = attention_loss(logits, ys_out, eps)
        return {"loss": joint_loss(l_ctc, l_att, alpha), "ctc": l_ctc, "att": l_att, "logits": logits,
                "ctc_feasible": feasible, "ctc_per_utt": per_utt}


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # sos-prefixed; eos-terminated once finished
    score_att: float
    score_ctc: float
    score: float
    ctc_state: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    @property
    def normalized(self) -> float:
        return self.score / max(self.length, 1)

    def labels(self, eos: int = Vocabulary.eos) -> tuple[int, ...]:
        body = self.tokens[1:]
        return body[:-1] if body and body[-1] == eos else body


def _step_log_probs(decoder: TransformerDecoder, prefixes: np.ndarray, memory: Tensor, mem_len: int) -> np.ndarray:
    r = prefixes.shape[0]
    mem = Tensor(np.repeat(memory.data, r, axis=0), dtype=memory.dtype)
    logits = decoder(prefixes, mem, np.full(r, mem_len))
    z = logits.data[:, -1, :].astype(np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - (np.log(np.exp(z - m).sum(axis=-1, keepdims=True)) + m)


def beam_search(decoder: TransformerDecoder, memory: Tensor, ctc_log_probs: np.ndarray | None, beam_width: int = 10,
                ctc_weight: float = 0.3, max_len: int = 50, tokens=None, sos: int = Vocabulary.sos,
                eos: int = Vocabulary.eos) -> list[Hypothesis]:
    """Label-synchronous beam search for one utterance.

    ``memory`` is (1, T, d). Expansions are scored by
    ``(1 - w) * attention + w * ctc_prefix`` with ``w = ctc_weight``; pruning
    uses raw scores and the returned list is ranked by score per output
    token (eos included). At most ``max_len`` non-eos tokens are emitted.
    """
    if beam_width < 1 or max_len < 1:
        raise ValueError("beam_width and max_len must be >= 1")
    if not 0.0 <= ctc_weight <= 1.0:
        raise ValueError(f"ctc_weight must lie in [0, 1], got {ctc_weight}")
    v = decoder.embed.shape[0]
    if tokens is None:
        tokens = [i for i in range(v) if i not in (Vocabulary.blank, Vocabulary.pad, sos, eos)]
    cands = np.array(sorted(set(tokens) | {eos}), dtype=np.int64)
    eos_only = np.array([eos], dtype=np.int64)
    mem_len = memory.shape[1]
    use_ctc = ctc_weight > 0 and ctc_log_probs is not None
    scorer = CtcPrefixScorer(ctc_log_probs[:mem_len], eos) if use_ctc else None
    running = [Hypothesis((sos,), 0.0, 0.0, 0.0, scorer.initial_state() if use_ctc else None)]
    finished: list[Hypothesis] = []
    for step in range(max_len + 1):
        step_cands = eos_only if step == max_len else cands
        logp = _step_log_probs(decoder, np.array([h.tokens for h in running]), memory, mem_len)
        pool = []
        for r, hyp in enumerate(running):
            att = hyp.score_att + logp[r, step_cands]
            if use_ctc:
                last = hyp.tokens[-1] if len(hyp.tokens) > 1 else None
                psi, states = scorer.score(hyp.ctc_state, last, step_cands)
            else:
                psi, states = np.zeros(len(step_cands)), None
            comb = (1.0 - ctc_weight) * att + ctc_weight * psi if use_ctc else att
            for j, c in enumerate(step_cands):
                if not np.isfinite(comb[j]):
                    continue
                pool.append((float(comb[j]), hyp.tokens + (int(c),), float(att[j]), float(psi[j]),
                             None if states is None else states[j]))
        pool.sort(key=lambda x: (-x[0], x[1]))
        running = []
        for comb, toks, att, psi, state in pool[:beam_width]:
            hyp = Hypothesis(toks, att, psi, comb, state)
            (finished if toks[-1] == eos else running).append(hyp)
        if not running:
            break
    if not finished and use_ctc:
        # CTC ruled out every hypothesis (e.g. memory too short); fall back to attention only
        return beam_search(decoder, memory, None, beam_width, 0.0, max_len, tokens, sos, eos)
    for hyp in finished:
        hyp.ctc_state = None
    finished.sort(key=lambda h: (-h.normalized, h.tokens))
    return finished


def greedy_decode(decoder: TransformerDecoder, memory: Tensor, max_len: int = 50, tokens=None,
                  sos: int = Vocabulary.sos, eos: int = Vocabulary.eos) -> tuple[int, ...]:
    """Argmax autoregressive decoding over content tokens and eos."""
    v = decoder.embed.shape[0]
    if tokens is None:
        tokens = [i for i in range(v) if i not in (Vocabulary.blank, Vocabulary.pad, sos, eos)]
    cands = np.array(sorted(set(tokens) | {eos}), dtype=np.int64)
    seq = [sos]
    for step in range(max_len):
        logp = _step_log_probs(decoder, np.array([seq]), memory, memory.shape[1])[0]
        tok = int(cands[np.argmax(logp[cands])])
        if tok == eos:
            break
        seq.append(tok)
    return tuple(seq[1:])
