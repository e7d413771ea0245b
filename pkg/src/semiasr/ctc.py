"""Connectionist temporal classification.

All lattice arithmetic is in log space; only :func:`ctc_brute_force`
works with probabilities, and only on instances small enough to enumerate.
Blank is id 0 throughout.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .numerics.tensor import Tensor, custom_op

BLANK = 0
NEG_INF = -np.inf


def _lse(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = np.logaddexp(out, x)
    return out


def extend_labels(labels, blank: int = BLANK) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def repeats(labels) -> int:
    return int(sum(1 for a, b in zip(labels, labels[1:]) if a == b))


def is_feasible(num_frames: int, labels) -> bool:
    return num_frames >= len(labels) + repeats(labels)


def ctc_lattice(log_probs: np.ndarray, labels, blank: int = BLANK) -> tuple[np.ndarray, np.ndarray]:
    """Forward (alpha) and backward (beta) log lattices over the extended labels.

    Both include the emission at their own frame, so
    ``alpha[t, s] + beta[t, s] - log_probs[t, ext[s]]`` is the log mass of
    paths through node (t, s).
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames = lp.shape[0]
    ext = extend_labels(labels, blank)
    s_len = len(ext)
    emit = lp[:, ext]  # (T, S)
    skip = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((n_frames, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]

    beta = np.full((n_frames, s_len), NEG_INF)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)  # may jump s -> s+2
    skip_from[:-2] = skip[2:]
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    return alpha, beta


@dataclass
class CtcResult:
    loss: float
    grad: np.ndarray
    feasible: bool


def ctc_loss(log_probs: np.ndarray, labels, blank: int = BLANK) -> CtcResult:
    """-log P(labels | log_probs) and its gradient w.r.t. ``log_probs``.

    Infeasible instances give ``loss=inf``, a zero gradient and
    ``feasible=False`` rather than raising.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    labels = [int(y) for y in labels]
    if any(y == blank for y in labels):
        raise ValueError("ctc_loss: labels must not contain the blank id")
    n_frames, vocab = lp.shape
    if n_frames == 0 or not is_feasible(n_frames, labels):
        return CtcResult(float("inf"), np.zeros_like(lp), False)
    alpha, beta = ctc_lattice(lp, labels, blank)
    ext = extend_labels(labels, blank)
    tail = alpha[-1, -1] if len(ext) == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    if not np.isfinite(tail):
        return CtcResult(float("inf"), np.zeros_like(lp), False)
    occ = np.exp(alpha + beta - lp[:, ext] - tail)  # (T, S) posterior of each node
    onehot = np.zeros((len(ext), vocab))
    onehot[np.arange(len(ext)), ext] = 1.0
    grad = -(occ @ onehot)
    return CtcResult(float(-tail), grad, True)


def ctc_loss_batch(log_probs: Tensor, lengths, targets: np.ndarray, target_lengths, blank: int = BLANK):
    """Mean CTC loss over the feasible utterances of a padded batch.

    ``log_probs`` is (B, T, V). Returns ``(loss_tensor, per_utt_losses,
    feasible_flags)``; infeasible utterances are excluded from the mean.
    """
    lp = log_probs.data
    b = lp.shape[0]
    grad = np.zeros(lp.shape, dtype=np.float64)
    losses = np.full(b, np.inf)
    feasible = np.zeros(b, dtype=bool)
    for i in range(b):
        n = int(lengths[i])
        res = ctc_loss(lp[i, :n], targets[i, : int(target_lengths[i])], blank)
        losses[i], feasible[i] = res.loss, res.feasible
        grad[i, :n] = res.grad
    k = int(feasible.sum())
    value = float(losses[feasible].sum() / k) if k else 0.0
    grad = (grad / max(k, 1)).astype(lp.dtype)
    out = custom_op(np.asarray(value, dtype=lp.dtype), (log_probs,), lambda g: (g * grad,), "ctc_loss")
    return out, losses, feasible


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def collapse(path, blank: int = BLANK) -> tuple[int, ...]:
    """Merge repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_brute_force(log_probs: np.ndarray, labels, blank: int = BLANK, max_paths: int = 10**6) -> float:
    """-log of the summed probability of every path collapsing to ``labels``."""
    probs = np.exp(np.asarray(log_probs, dtype=np.float64))
    n_frames, vocab = probs.shape
    if vocab**n_frames > max_paths:
        raise ValueError(f"ctc_brute_force: {vocab}^{n_frames} paths exceeds limit {max_paths}")
    target = tuple(int(y) for y in labels)
    total = 0.0
    rows = np.arange(n_frames)
    for path in itertools.product(range(vocab), repeat=n_frames):
        if collapse(path, blank) == target:
            total += float(np.prod(probs[rows, path]))
    return float("inf") if total == 0.0 else -np.log(total)


def label_sequence_scores(log_probs: np.ndarray, blank: int = BLANK, max_paths: int = 10**6) -> dict[tuple, float]:
    """Log probability of every label sequence reachable by some path."""
    probs = np.exp(np.asarray(log_probs, dtype=np.float64))
    n_frames, vocab = probs.shape
    if vocab**n_frames > max_paths:
        raise ValueError(f"label_sequence_scores: {vocab}^{n_frames} paths exceeds limit {max_paths}")
    totals: dict[tuple, float] = {}
    rows = np.arange(n_frames)
    for path in itertools.product(range(vocab), repeat=n_frames):
        key = collapse(path, blank)
        totals[key] = totals.get(key, 0.0) + float(np.prod(probs[rows, path]))
    return {k: float(np.log(v)) for k, v in totals.items() if v > 0}


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def ctc_greedy_decode(log_probs: np.ndarray, blank: int = BLANK) -> tuple[int, ...]:
    return collapse(np.argmax(np.asarray(log_probs), axis=-1), blank)


def ctc_prefix_beam(log_probs: np.ndarray, beam_width: int = 10, blank: int = BLANK,
                    tokens=None) -> list[tuple[tuple[int, ...], float]]:
    """Prefix beam search keeping (blank, non-blank) log mass per prefix.

    ``tokens`` restricts the non-blank symbols considered (default: all).
    Returns ``[(prefix, log_prob), ...]`` best first.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    lp = np.asarray(log_probs, dtype=np.float64)
    n_frames, vocab = lp.shape
    cands = [c for c in (range(vocab) if tokens is None else tokens) if c != blank]
    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(n_frames):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(prefix):
            s = nxt.get(prefix)
            if s is None:
                s = nxt[prefix] = [NEG_INF, NEG_INF]
            return s

        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            s = slot(prefix)
            s[0] = np.logaddexp(s[0], total + row[blank])
            last = prefix[-1] if prefix else None
            for c in cands:
                p = row[c]
                ext = slot(prefix + (c,))
                if c == last:
                    ext[1] = np.logaddexp(ext[1], pb + p)
                    s[1] = np.logaddexp(s[1], pnb + p)
                else:
                    ext[1] = np.logaddexp(ext[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-np.logaddexp(*kv[1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam_width]}
    out = [(k, float(np.logaddexp(*v))) for k, v in beams.items()]
    out.sort(key=lambda kv: (-kv[1], kv[0]))
    return out


class CtcPrefixScorer:
    """Incremental CTC prefix probabilities for label-synchronous decoding.

    A state is a (T, 2) array of [non-blank, blank] log masses of the prefix
    ending at each frame. ``score`` gives, for each candidate c, the log
    probability that the output starts with prefix + c; for ``eos`` it gives
    the probability that the output equals the prefix exactly.
    """

    def __init__(self, log_probs: np.ndarray, eos: int, blank: int = BLANK):
        self.lp = np.asarray(log_probs, dtype=np.float64)
        self.eos = eos
        self.blank = blank

    def initial_state(self) -> np.ndarray:
        n = self.lp.shape[0]
        r = np.full((n, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.lp[:, self.blank])
        return r

    def score(self, state: np.ndarray, last: int | None, cands: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (psi per candidate, new states (C, T, 2))."""
        lp = self.lp
        n = lp.shape[0]
        cands = np.asarray(cands, dtype=np.int64)
        total = np.logaddexp(state[:, 0], state[:, 1])  # (T,)
        xs = lp[:, cands]  # (T, C)
        phi = np.repeat(total[:, None], len(cands), axis=1)
        if last is not None:
            same = cands == last
            phi[:, same] = state[:, 1:2]
        r = np.full((n, len(cands), 2), NEG_INF)
        if last is None:
            r[0, :, 0] = xs[0]
        psi = r[0, :, 0].copy()
        for t in range(1, n):
            r[t, :, 0] = np.logaddexp(r[t - 1, :, 0], phi[t - 1]) + xs[t]
            r[t, :, 1] = np.logaddexp(r[t - 1, :, 0], r[t - 1, :, 1]) + lp[t, self.blank]
            psi = np.logaddexp(psi, phi[t - 1] + xs[t])
        is_eos = cands == self.eos
        psi[is_eos] = total[-1]
        return psi, np.transpose(r, (1, 0, 2))
