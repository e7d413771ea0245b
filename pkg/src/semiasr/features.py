"""Utterance features: deltas, per-speaker normalisation, batching, manifests,
and the synthetic token-template corpus used for desk-scale runs."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics.tensorio import load_tensor, save_tensor

BLANK, PAD, SOS, EOS = "<blank>", "<pad>", "<sos>", "<eos>"
RESERVED = (BLANK, PAD, SOS, EOS)


class Vocabulary:
    """Character vocabulary with reserved ids blank=0, pad=1, sos=2, eos=3."""

    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        for tok in tokens:
            if tok in RESERVED:
                raise ValueError(f"token {tok!r} collides with a reserved symbol")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.itos: list[str] = list(RESERVED) + tokens
        self.stoi: dict[str, int] = {s: i for i, s in enumerate(self.itos)}

    blank = 0
    pad = 1
    sos = 2
    eos = 3

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> Vocabulary:
        return cls(sorted({ch for text in texts for ch in text}))

    @property
    def tokens(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self.stoi[ch] for ch in text)
        except KeyError as exc:
            raise KeyError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.itos[i] for i in ids if i >= len(RESERVED))

    def to_json(self) -> list[str]:
        return self.tokens

    @classmethod
    def from_json(cls, tokens: list[str]) -> Vocabulary:
        return cls(tokens)


@dataclass
class FeatureSequence:
    utt_id: str
    speaker_id: str
    frames: np.ndarray
    transcript: tuple[int, ...] = ()
    text: str = ""

    @property
    def duration_frames(self) -> int:
        return int(self.frames.shape[0])

    def validate(self, vocab_size: int | None = None) -> None:
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"{self.utt_id}: frames must be (t >= 1, D), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise ValueError(f"{self.utt_id}: non-finite frames")
        if vocab_size is not None and any(not 0 <= y < vocab_size for y in self.transcript):
            raise ValueError(f"{self.utt_id}: token id out of range for vocabulary of {vocab_size}")


@dataclass
class Batch:
    utt_ids: list[str]
    features: np.ndarray  # (B, t_max, D_in)
    feature_lengths: np.ndarray
    targets: np.ndarray  # (B, N_max), pad-filled
    target_lengths: np.ndarray
    pad_mask: np.ndarray  # (B, t_max), True on padding
    texts: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utt_ids)


# ---------------------------------------------------------------------------
# feature transforms
# ---------------------------------------------------------------------------


def deltas(frames: np.ndarray, window: int = 2) -> np.ndarray:
    """Regression deltas with edge replication."""
    t = frames.shape[0]
    padded = np.concatenate([np.repeat(frames[:1], window, 0), frames, np.repeat(frames[-1:], window, 0)])
    denom = 2.0 * sum(k * k for k in range(1, window + 1))
    out = np.zeros_like(frames, dtype=np.float64)
    for k in range(1, window + 1):
        out += k * (padded[window + k : window + k + t] - padded[window - k : window - k + t])
    return out / denom


def add_deltas(frames: np.ndarray, window: int = 2) -> np.ndarray:
    """(t, D) -> (t, 3D) as [static, delta, delta-delta]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"add_deltas expects (t >= 1, D) frames, got {frames.shape}")
    d1 = deltas(frames, window)
    d2 = deltas(d1, window)
    return np.concatenate([frames, d1, d2], axis=1)


def speaker_normalize(corpus: Sequence[FeatureSequence], var_floor: float = 1e-10) -> list[FeatureSequence]:
    """Per-speaker, per-dimension mean/variance normalisation.

    Dimensions whose variance within a speaker is below ``var_floor`` are
    only mean-subtracted.
    """
    if not corpus:
        raise ValueError("speaker_normalize: empty corpus")
    by_spk: dict[str, list[int]] = {}
    for i, utt in enumerate(corpus):
        by_spk.setdefault(utt.speaker_id, []).append(i)
    out: list[FeatureSequence | None] = [None] * len(corpus)
    for idxs in by_spk.values():
        stacked = np.concatenate([corpus[i].frames for i in idxs], axis=0).astype(np.float64)
        mu = stacked.mean(axis=0)
        var = stacked.var(axis=0)
        std = np.where(var < var_floor, 1.0, np.sqrt(var))
        for i in idxs:
            out[i] = replace(corpus[i], frames=(corpus[i].frames - mu) / std)
    return out  # type: ignore[return-value]


def prepare(corpus: Sequence[FeatureSequence], use_deltas: bool = True) -> list[FeatureSequence]:
    """Static frames -> deltas (optional) -> per-speaker normalisation."""
    if use_deltas:
        corpus = [replace(u, frames=add_deltas(u.frames)) for u in corpus]
    return speaker_normalize(corpus)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def collate(utts: Sequence[FeatureSequence], pad_id: int = Vocabulary.pad, dtype=np.float64) -> Batch:
    b = len(utts)
    lengths = np.array([u.duration_frames for u in utts], dtype=np.int64)
    tlens = np.array([len(u.transcript) for u in utts], dtype=np.int64)
    dim = utts[0].frames.shape[1]
    feats = np.zeros((b, int(lengths.max()), dim), dtype=dtype)
    targets = np.full((b, max(int(tlens.max()), 1)), pad_id, dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, : lengths[i]] = u.frames
        targets[i, : tlens[i]] = u.transcript
    pad_mask = np.arange(feats.shape[1])[None, :] >= lengths[:, None]
    return Batch([u.utt_id for u in utts], feats, lengths, targets, tlens, pad_mask, [u.text for u in utts])


def batch_order(lengths: Sequence[int], epoch_index: int, seed: int) -> np.ndarray:
    """SortaGrad: ascending length in epoch 0, seeded shuffle afterwards."""
    if epoch_index == 0:
        return np.argsort(np.asarray(lengths), kind="stable")
    return np.random.default_rng([int(seed), int(epoch_index)]).permutation(len(lengths))


def make_batches(corpus: Sequence[FeatureSequence], batch_size: int, epoch_index: int, seed: int,
                 dtype=np.float64) -> list[Batch]:
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = batch_order([u.duration_frames for u in corpus], epoch_index, seed)
    return [
        collate([corpus[i] for i in order[s : s + batch_size]], dtype=dtype)
        for s in range(0, len(order), batch_size)
    ]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def read_manifest(path: str | os.PathLike, vocab: Vocabulary | None = None) -> list[FeatureSequence]:
    """Load a JSON-lines manifest of static (t, D) feature matrices.

    ``feature_path`` entries are resolved relative to the manifest directory.
    """
    path = Path(path)
    utts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = {"utt_id", "speaker_id"} - rec.keys()
            if missing:
                raise ValueError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            if "frames_inline" in rec:
                frames = np.asarray(rec["frames_inline"], dtype=np.float64)
            elif "feature_path" in rec:
                frames = load_tensor(path.parent / rec["feature_path"]).astype(np.float64)
            else:
                raise ValueError(f"{path}:{lineno}: needs feature_path or frames_inline")
            text = rec.get("transcript", "")
            ids = vocab.encode(text) if vocab is not None else ()
            utt = FeatureSequence(rec["utt_id"], rec["speaker_id"], frames, ids, text)
            utt.validate(len(vocab) if vocab is not None else None)
            utts.append(utt)
    return utts


def write_manifest(path: str | os.PathLike, corpus: Sequence[FeatureSequence], feature_dir: str = "feats",
                   inline: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fdir = path.parent / feature_dir
    if not inline:
        fdir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for utt in corpus:
            rec = {"utt_id": utt.utt_id, "speaker_id": utt.speaker_id}
            if inline:
                rec["frames_inline"] = utt.frames.tolist()
            else:
                fname = f"{utt.utt_id}.mpet"
                save_tensor(fdir / fname, np.asarray(utt.frames, dtype=np.float32))
                rec["feature_path"] = f"{feature_dir}/{fname}"
            rec["transcript"] = utt.text
            fh.write(json.dumps(rec) + "\n")


def attach_transcripts(corpus: Sequence[FeatureSequence], vocab: Vocabulary) -> list[FeatureSequence]:
    return [replace(u, transcript=vocab.encode(u.text)) for u in corpus]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_ALPHABET = "abcdefghijklmnopqrstuvwxyz"


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic corpus.

    Each content token owns a fixed (frames_per_token, feature_dim) spectral
    template drawn from ``template_seed``; utterances concatenate templates,
    add a per-speaker offset and gain, and seeded Gaussian noise.
    """

    num_utterances: int = 32
    vocab_size: int = 16
    min_tokens: int = 3
    max_tokens: int = 8
    frames_per_token: int = 8
    duration_jitter: int = 0
    feature_dim: int = 80
    num_speakers: int = 4
    noise: float = 0.3
    space_prob: float = 0.25
    template_seed: int = 1234

    def alphabet(self) -> list[str]:
        if not 2 <= self.vocab_size <= len(SYNTH_ALPHABET) + 1:
            raise ValueError(f"synthetic vocab_size must lie in [2, {len(SYNTH_ALPHABET) + 1}]")
        return list(SYNTH_ALPHABET[: self.vocab_size - 1]) + [" "]


def synth_vocabulary(spec: SynthSpec) -> Vocabulary:
    return Vocabulary(sorted(spec.alphabet()))


def token_templates(spec: SynthSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.template_seed)
    freq = np.arange(spec.feature_dim)
    out = {}
    for tok in spec.alphabet():
        # two formant-like bumps drifting across the token's frames
        centers = rng.uniform(0, spec.feature_dim, size=2)
        drift = rng.normal(0, spec.feature_dim / 20, size=2)
        widths = rng.uniform(1, max(spec.feature_dim / 8, 2), size=2)
        amps = rng.uniform(1.0, 3.0, size=2)
        frames = np.zeros((spec.frames_per_token, spec.feature_dim))
        for f in range(spec.frames_per_token):
            frac = f / max(spec.frames_per_token - 1, 1)
            for c, d, w, a in zip(centers, drift, widths, amps):
                frames[f] += a * np.exp(-0.5 * ((freq - (c + d * frac)) / w) ** 2)
        frames += 0.3 * rng.normal(size=frames.shape)
        out[tok] = frames
    return out


def _random_text(rng: np.random.Generator, spec: SynthSpec) -> str:
    letters = spec.alphabet()[:-1]
    n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    chars: list[str] = []
    for i in range(n):
        can_space = 0 < i < n - 1 and chars[-1] != " "
        if can_space and rng.random() < spec.space_prob:
            chars.append(" ")
        else:
            chars.append(letters[int(rng.integers(len(letters)))])
    return "".join(chars)


def render_text(text: str, templates: dict[str, np.ndarray], rng: np.random.Generator, spec: SynthSpec,
                speaker_offset: np.ndarray, speaker_gain: float) -> np.ndarray:
    pieces = []
    for ch in text:
        tpl = templates[ch]
        if spec.duration_jitter:
            n = spec.frames_per_token + int(rng.integers(-spec.duration_jitter, spec.duration_jitter + 1))
            src = np.linspace(0, len(tpl) - 1, max(n, 1))
            tpl = np.stack([np.interp(src, np.arange(len(tpl)), tpl[:, d]) for d in range(tpl.shape[1])], axis=1)
        pieces.append(tpl)
    frames = np.concatenate(pieces, axis=0) * speaker_gain + speaker_offset
    if spec.noise > 0:
        frames = frames + spec.noise * rng.normal(size=frames.shape)
    return frames


def synthesize_corpus(spec: SynthSpec, seed: int, prefix: str = "syn") -> list[FeatureSequence]:
    """Deterministic synthetic utterances of static (t, feature_dim) frames."""
    if spec.num_utterances < 1 or spec.min_tokens < 1 or spec.max_tokens < spec.min_tokens:
        raise ValueError(f"invalid synthetic corpus spec {spec}")
    vocab = synth_vocabulary(spec)
    templates = token_templates(spec)
    spk_rng = np.random.default_rng([spec.template_seed, 7])
    offsets = spk_rng.normal(0, 1.0, size=(spec.num_speakers, spec.feature_dim))
    gains = spk_rng.uniform(0.7, 1.3, size=spec.num_speakers)
    corpus = []
    for i in range(spec.num_utterances):
        rng = np.random.default_rng([int(seed), i])
        text = _random_text(rng, spec)
        spk = i % spec.num_speakers
        frames = render_text(text, templates, rng, spec, offsets[spk], gains[spk])
        corpus.append(FeatureSequence(f"{prefix}{seed}-{i:05d}", f"spk{spk}", frames, vocab.encode(text), text))
    return corpus
