"""Two-stage training: masked pretraining of the encoder, then joint CTC /
attention fine-tuning in direct, frozen or scratch mode."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from ..config import RunConfig
from ..decoder import JointCTCTransformer, beam_search, greedy_decode
from ..encoder import MaskedPretrainedEncoder, make_mask_plan, position_selection, pretrain_loss
from ..features import Batch, FeatureSequence, Vocabulary, collate, make_batches
from ..numerics import tensor as T
from ..numerics.nn import EVAL, ForwardContext
from ..numerics.optim import Adam, AdamState, adam_step, clip_by_global_norm
from ..numerics.tensor import NonFiniteError, Tensor, default_dtype, no_grad
from .checkpoint import Checkpoint, CheckpointMismatch
from .metrics import EditCounts, char_errors, word_errors
from .schedule import noam_lr

log = logging.getLogger(__name__)

ENCODER_PREFIX = "mpe."
VALID_PLAN_SALT = 1_000_003
DOWNSAMPLER_PREFIXES = ("mpe.convs.", "mpe.proj.")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: Checkpoint | None, cause: Exception):
        super().__init__(f"non-finite values at step {step}: {cause}")
        self.step = step
        self.last_good = last_good


def write_history_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow(["" if row.get(c) is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in columns])


def epoch_batches(corpus: Sequence[FeatureSequence], batch_size: int, seed: int, dtype) -> Iterator[tuple[int, Batch]]:
    """Endless (epoch, batch) stream; epoch 0 is length-sorted."""
    epoch = 0
    while True:
        for batch in make_batches(corpus, batch_size, epoch, seed, dtype=dtype):
            yield epoch, batch
        epoch += 1


def split_validation(corpus: Sequence[FeatureSequence], fraction: float, seed: int):
    if fraction <= 0 or len(corpus) < 2:
        return list(corpus), []
    n_val = max(1, int(round(fraction * len(corpus))))
    order = np.random.default_rng([int(seed), 17]).permutation(len(corpus))
    val_idx = set(order[:n_val].tolist())
    return [u for i, u in enumerate(corpus) if i not in val_idx], [u for i, u in enumerate(corpus) if i in val_idx]


def _checkpoint(params: dict[str, Tensor], stage: str, step: int, cfg: RunConfig, meta: dict | None = None,
                optimizer: Adam | None = None) -> Checkpoint:
    ckpt = Checkpoint({k: p.data.copy() for k, p in params.items()}, stage, step, cfg.model.architecture_hash(),
                      dict(meta or {}))
    if optimizer is not None:
        o = optimizer.state
        ckpt.optimizer = AdamState(o.step, o.beta1, o.beta2, o.epsilon, {k: v.copy() for k, v in o.m.items()},
                                   {k: v.copy() for k, v in o.v.items()})
    return ckpt


def _sgd_step(loss: Tensor, params: dict[str, Tensor], opt: Adam, lr: float, clip: float) -> float:
    for p in params.values():
        p.grad = None
    loss.backward()
    grads = {k: p.grad for k, p in opt.params.items()}
    norm = clip_by_global_norm(grads, clip)
    adam_step(opt.params, grads, opt.state, lr)
    return norm


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    initial: Checkpoint
    snapshots: dict[int, Checkpoint]
    history: list[dict]
    initial_val_loss: float | None
    best_val_loss: float | None
    steps: int
    stopped_early: bool

    HISTORY_COLUMNS = ("step", "epoch", "lr", "train_loss", "val_loss")


def build_encoder(cfg: RunConfig, seed: int) -> MaskedPretrainedEncoder:
    return MaskedPretrainedEncoder(np.random.default_rng([int(seed), 1]), **cfg.model.encoder_kwargs())


def encoder_params(model: MaskedPretrainedEncoder) -> dict[str, Tensor]:
    return {ENCODER_PREFIX + k: p for k, p in model.named_parameters()}


def _plans(batch: Batch, model: MaskedPretrainedEncoder, cfg: RunConfig, seed_prefix) -> list:
    lens = model.output_lengths(batch.feature_lengths)
    return [make_mask_plan(int(n), list(seed_prefix) + [i], cfg.model.mask_ratio, cfg.model.mask_probs)
            for i, n in enumerate(lens)]


def pretrain_validation_loss(model: MaskedPretrainedEncoder, valid: Sequence[FeatureSequence], cfg: RunConfig,
                             seed: int) -> float | None:
    """Selection-weighted L1 over a held-out set with fixed mask plans;
    None when no held-out frame is scored (e.g. utterances too short to mask)."""
    if not valid:
        return None
    dtype = T.get_default_dtype()
    total, count = 0.0, 0
    with no_grad():
        for b_idx, batch in enumerate(make_batches(valid, cfg.train.batch_size, 0, seed, dtype=dtype)):
            plans = _plans(batch, model, cfg, (seed, VALID_PLAN_SALT, b_idx))
            feats = Tensor(batch.features, dtype=dtype)
            try:
                loss, out = pretrain_loss(model, feats, batch.feature_lengths, plans, EVAL, cfg.model.loss_mode,
                                        train_downsampler=cfg.train.pretrain_downsampler)
            except ValueError:
                continue
            n = int(position_selection(plans, out.lengths, out.e.shape[1], cfg.model.loss_mode).sum())
            total += loss.item() * n
            count += n
    return total / count if count else None


def pretrain(corpus: Sequence[FeatureSequence], cfg: RunConfig, seed: int | None = None,
             valid: Sequence[FeatureSequence] | None = None, max_steps: int | None = None) -> PretrainResult:
    """Masked-reconstruction pretraining with Noam-scheduled Adam and early stopping.

    Returns the best-validation checkpoint (the last one if no validation
    split is available).
    """
    if not corpus:
        raise ValueError("pretrain: empty corpus")
    seed = cfg.seed if seed is None else seed
    tc = cfg.train
    max_steps = tc.max_steps if max_steps is None else max_steps
    if valid is None:
        corpus, valid = split_validation(corpus, tc.val_fraction, seed)
    with default_dtype(tc.dtype):
        dtype = T.get_default_dtype()
        model = build_encoder(cfg, seed)
        params = encoder_params(model)
        fixed = () if tc.pretrain_downsampler else DOWNSAMPLER_PREFIXES
        opt = Adam({k: p for k, p in params.items() if not k.startswith(fixed)})
        meta = {"model": cfg.model.architecture(), "seed": seed}
        initial = _checkpoint(params, "pretrain", 0, cfg, meta)
        best_ckpt = initial
        init_val = pretrain_validation_loss(model, valid, cfg, seed) if valid else None
        if valid and init_val is None:
            log.warning("validation split has no scorable frames; early stopping disabled")
            valid = []
        best_val = init_val
        history = [{"step": 0, "epoch": 0, "lr": None, "train_loss": None, "val_loss": init_val}]
        snapshots: dict[int, Checkpoint] = {}
        bad_evals = 0
        stopped = False
        step = 0
        stream = epoch_batches(corpus, tc.batch_size, seed, dtype)
        cur_epoch = 0
        while step < max_steps:
            epoch, batch = next(stream)
            if epoch != cur_epoch:
                if epoch in tc.snapshot_epochs:
                    snapshots[epoch] = _checkpoint(params, "pretrain", step, cfg, {**meta, "epoch": epoch})
                cur_epoch = epoch
            step += 1
            lr = noam_lr(step, tc.noam_k, cfg.model.d_model, tc.warmup)
            plans = _plans(batch, model, cfg, (seed, step))
            try:
                loss, _ = pretrain_loss(model, Tensor(batch.features, dtype=dtype), batch.feature_lengths, plans,
                                        ForwardContext(True, seed, step), cfg.model.loss_mode,
                                        train_downsampler=tc.pretrain_downsampler)
                _sgd_step(loss, params, opt, lr, tc.grad_clip)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, best_ckpt, exc) from exc
            except ValueError as exc:
                if "no positions selected" not in str(exc):
                    raise
                continue
            row = {"step": step, "epoch": epoch, "lr": lr, "train_loss": loss.item(), "val_loss": None}
            if valid and step % tc.eval_every == 0:
                val = pretrain_validation_loss(model, valid, cfg, seed)
                row["val_loss"] = val
                if best_val is None or val < best_val - tc.min_delta:
                    best_val, bad_evals = val, 0
                    best_ckpt = _checkpoint(params, "pretrain", step, cfg, meta, opt)
                else:
                    bad_evals += 1
                    if bad_evals >= tc.patience:
                        history.append(row)
                        stopped = True
                        break
            history.append(row)
        if not valid:
            best_ckpt = _checkpoint(params, "pretrain", step, cfg, meta, opt) if step else initial
    return PretrainResult(best_ckpt, initial, snapshots, history, init_val, best_val, step, stopped)


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    model: JointCTCTransformer
    history: list[dict]
    frozen: list[str]
    trainable_count: int
    total_count: int
    frozen_count: int
    encoder_before_thaw: dict[str, np.ndarray] = field(default_factory=dict)

    HISTORY_COLUMNS = ("step", "epoch", "phase", "lr", "loss", "ctc", "att")


def build_joint(cfg: RunConfig, vocab_size: int, seed: int) -> JointCTCTransformer:
    return JointCTCTransformer(np.random.default_rng([int(seed), 2]), vocab_size, **cfg.model.joint_kwargs())


def load_encoder_weights(model: JointCTCTransformer, ckpt: Checkpoint, cfg: RunConfig, force: bool = False) -> list[str]:
    if ckpt.config_hash != cfg.model.architecture_hash() and not force:
        raise CheckpointMismatch(
            f"checkpoint encoder config {ckpt.config_hash} differs from {cfg.model.architecture_hash()}")
    enc_state = {k[len(ENCODER_PREFIX):]: v for k, v in ckpt.params.items() if k.startswith(ENCODER_PREFIX)}
    if not enc_state:
        raise CheckpointMismatch("checkpoint holds no encoder parameters")
    model.mpe.load_state_dict(enc_state, strict=True)
    return sorted(ENCODER_PREFIX + k for k in enc_state)


def finetune(corpus: Sequence[FeatureSequence], vocab: Vocabulary, init: Checkpoint | None, mode: str,
             cfg: RunConfig, seed: int | None = None, max_steps: int | None = None,
             step_callback=None) -> FinetuneResult:
    """Optimise the joint loss on labelled data.

    direct: encoder initialised from ``init``, everything trains.
    frozen: encoder initialised from ``init`` and excluded from updates for
    ``frozen_steps`` steps (default: all of them); optional thaw phase of
    ``thaw_epochs`` epochs over the whole model afterwards.
    scratch: random initialisation, everything trains.
    """
    if mode not in ("direct", "frozen", "scratch"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if mode != "scratch" and init is None:
        raise ValueError(f"{mode} fine-tuning needs a pretrained checkpoint")
    seed = cfg.seed if seed is None else seed
    tc = cfg.train
    max_steps = tc.max_steps if max_steps is None else max_steps
    with default_dtype(tc.dtype):
        dtype = T.get_default_dtype()
        model = build_joint(cfg, len(vocab), seed)
        if mode != "scratch":
            load_encoder_weights(model, init, cfg)
        named = dict(model.named_parameters())
        frozen = sorted(model.encoder_parameter_names()) if mode == "frozen" else []
        trainable = {k: p for k, p in named.items() if k not in set(frozen)}
        opt = Adam(trainable)
        trainable_count = sum(p.size for p in opt.params.values())
        alpha, eps = cfg.model.ctc_weight, cfg.model.label_smoothing
        history: list[dict] = []
        phase1 = max_steps if mode != "frozen" or tc.frozen_steps < 0 else min(tc.frozen_steps, max_steps)
        stream = epoch_batches(corpus, tc.batch_size, seed, dtype)
        step = 0

        def run_step(epoch, batch, phase):
            nonlocal step
            step += 1
            # the thaw phase restarts the schedule so the newly trainable encoder is warmed up
            sched_step = step - phase1 if phase == "thaw" else step
            lr = noam_lr(sched_step, tc.noam_k, cfg.model.d_model, tc.warmup)
            try:
                out = model.losses(batch, alpha, eps, ForwardContext(True, seed, step))
                _sgd_step(out["loss"], named, opt, lr, tc.grad_clip)
            except NonFiniteError as exc:
                raise TrainingDiverged(step, None, exc) from exc
            history.append({"step": step, "epoch": epoch, "phase": phase, "lr": lr, "loss": out["loss"].item(),
                            "ctc": out["ctc"].item(), "att": out["att"].item()})
            if step_callback is not None:
                step_callback(step, model)

        while step < phase1:
            epoch, batch = next(stream)
            run_step(epoch, batch, "frozen" if mode == "frozen" else mode)
        before_thaw = {k: named[k].data.copy() for k in frozen}
        if mode == "frozen" and tc.thaw and tc.thaw_epochs > 0:
            opt.add_params({k: named[k] for k in frozen})
            for e in range(tc.thaw_epochs):
                for batch in make_batches(corpus, tc.batch_size, 1000 + e, seed, dtype=dtype):
                    run_step(1000 + e, batch, "thaw")
        total = model.num_parameters()
        frozen_count = sum(named[k].size for k in frozen)
        meta = {"vocab": vocab.to_json(), "mode": mode, "frozen": frozen, "seed": seed,
                "model": dict(sorted(vars(cfg.model).items()))}
        ckpt = _checkpoint(named, "finetune", step, cfg, meta, opt)
    return FinetuneResult(ckpt, model, history, frozen, trainable_count, total, frozen_count, before_thaw)


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig) -> tuple[JointCTCTransformer, Vocabulary]:
    """Rebuild a fine-tuned model; the architecture recorded in the checkpoint wins over ``cfg``."""
    if "vocab" not in ckpt.meta:
        raise CheckpointMismatch("checkpoint has no vocabulary; is it a fine-tuned model?")
    if "model" in ckpt.meta:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **ckpt.meta["model"]))
    if ckpt.config_hash != cfg.model.architecture_hash():
        raise CheckpointMismatch(f"checkpoint config {ckpt.config_hash} differs from {cfg.model.architecture_hash()}")
    vocab = Vocabulary.from_json(ckpt.meta["vocab"])
    dtype = next(iter(ckpt.params.values())).dtype
    with default_dtype(dtype):
        model = build_joint(cfg, len(vocab), 0)
        model.load_state_dict(ckpt.params)
    return model, vocab


def encoder_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig) -> MaskedPretrainedEncoder:
    """The encoder of a pretrain or fine-tune checkpoint, built with its recorded architecture."""
    if "model" in ckpt.meta:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **ckpt.meta["model"]))
    if ckpt.config_hash != cfg.model.architecture_hash():
        raise CheckpointMismatch(f"checkpoint config {ckpt.config_hash} differs from {cfg.model.architecture_hash()}")
    state = {k[len(ENCODER_PREFIX):]: v for k, v in ckpt.params.items() if k.startswith(ENCODER_PREFIX)}
    if not state:
        raise CheckpointMismatch("checkpoint holds no encoder parameters")
    with default_dtype(next(iter(state.values())).dtype):
        model = build_encoder(cfg, 0)
        model.load_state_dict(state, strict=True)
    return model


def attention_maps(model: MaskedPretrainedEncoder, utt: FeatureSequence) -> list[np.ndarray]:
    """Per-layer (heads, T, T) self-attention of one unmasked utterance."""
    dtype = model.proj.weight.dtype
    batch = collate([utt], dtype=dtype)
    with no_grad():
        out = model(Tensor(batch.features, dtype=dtype), batch.feature_lengths, EVAL, retain_attention=True)
    return [m[0] for m in out.attention_maps]


# ---------------------------------------------------------------------------
# decoding and scoring
# ---------------------------------------------------------------------------


@dataclass
class DecodeRecord:
    utt_id: str
    hyp: str
    ref: str
    score_att: float | None
    score_ctc: float | None

    def to_json(self) -> dict:
        return {"utt_id": self.utt_id, "hyp": self.hyp, "ref": self.ref, "score_att": self.score_att,
                "score_ctc": self.score_ctc}


@dataclass
class EvalResult:
    wer: float
    cer: float
    word_counts: EditCounts
    char_counts: EditCounts
    per_utterance: list[dict]
    records: list[DecodeRecord]


def decode_corpus(model: JointCTCTransformer, corpus: Sequence[FeatureSequence], vocab: Vocabulary,
                  beam_width: int = 10, ctc_weight: float = 0.3, max_len: int = 64,
                  batch_size: int = 16, greedy: bool = False) -> list[DecodeRecord]:
    """Best hypothesis per utterance. ``greedy`` uses attention-only argmax
    decoding and leaves both scores unset."""
    dtype = model.ctc_head.weight.dtype
    tokens = [vocab.stoi[t] for t in vocab.tokens]
    records = []
    with no_grad():
        for s in range(0, len(corpus), batch_size):
            chunk = list(corpus[s : s + batch_size])
            batch = collate(chunk, dtype=dtype)
            enc = model.mpe(Tensor(batch.features, dtype=dtype), batch.feature_lengths, EVAL)
            lp = model.ctc_log_probs(enc.e).data
            for i, utt in enumerate(chunk):
                n = int(enc.lengths[i])
                mem = Tensor(enc.e.data[i : i + 1, :n], dtype=dtype)
                if greedy:
                    labels = greedy_decode(model.dec, mem, max_len, tokens)
                    records.append(DecodeRecord(utt.utt_id, vocab.decode(labels), utt.text, None, None))
                    continue
                hyps = beam_search(model.dec, mem, lp[i, :n], beam_width, ctc_weight, max_len, tokens)
                best = hyps[0]
                records.append(DecodeRecord(utt.utt_id, vocab.decode(best.labels()), utt.text,
                                            best.score_att, best.score_ctc))
    return records


def score_records(records: Sequence[DecodeRecord]) -> EvalResult:
    words, chars = EditCounts(), EditCounts()
    per_utt = []
    for r in records:
        w = word_errors(r.ref, r.hyp)
        c = char_errors(r.ref, r.hyp)
        words, chars = words + w, chars + c
        per_utt.append({"utt_id": r.utt_id, "word_errors": w.errors, "ref_words": w.ref_len,
                        "char_errors": c.errors, "ref_chars": c.ref_len})
    wer_ = words.errors / words.ref_len if words.ref_len else 0.0
    cer_ = chars.errors / chars.ref_len if chars.ref_len else 0.0
    return EvalResult(wer_, cer_, words, chars, per_utt, list(records))


def evaluate(corpus: Sequence[FeatureSequence], model: JointCTCTransformer, vocab: Vocabulary,
             beam_width: int = 10, ctc_weight: float = 0.3, max_len: int = 64) -> EvalResult:
    return score_records(decode_corpus(model, corpus, vocab, beam_width, ctc_weight, max_len))


def average_runs(results: Sequence[EvalResult]) -> dict:
    """Report each run's WER and their mean."""
    wers = [r.wer for r in results]
    return {"wers": wers, "mean_wer": float(np.mean(wers)) if wers else float("nan")}
