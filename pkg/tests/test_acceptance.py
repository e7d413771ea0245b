"""Acceptance suite: one PASS/FAIL line per criterion, printed in the
terminal summary (and to stdout when run as a script).

Every tolerance and budget is pinned as a module constant.
"""

import dataclasses
import filecmp
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from semiasr.cli import main as cli_main
from semiasr.config import RunConfig, apply_overrides
from semiasr.ctc import ctc_brute_force, ctc_loss, ctc_prefix_beam, label_sequence_scores
from semiasr.encoder import KEEP, SWAP, ZERO, band_mass, downsampled_length, make_mask_plan
from semiasr.features import collate, prepare, synth_vocabulary, synthesize_corpus
from semiasr.numerics import tensor as T
from semiasr.numerics.gradcheck import grad_check
from semiasr.numerics.nn import ForwardContext
from semiasr.selftest import OP_CASES, check_op, tiny_joint_problem
from semiasr.training import evaluate, finetune, noam_lr, pretrain
from semiasr.training.loop import attention_maps, encoder_from_checkpoint

GRAD_TOL = 1e-4
GRAD_SEEDS = 20
GRAD_BUDGET_S = 60.0
CTC_TOL = 1e-9
CTC_INSTANCES = 500
BEAM_INSTANCES = 100
CTC_BUDGET_S = 120.0
MASK_PLANS = 1000
MASK_T = 100
MASK_SIGMAS = 3.0
SCHEDULE_REL = 1e-12
FULL_SCALE_LR = 2.795e-3
FULL_SCALE_LR_ABS = 5e-7
OVERFIT_WER = 0.05
OVERFIT_STEPS = 2000
OVERFIT_BUDGET_S = 600.0
TWO_STAGE_BUDGET_S = 1800.0
BAND_FRACTION = 0.75
SEEDS = (0, 1, 2)

# two-stage analogue (criteria 7 and 10)
UNLABELED = 512
LABELED = 32
HELD_OUT = 48
PRETRAIN_STEPS = 1500
FINETUNE_STEPS = 1000
DECODE_BEAM = 4
DECODE_CTC_WEIGHT = 0.7
BAND_UTTERANCES = 8

RESULTS: dict[int, str] = {}


def report(n: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert passed, line


# ---------------------------------------------------------------------------
# 1. gradients
# ---------------------------------------------------------------------------


def _graph_ops(root) -> set[str]:
    seen, stack, ops = set(), [root], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        ops.add(node.op)
        stack.extend(node._parents)
    return ops - {"leaf"}


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    failures, worst, covered = [], 0.0, set()
    for name in sorted(OP_CASES):
        for seed in range(GRAD_SEEDS):
            rep = check_op(name, seed, tol=GRAD_TOL)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failures.append(f"{name}/{seed}")
        params, fn = OP_CASES[name](np.random.default_rng(0))
        covered |= _graph_ops(fn())
    model_ops = set()
    for seed in range(GRAD_SEEDS):
        model, batch = tiny_joint_problem(seed)
        params = dict(model.named_parameters())
        with T.default_dtype(np.float64):
            rep = grad_check(lambda: model.losses(batch, 0.3, 0.1)["loss"], params, tol=GRAD_TOL, max_coords=30,
                             seed=seed)
            train_graph = model.losses(batch, 0.3, 0.1, ForwardContext(True, seed, 1))["loss"]
        model_ops |= _graph_ops(train_graph)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failures.append(f"joint/{seed}")
    elapsed = time.perf_counter() - t0
    uncovered = sorted(model_ops - covered)
    ok = not failures and not uncovered and elapsed <= GRAD_BUDGET_S
    report(1, ok, f"{len(OP_CASES)} ops + joint loss x {GRAD_SEEDS} seeds, worst rel err {worst:.2e} "
                  f"(tol {GRAD_TOL:g}), ops without a case {uncovered}, failures {failures[:5]}, "
                  f"{elapsed:.1f}s (budget {GRAD_BUDGET_S:g}s)")


# ---------------------------------------------------------------------------
# 2. CTC oracle
# ---------------------------------------------------------------------------


def _log_softmax(z):
    return z - np.logaddexp.reduce(z, axis=1, keepdims=True)


def test_criterion_2_ctc_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240)
    worst, bad, checked = 0.0, [], 0
    for i in range(CTC_INSTANCES):
        v, t, n = int(rng.integers(2, 5)), int(rng.integers(1, 7)), int(rng.integers(0, 4))
        lp = _log_softmax(rng.normal(size=(t, v)))
        labels = [int(x) for x in rng.integers(1, v, size=n)]
        ref, got = ctc_brute_force(lp, labels), ctc_loss(lp, labels).loss
        if math.isinf(ref) or math.isinf(got):
            if math.isinf(ref) != math.isinf(got):
                bad.append(i)
            continue
        checked += 1
        worst = max(worst, abs(ref - got))
        if abs(ref - got) > CTC_TOL:
            bad.append(i)
    beam_bad = []
    for i in range(BEAM_INSTANCES):
        v, t = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        lp = _log_softmax(rng.normal(size=(t, v)) * 2)
        scores = label_sequence_scores(lp)
        best = max(scores.values())
        top, _ = ctc_prefix_beam(lp, beam_width=v**t)[0]
        if abs(scores[top] - best) > CTC_TOL:
            beam_bad.append(i)
    elapsed = time.perf_counter() - t0
    ok = not bad and not beam_bad and elapsed <= CTC_BUDGET_S
    report(2, ok, f"{CTC_INSTANCES} instances ({checked} feasible) max |diff| {worst:.1e} (tol {CTC_TOL:g}), "
                  f"mismatches {bad[:5]}; prefix-beam top-1 mismatches {len(beam_bad)}/{BEAM_INSTANCES}; "
                  f"{elapsed:.1f}s (budget {CTC_BUDGET_S:g}s)")


# ---------------------------------------------------------------------------
# 3. masking statistics
# ---------------------------------------------------------------------------


def test_criterion_3_masking():
    expected = int(math.floor(0.15 * MASK_T + 0.5))
    counts = set()
    actions = []
    for seed in range(MASK_PLANS):
        plan = make_mask_plan(MASK_T, seed)
        counts.add(len(plan))
        actions.append(plan.actions)
    pooled = np.concatenate(actions)
    n = len(pooled)
    parts, ok = [], counts == {expected} and expected == 15
    for act, p, label in ((ZERO, 0.8, "zero"), (SWAP, 0.1, "swap"), (KEEP, 0.1, "keep")):
        k = int((pooled == act).sum())
        z = (k - n * p) / math.sqrt(n * p * (1 - p))
        ok = ok and abs(z) <= MASK_SIGMAS
        parts.append(f"{label} {k / n:.4f} (z {z:+.2f})")
    report(3, ok, f"counts per plan {sorted(counts)} (expected {expected}); " + ", ".join(parts)
                  + f"; bound {MASK_SIGMAS:g} sigma")


# ---------------------------------------------------------------------------
# 4. downsampling
# ---------------------------------------------------------------------------


def test_criterion_4_downsampling():
    law = [t for t in range(1, 201) if downsampled_length(t) != math.ceil(math.ceil(t / 2) / 2)]
    cfg = RunConfig()
    with T.default_dtype(np.float64):
        from semiasr.encoder import MaskedPretrainedEncoder

        model = MaskedPretrainedEncoder(np.random.default_rng(0), feature_dim=8, conv_channels=(2, 2), d_model=8,
                                        heads=2, layers=0)
        net = []
        for t in range(1, 201):
            x = T.Tensor(np.ones((1, t, 3 * 8)))
            out = model.downsample(x, np.array([t]))
            if out.shape[1] != downsampled_length(t):
                net.append(t)
    ok = not law and not net and downsampled_length(100) == 25 and len(cfg.model.conv_channels) == 2
    report(4, ok, f"law violations {law}, network shape violations {net}, T(100) = {downsampled_length(100)}")


# ---------------------------------------------------------------------------
# 5. schedule
# ---------------------------------------------------------------------------


def test_criterion_5_schedule():
    worst = 0.0
    for n in (1, 2, 50, 399, 400, 401, 1000, 25000, 10**6):
        for k, d, w in ((2, 64, 400), (0.5, 64, 400), (10, 512, 25000)):
            ref = float(k) * float(d) ** -0.5 * min(float(n) ** -0.5, float(n) * float(w) ** -1.5)
            worst = max(worst, abs(noam_lr(n, k, d, w) - ref) / ref)
    cfg = RunConfig()
    w = cfg.train.warmup
    lrs = [noam_lr(n, cfg.train.noam_k, cfg.model.d_model, w) for n in range(1, 10 * w + 1)]
    peak = int(np.argmax(lrs)) + 1
    full_scale = noam_lr(25000, 10, 512, 25000)
    ok = worst <= SCHEDULE_REL and peak == w and abs(full_scale - FULL_SCALE_LR) <= FULL_SCALE_LR_ABS
    report(5, ok, f"max rel diff {worst:.1e} (tol {SCHEDULE_REL:g}), argmax n = {peak} (warmup {w}), "
                  f"full-scale lr {full_scale:.6e} vs {FULL_SCALE_LR:g} (abs tol {FULL_SCALE_LR_ABS:g})")


# ---------------------------------------------------------------------------
# 6. overfit
# ---------------------------------------------------------------------------


def test_criterion_6_overfit():
    cfg = RunConfig()
    spec = dataclasses.replace(cfg.synth, num_utterances=32)
    vocab = synth_vocabulary(spec)
    t0 = time.perf_counter()
    wers = []
    for seed in SEEDS:
        corpus = prepare(synthesize_corpus(spec, seed), cfg.model.use_deltas)
        res = finetune(corpus, vocab, None, "scratch", cfg, seed=seed, max_steps=OVERFIT_STEPS)
        wers.append(evaluate(corpus, res.model, vocab, cfg.model.beam_width, cfg.model.ctc_fusion_weight,
                             cfg.model.max_decode_len).wer)
    elapsed = time.perf_counter() - t0
    med = statistics.median(wers)
    ok = med < OVERFIT_WER and elapsed <= OVERFIT_BUDGET_S
    report(6, ok, f"training-set WER per seed {[round(w, 4) for w in wers]}, median {med:.4f} "
                  f"(< {OVERFIT_WER:g}) after {OVERFIT_STEPS} steps; {elapsed:.0f}s (budget {OVERFIT_BUDGET_S:g}s)")


# ---------------------------------------------------------------------------
# 7 and 10. two-stage analogue
# ---------------------------------------------------------------------------


def two_stage_config() -> RunConfig:
    # frozen fine-tuning: decoder and CTC head for half the steps, then the whole model
    half = FINETUNE_STEPS // 2
    epochs = math.ceil(half / math.ceil(LABELED / RunConfig().train.batch_size))
    return apply_overrides(RunConfig(), [f"train.frozen_steps={half}", "train.thaw=true",
                                         f"train.thaw_epochs={epochs}"])


@pytest.fixture(scope="module")
def two_stage():
    cfg = RunConfig()
    frozen_cfg = two_stage_config()
    spec = cfg.synth
    vocab = synth_vocabulary(spec)
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        pool = prepare(synthesize_corpus(dataclasses.replace(spec, num_utterances=UNLABELED), 100 + seed, "u"))
        labeled = pool[:LABELED]
        held = prepare(synthesize_corpus(dataclasses.replace(spec, num_utterances=HELD_OUT), 900 + seed, "h"))
        pre = pretrain(pool, cfg, seed=seed, max_steps=PRETRAIN_STEPS)
        wer = {}
        for mode, run_cfg, init in (("scratch", cfg, None), ("direct", cfg, pre.checkpoint),
                                    ("frozen", frozen_cfg, pre.checkpoint)):
            ft = finetune(labeled, vocab, init, mode, run_cfg, seed=seed,
                          max_steps=FINETUNE_STEPS if mode != "frozen" else FINETUNE_STEPS // 2)
            wer[mode] = evaluate(held, ft.model, vocab, DECODE_BEAM, DECODE_CTC_WEIGHT, cfg.model.max_decode_len).wer
        runs.append({"seed": seed, "pretrain": pre, "held": held, "wer": wer})
    return {"runs": runs, "seconds": time.perf_counter() - t0, "cfg": cfg}


def test_criterion_7_two_stage(two_stage):
    runs = two_stage["runs"]
    med = {m: statistics.median(r["wer"][m] for r in runs) for m in ("frozen", "scratch", "direct")}
    per_seed = "; ".join(f"seed {r['seed']}: " + ", ".join(f"{m} {w:.3f}" for m, w in r["wer"].items())
                         for r in runs)
    ok = med["frozen"] <= med["scratch"] and med["frozen"] <= med["direct"]
    ok = ok and two_stage["seconds"] <= TWO_STAGE_BUDGET_S
    report(7, ok, f"median held-out WER frozen {med['frozen']:.3f}, scratch {med['scratch']:.3f}, "
                  f"direct {med['direct']:.3f} ({per_seed}); {two_stage['seconds']:.0f}s "
                  f"(budget {TWO_STAGE_BUDGET_S:g}s)")


def test_criterion_10_band_mass(two_stage):
    cfg = two_stage["cfg"]
    fractions = []
    for run in two_stage["runs"]:
        pre = run["pretrain"]
        trained = encoder_from_checkpoint(pre.checkpoint, cfg)
        early = encoder_from_checkpoint(pre.snapshots[1], cfg)
        utts = run["held"][:BAND_UTTERANCES]
        a = np.mean([[[band_mass(h) for h in layer] for layer in attention_maps(trained, u)] for u in utts], axis=0)
        b = np.mean([[[band_mass(h) for h in layer] for layer in attention_maps(early, u)] for u in utts], axis=0)
        fractions.append(float((a > b).mean()))
    ok = all(f >= BAND_FRACTION for f in fractions)
    report(10, ok, f"fraction of (layer, head) pairs with higher band mass than the epoch-1 checkpoint, "
                   f"per seed {[round(f, 3) for f in fractions]} (need >= {BAND_FRACTION:g} each)")


# ---------------------------------------------------------------------------
# 8. frozen bookkeeping
# ---------------------------------------------------------------------------


def test_criterion_8_frozen_bookkeeping():
    cfg = RunConfig()
    spec = dataclasses.replace(cfg.synth, num_utterances=16)
    corpus = prepare(synthesize_corpus(spec, 0))
    vocab = synth_vocabulary(spec)
    init = pretrain(corpus, cfg, seed=0, max_steps=5).checkpoint
    changed = []

    def check(step, model):
        for k, p in model.named_parameters():
            if k in init.params and not np.array_equal(p.data, init.params[k]):
                changed.append((step, k))

    res = finetune(corpus, vocab, init, "frozen", cfg, seed=0, max_steps=10, step_callback=check)
    mpe = sum(v.size for v in init.params.values())
    ok = not changed and res.trainable_count == res.total_count - mpe and res.frozen == sorted(init.params)
    report(8, ok, f"{len(res.history)} frozen steps, MPE tensors changed: {changed[:3]}; trainable "
                  f"{res.trainable_count} = total {res.total_count} - MPE {mpe}")


# ---------------------------------------------------------------------------
# 9. reproducibility
# ---------------------------------------------------------------------------


def _same_tree(a: Path, b: Path) -> list[str]:
    diffs = []
    for path in sorted(a.rglob("*")):
        if path.is_file():
            other = b / path.relative_to(a)
            if not other.is_file() or path.read_bytes() != other.read_bytes():
                diffs.append(str(path.relative_to(a)))
    diffs += [str(p.relative_to(b)) for p in b.rglob("*") if p.is_file() and not (a / p.relative_to(b)).exists()]
    return diffs


def test_criterion_9_reproducibility(tmp_path):
    data = tmp_path / "data"
    assert cli_main(["synth-data", "--out", str(data), "--num", "24"]) == 0
    common = ["--set", "train.dtype=float64", "--set", "train.max_steps=30", "--set", "train.eval_every=10",
              "--set", f"paths.train_manifest={data / 'manifest.jsonl'}", "--seed", "3"]
    for run in ("a", "b"):
        assert cli_main(["pretrain", "--run-dir", str(tmp_path / run / "pt"), *common]) == 0
        assert cli_main(["finetune", "--run-dir", str(tmp_path / run / "ft"), "--mode", "frozen",
                         "--init", str(tmp_path / run / "pt" / "checkpoints" / "pretrain_best"),
                         "--set", "train.thaw=true", "--set", "train.frozen_steps=20", *common]) == 0
    diffs = []
    for stage in ("pt", "ft"):
        diffs += _same_tree(tmp_path / "a" / stage / "checkpoints", tmp_path / "b" / stage / "checkpoints")
    csvs = [("pt", "pretrain_loss.csv"), ("ft", "finetune_loss.csv")]
    csv_same = all(filecmp.cmp(tmp_path / "a" / s / f, tmp_path / "b" / s / f, shallow=False) for s, f in csvs)
    n_files = sum(1 for _ in (tmp_path / "a").rglob("*.mpet"))
    report(9, not diffs and csv_same, f"64-bit pretrain + frozen/thaw fine-tune twice: {n_files} tensor files, "
                                      f"differing files {diffs[:3]}, loss CSVs identical: {csv_same}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
