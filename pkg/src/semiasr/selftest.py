"""Built-in correctness suites behind ``semiasr selftest``.

Each suite returns a :class:`SuiteResult`; ``run_selftest`` runs them all.
The op registry :data:`OP_CASES` is shared with the unit tests.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import decoder as decoder_mod
from .ctc import ctc_brute_force, ctc_loss, ctc_loss_batch, ctc_prefix_beam, label_sequence_scores
from .decoder import JointCTCTransformer, attention_loss
from .encoder import KEEP, SWAP, ZERO, downsampled_length, make_mask_plan
from .features import SynthSpec, collate, prepare, synth_vocabulary, synthesize_corpus
from .numerics import tensor as T
from .numerics.gradcheck import grad_check, leaf
from .training.schedule import noam_lr

# ---------------------------------------------------------------------------
# op registry: name -> rng -> (params, fn)
# ---------------------------------------------------------------------------


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def case(rng):
        a = leaf(rng.normal(size=shape_a))
        bdat = rng.normal(size=shape_b)
        if positive_b:
            bdat = np.abs(bdat) + 0.5
        b = leaf(bdat)
        return {"a": a, "b": b}, lambda: op(a, b)

    return case


def _unary(op, shape=(3, 4), positive=False, avoid_zero=False):
    def case(rng):
        d = rng.normal(size=shape)
        if positive:
            d = np.abs(d) + 0.5
        if avoid_zero:
            d = d + np.sign(d) * 0.1
        a = leaf(d)
        return {"a": a}, lambda: op(a)

    return case


def _conv_case(rng):
    x = leaf(rng.normal(size=(2, 5, 6, 3)))
    w = leaf(rng.normal(size=(3, 3, 3, 4)) * 0.3)
    b = leaf(rng.normal(size=4))
    return {"x": x, "w": w, "b": b}, lambda: T.conv2d(x, w, b, stride=2, padding=1)


def _embedding_case(rng):
    table = leaf(rng.normal(size=(5, 3)))
    ids = rng.integers(0, 5, size=(2, 4))
    return {"table": table}, lambda: T.embedding(table, ids)


def _concat_case(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 2)))
    return {"a": a, "b": b}, lambda: T.concat([a, b], axis=1)


def _layer_norm_case(rng):
    x, g, b = leaf(rng.normal(size=(2, 3, 5))), leaf(rng.normal(size=5)), leaf(rng.normal(size=5))
    return {"x": x, "g": g, "b": b}, lambda: T.layer_norm(x, g, b)


def _linear_case(rng):
    x, w, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    return {"x": x, "w": w, "b": b}, lambda: T.linear(x, w, b)


def _masked_softmax_case(rng):
    a = leaf(rng.normal(size=(3, 4)))
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    return {"a": a}, lambda: T.softmax(a, axis=-1, mask=mask)


def _dropout_case(rng):
    a = leaf(rng.normal(size=(3, 4)))
    seed = int(rng.integers(1 << 30))
    return {"a": a}, lambda: T.dropout(a, 0.3, np.random.default_rng(seed))


def _attention_loss_case(rng):
    z = leaf(rng.normal(size=(2, 3, 5)))
    targets = rng.integers(0, 5, size=(2, 3))
    targets[1, 2] = 1  # pad position
    return {"z": z}, lambda: attention_loss(z, targets, eps=0.1, ignore_id=1)


def _ctc_case(rng):
    z = leaf(rng.normal(size=(2, 6, 4)))
    targets = np.array([[1, 2, 2], [3, 1, 0]])
    return {"z": z}, lambda: ctc_loss_batch(T.log_softmax(z), np.array([6, 5]), targets, np.array([3, 2]))[0]


OP_CASES: dict[str, Callable] = {
    "add": _binary(T.add, (3, 4), (1, 4)),
    "sub": _binary(T.sub, (3, 4), (3, 1)),
    "mul": _binary(T.mul),
    "div": _binary(T.div, positive_b=True),
    "neg": _unary(T.neg),
    "scale": _unary(lambda a: T.scale(a, -2.5)),
    "matmul": _binary(T.matmul, (2, 3, 4), (4, 5)),
    "linear": _linear_case,
    "exp": _unary(T.exp),
    "log": _unary(T.log, positive=True),
    "abs": _unary(T.tabs, avoid_zero=True),
    "relu": _unary(T.relu, avoid_zero=True),
    "sum": _unary(lambda a: T.tsum(a, axis=1)),
    "mean": _unary(lambda a: T.mean(a, axis=0, keepdims=True)),
    "softmax": _unary(lambda a: T.softmax(a, axis=-1)),
    "masked_softmax": _masked_softmax_case,
    "log_softmax": _unary(lambda a: T.log_softmax(a, axis=0)),
    "logsumexp": _unary(lambda a: T.logsumexp(a, axis=-1)),
    "layer_norm": _layer_norm_case,
    "transpose": _unary(lambda a: T.transpose(a, (1, 0))),
    "swapaxes": _unary(lambda a: T.swapaxes(a, 0, 2), shape=(2, 3, 4)),
    "reshape": _unary(lambda a: T.reshape(a, (2, 6))),
    "slice": _unary(lambda a: T.getitem(a, (slice(1, 3), slice(None, None, 2)))),
    "gather": _unary(lambda a: T.getitem(a, (np.array([0, 2, 2]), np.array([1, 1, 3])))),
    "concat": _concat_case,
    "embedding": _embedding_case,
    "conv2d": _conv_case,
    "dropout": _dropout_case,
    "attention_loss": _attention_loss_case,
    "ctc_loss": _ctc_case,
}


def check_op(name: str, seed: int, tol: float = 1e-4):
    """Gradient-check one registered op under a random linear read-out."""
    rng = np.random.default_rng([seed, 11])
    params, fn = OP_CASES[name](rng)
    weights = T.Tensor(rng.normal(size=fn().shape), dtype=np.float64)
    return grad_check(lambda: T.tsum(T.mul(fn(), weights)), params, h=1e-5, tol=tol)


def tiny_joint_problem(seed: int = 0):
    """A two-utterance batch and a tiny 64-bit joint model."""
    spec = SynthSpec(num_utterances=2, feature_dim=4, vocab_size=3, min_tokens=1, max_tokens=3, frames_per_token=6)
    batch = collate(prepare(synthesize_corpus(spec, seed)))
    with T.default_dtype(np.float64):
        model = JointCTCTransformer(np.random.default_rng([seed, 3]), len(synth_vocabulary(spec)), feature_dim=4,
                                    conv_channels=(2, 3), d_model=8, heads=2, enc_layers=1, dec_layers=1, d_ff=16,
                                    dropout=0.0, attn_dropout=0.0)
    return model, batch


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    failures: list[str] = field(default_factory=list)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} ({self.seconds:.1f}s): {self.detail}"


def suite_gradients(seeds: int = 20) -> SuiteResult:
    failures, worst = [], 0.0
    for name in sorted(OP_CASES):
        for s in range(seeds):
            rep = check_op(name, s)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failures.append(f"{name}[seed {s}]: {rep}")
    for s in range(min(seeds, 3)):
        model, batch = tiny_joint_problem(s)
        with T.default_dtype(np.float64):
            rep = grad_check(lambda: model.losses(batch, 0.3, 0.1)["loss"], dict(model.named_parameters()),
                             max_coords=40, seed=s)
        worst = max(worst, rep.max_rel_error)
        if not rep.passed:
            failures.append(f"joint loss[seed {s}]: {rep}")
    return SuiteResult("gradients", not failures,
                       f"{len(OP_CASES)} ops x {seeds} seeds + joint loss, worst rel err {worst:.2e}", failures=failures)


def suite_joint_loss(alpha: float = 0.3) -> SuiteResult:
    failures = []
    value = decoder_mod.joint_loss(2.0, 1.0, alpha)
    if abs(value - (alpha * 2.0 + (1 - alpha) * 1.0)) > 1e-12:
        failures.append(f"joint_loss(2, 1, {alpha}) = {value}")
    model, batch = tiny_joint_problem(1)
    params = dict(model.named_parameters())

    def grads(which):
        for p in params.values():
            p.grad = None
        with T.default_dtype(np.float64):
            T.backward(model.losses(batch, alpha, 0.1)[which])
        return {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for k, p in params.items()}

    g, gc, ga = grads("loss"), grads("ctc"), grads("att")
    err = max(float(np.abs(g[k] - (alpha * gc[k] + (1 - alpha) * ga[k])).max()) for k in params)
    if err > 1e-10:
        failures.append(f"joint gradient deviates from alpha-combination by {err:.2e}")
    return SuiteResult("joint_loss", not failures, f"value and gradient combination, max err {err:.1e}",
                       failures=failures)


def suite_ctc(instances: int = 500, beam_instances: int = 100) -> SuiteResult:
    rng = np.random.default_rng(2024)
    failures, worst = [], 0.0
    for i in range(instances):
        v, t, n = int(rng.integers(2, 5)), int(rng.integers(1, 7)), int(rng.integers(0, 4))
        z = rng.normal(size=(t, v))
        lp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
        labels = [int(x) for x in rng.integers(1, v, size=n)]
        ref, got = ctc_brute_force(lp, labels), ctc_loss(lp, labels).loss
        if math.isinf(ref) != math.isinf(got) or (not math.isinf(ref) and abs(ref - got) > 1e-9):
            failures.append(f"instance {i}: brute force {ref} vs lattice {got}")
        elif not math.isinf(ref):
            worst = max(worst, abs(ref - got))
    for i in range(beam_instances):
        v, t = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        z = rng.normal(size=(t, v)) * 2
        lp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
        scores = label_sequence_scores(lp)
        best = max(scores.values())
        top, score = ctc_prefix_beam(lp, beam_width=v**t)[0]
        if abs(scores[top] - best) > 1e-9 or abs(score - best) > 1e-9:
            failures.append(f"beam instance {i}: top {top} scored {scores[top]} vs best {best}")
    return SuiteResult("ctc", not failures,
                       f"{instances} brute-force instances (max diff {worst:.1e}), {beam_instances} beam instances",
                       failures=failures)


def suite_masking(plans: int = 1000, length: int = 100) -> SuiteResult:
    failures = []
    actions = []
    expected = int(math.floor(0.15 * length + 0.5))
    for s in range(plans):
        plan = make_mask_plan(length, s)
        if len(plan) != expected:
            failures.append(f"seed {s}: {len(plan)} masked, expected {expected}")
        actions.append(plan.actions)
    pooled = np.concatenate(actions)
    n = len(pooled)
    parts = []
    for act, p, label in ((ZERO, 0.8, "zero"), (SWAP, 0.1, "swap"), (KEEP, 0.1, "keep")):
        count = int((pooled == act).sum())
        sigma = math.sqrt(n * p * (1 - p))
        z = (count - n * p) / sigma
        parts.append(f"{label} {count / n:.4f} (z={z:+.2f})")
        if abs(z) > 3:
            failures.append(f"{label} proportion {count / n:.4f} outside 3 sigma of {p}")
    return SuiteResult("masking", not failures, f"{plans} plans; " + ", ".join(parts), failures=failures)


def suite_downsampling() -> SuiteResult:
    bad = [t for t in range(1, 201) if downsampled_length(t) != math.ceil(math.ceil(t / 2) / 2)]
    ok = not bad and downsampled_length(100) == 25
    return SuiteResult("downsampling", ok, "T(t) law for t in 1..200, T(100) = 25",
                       failures=[f"t={t}" for t in bad])


def suite_schedule() -> SuiteResult:
    failures = []
    for n in (1, 200, 400, 401, 25000, 100000):
        for k, d, w in ((2, 64, 400), (10, 512, 25000)):
            ref = float(k) / math.sqrt(d) * min(1 / math.sqrt(n), n / (w * math.sqrt(w)))
            if abs(noam_lr(n, k, d, w) - ref) > 1e-12 * ref:
                failures.append(f"lr({n}, {k}, {d}, {w})")
    lrs = [noam_lr(n, 2, 64, 400) for n in range(1, 4001)]
    if int(np.argmax(lrs)) + 1 != 400:
        failures.append("peak not at warmup")
    full_scale = noam_lr(25000, 10, 512, 25000)
    if abs(full_scale - 2.795e-3) > 5e-7:
        failures.append(f"full-scale point {full_scale}")
    return SuiteResult("schedule", not failures, f"peak at warmup; full-scale lr {full_scale:.4e}", failures=failures)


def _wrong_joint_loss(l_ctc, l_att, alpha):
    return _REAL_JOINT_LOSS(l_ctc, l_att, 1.0 - alpha)


_REAL_JOINT_LOSS = decoder_mod.joint_loss
FAULTS = {"alpha": (decoder_mod, "joint_loss", _wrong_joint_loss)}


@contextlib.contextmanager
def injected(fault: str | None):
    if fault is None:
        yield
        return
    if fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {sorted(FAULTS)}")
    mod, attr, replacement = FAULTS[fault]
    original = getattr(mod, attr)
    setattr(mod, attr, replacement)
    try:
        yield
    finally:
        setattr(mod, attr, original)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "gradients": suite_gradients,
    "joint_loss": suite_joint_loss,
    "ctc": suite_ctc,
    "masking": suite_masking,
    "downsampling": suite_downsampling,
    "schedule": suite_schedule,
}


def run_selftest(names=None, fault: str | None = None, report: Callable[[str], None] = print) -> list[SuiteResult]:
    results = []
    with injected(fault):
        for name in names or list(SUITES):
            t0 = time.perf_counter()
            try:
                res = SUITES[name]()
            except Exception as exc:  # a crashing suite is a failing suite
                res = SuiteResult(name, False, f"raised {type(exc).__name__}: {exc}")
            res.seconds = time.perf_counter() - t0
            report(res.line())
            for f in res.failures[:5]:
                report(f"    {f}")
            results.append(res)
    return results
