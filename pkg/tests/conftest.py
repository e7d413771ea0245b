import dataclasses

import numpy as np
import pytest

from semiasr.config import RunConfig, apply_overrides
from semiasr.features import prepare, synth_vocabulary, synthesize_corpus

SMALL = [
    "model.feature_dim=16", "model.conv_channels=[4,8]", "model.d_model=16", "model.heads=2",
    "model.enc_layers=2", "model.dec_layers=1", "model.d_ff=32", "model.max_decode_len=12",
    "train.batch_size=4", "train.warmup=20", "train.noam_k=0.05", "train.eval_every=10", "train.dtype=float64",
    "synth.feature_dim=16", "synth.vocab_size=5", "synth.min_tokens=2", "synth.max_tokens=4",
    "synth.frames_per_token=6", "synth.num_utterances=12",
]


def small_config(*extra: str) -> RunConfig:
    return apply_overrides(RunConfig(), SMALL + list(extra))


def small_corpus(cfg: RunConfig, seed: int = 0, n: int | None = None):
    spec = cfg.synth if n is None else dataclasses.replace(cfg.synth, num_utterances=n)
    return prepare(synthesize_corpus(spec, seed), cfg.model.use_deltas), synth_vocabulary(spec)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
