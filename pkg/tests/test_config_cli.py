import filecmp
import json
import time

import numpy as np
import pytest
from conftest import SMALL

from semiasr.cli import build_id, main
from semiasr.config import ConfigError, RunConfig, apply_overrides, config_from_dict, load_config, resolve_key
from semiasr.features import read_manifest
from semiasr.training import load_checkpoint

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_defaults_are_valid():
    cfg = RunConfig().validate()
    assert cfg.model.d_model == 64 and cfg.model.heads == 4 and cfg.model.enc_layers == 4
    assert cfg.model.dec_layers == 2 and cfg.model.d_ff == 256 and cfg.train.warmup == 400


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"model": {"d_modle": 8}})
    assert exc.value.key == "model.d_modle"
    with pytest.raises(ConfigError):
        config_from_dict({"extra": 1})
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.nope=1"])


def test_type_errors_name_the_field():
    with pytest.raises(ConfigError) as exc:
        apply_overrides(RunConfig(), ["train.batch_size=many"])
    assert exc.value.key == "train.batch_size"
    with pytest.raises(ConfigError) as exc:
        apply_overrides(RunConfig(), ["model.ctc_weight=1.5"])
    assert exc.value.key == "model.ctc_weight"


def test_bare_keys_resolve_when_unambiguous():
    assert resolve_key("max_steps") == ("train", "max_steps")
    assert apply_overrides(RunConfig(), ["max_steps=0"]).train.max_steps == 0
    with pytest.raises(ConfigError):
        resolve_key("feature_dim")  # both model and synth


def test_written_config_round_trips(tmp_path):
    cfg = apply_overrides(RunConfig(), SMALL + ["seed=7"])
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert load_config(str(tmp_path / "c.json")) == cfg


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.json")


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def small_config_file(path, **train):
    cfg = apply_overrides(RunConfig(), SMALL + ["train.max_steps=12", "train.eval_every=4", "train.val_fraction=0.25",
                                                "synth.num_utterances=16"] + [f"train.{k}={v}" for k, v in train.items()])
    path.write_text(cfg.to_json())
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    conf = small_config_file(root / "c.json")
    assert main(["synth-data", "--config", conf, "--out", str(root / "data")]) == 0
    manifest = str(root / "data" / "manifest.jsonl")
    assert main(["pretrain", "--config", conf, "--run-dir", str(root / "pt"),
                 "--set", f"paths.train_manifest={manifest}"]) == 0
    assert main(["finetune", "--config", conf, "--run-dir", str(root / "ft"), "--mode", "frozen",
                 "--init", str(root / "pt" / "checkpoints" / "pretrain_best"),
                 "--set", f"paths.train_manifest={manifest}"]) == 0
    return {"root": root, "conf": conf, "manifest": manifest, "ft_ckpt": str(root / "ft" / "checkpoints" / "finetune"),
            "pt_dir": root / "pt"}


@pytest.mark.parametrize("value", ["", "/nonexistent/train.jsonl"])
def test_missing_manifest_exits_2_naming_key(tmp_path, capsys, value):
    conf = small_config_file(tmp_path / "c.json")
    code = main(["pretrain", "--config", conf, "--run-dir", str(tmp_path / "r"),
                 "--set", f"paths.train_manifest={value}"])
    assert code == 2
    assert "paths.train_manifest" in capsys.readouterr().err


def test_bad_override_exits_2(tmp_path, capsys):
    assert main(["pretrain", "--set", "train.batch_size=zero"]) == 2
    assert "train.batch_size" in capsys.readouterr().err


def test_synth_data_files(workspace):
    data = workspace["root"] / "data"
    corpus = read_manifest(data / "manifest.jsonl")
    assert len(corpus) == 16 and all(u.text for u in corpus)
    assert json.loads((data / "vocab.json").read_text())
    assert len(list((data / "feats").glob("*.mpet"))) == 16


def test_pretrain_run_directory(workspace):
    pt = workspace["pt_dir"]
    for name in ("config.json", "run.json", "pretrain_loss.csv"):
        assert (pt / name).is_file()
    for name in ("pretrain_init", "pretrain_best", "pretrain_epoch1"):
        assert (pt / "checkpoints" / name / "meta.json").is_file()
    run = json.loads((pt / "run.json").read_text())
    assert run["seed"] == 0 and run["build_id"] == build_id()
    assert not any("time" in k or "date" in k for k in run)
    cfg = load_config(str(pt / "config.json"))
    assert cfg.paths.train_manifest == workspace["manifest"]


def test_pretrain_zero_steps_checkpoint_equals_init(workspace, tmp_path):
    code = main(["pretrain", "--config", workspace["conf"], "--run-dir", str(tmp_path / "z"), "--set", "max_steps=0",
                 "--set", f"paths.train_manifest={workspace['manifest']}"])
    assert code == 0
    init = load_checkpoint(tmp_path / "z" / "checkpoints" / "pretrain_init")
    best = load_checkpoint(tmp_path / "z" / "checkpoints" / "pretrain_best")
    for k, v in init.params.items():
        np.testing.assert_array_equal(best.params[k], v)


def test_pretrain_twice_gives_identical_csv(workspace, tmp_path):
    code = main(["pretrain", "--config", workspace["conf"], "--run-dir", str(tmp_path / "again"),
                 "--set", f"paths.train_manifest={workspace['manifest']}"])
    assert code == 0
    assert filecmp.cmp(tmp_path / "again" / "pretrain_loss.csv", workspace["pt_dir"] / "pretrain_loss.csv",
                       shallow=False)


def test_finetune_records_frozen_names(workspace):
    ft = workspace["root"] / "ft"
    run = json.loads((ft / "run.json").read_text())
    pre = load_checkpoint(workspace["pt_dir"] / "checkpoints" / "pretrain_best")
    assert run["mode"] == "frozen"
    assert run["frozen_parameters"] == sorted(pre.params)
    assert run["trainable_count"] == run["total_count"] - run["frozen_count"]
    assert (ft / "finetune_loss.csv").is_file() and (ft / "vocab.json").is_file()


def test_frozen_finetune_without_checkpoint_exits_2(workspace, tmp_path, capsys):
    code = main(["finetune", "--config", workspace["conf"], "--run-dir", str(tmp_path / "f"), "--mode", "frozen",
                 "--set", f"paths.train_manifest={workspace['manifest']}"])
    assert code == 2
    assert "paths.init_checkpoint" in capsys.readouterr().err


def test_finetune_uses_vocab_file(workspace, tmp_path):
    vocab = workspace["root"] / "data" / "vocab.json"
    code = main(["finetune", "--config", workspace["conf"], "--run-dir", str(tmp_path / "s"), "--mode", "scratch",
                 "--set", "max_steps=1", "--set", f"paths.train_manifest={workspace['manifest']}",
                 "--set", f"paths.vocab={vocab}"])
    assert code == 0
    assert json.loads((tmp_path / "s" / "vocab.json").read_text()) == json.loads(vocab.read_text())


def _decode(workspace, out, *extra):
    code = main(["decode", "--config", workspace["conf"], "--checkpoint", workspace["ft_ckpt"],
                 "--manifest", workspace["manifest"], "--out", str(out), *extra])
    assert code == 0
    return [json.loads(line) for line in out.read_text().splitlines()]


def test_decode_jsonl_fields(workspace, tmp_path):
    rows = _decode(workspace, tmp_path / "d.jsonl", "--beam", "3")
    assert len(rows) == 16
    assert all(set(r) == {"utt_id", "hyp", "ref", "score_att", "score_ctc"} for r in rows)
    assert all(isinstance(r["score_att"], float) for r in rows)


def test_decode_beam_one_matches_greedy(workspace, tmp_path):
    beam = _decode(workspace, tmp_path / "b.jsonl", "--beam", "1", "--ctc-weight", "0")
    greedy = _decode(workspace, tmp_path / "g.jsonl", "--greedy")
    assert [r["hyp"] for r in beam] == [r["hyp"] for r in greedy]


def test_evaluate_report_matches_decode(workspace, tmp_path, capsys):
    code = main(["evaluate", "--config", workspace["conf"], "--checkpoint", workspace["ft_ckpt"],
                 "--manifest", workspace["manifest"], "--run-dir", str(tmp_path / "e"), "--beam", "2"])
    assert code == 0
    report = json.loads((tmp_path / "e" / "eval_report.json").read_text())
    assert report["words"]["ref_len"] == sum(r["ref_words"] for r in report["per_utterance"])
    assert report["wer"] == pytest.approx(report["words"]["substitutions"] / report["words"]["ref_len"]
                                          + (report["words"]["insertions"] + report["words"]["deletions"])
                                          / report["words"]["ref_len"], abs=1e-12)
    assert "WER" in capsys.readouterr().out


def test_decode_missing_checkpoint_exits_2(workspace, tmp_path):
    assert main(["decode", "--config", workspace["conf"], "--checkpoint", str(tmp_path / "none"),
                 "--manifest", workspace["manifest"]]) == 2


def _dump(workspace, ckpt, out, *extra):
    utt = read_manifest(workspace["manifest"])[0].utt_id
    return main(["attention-dump", "--config", workspace["conf"], "--checkpoint", str(ckpt), "--manifest",
                 workspace["manifest"], "--utt", utt, "--out", str(out), *extra])


def test_attention_dump_csv_and_pgm(workspace, tmp_path):
    ckpt = workspace["pt_dir"] / "checkpoints" / "pretrain_best"
    assert _dump(workspace, ckpt, tmp_path / "a", "--layer", "1", "--head", "1") == 0
    w = np.loadtxt(tmp_path / "a.csv", delimiter=",", ndmin=2)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)
    raw = (tmp_path / "a.pgm").read_bytes()
    header = f"P5\n{w.shape[1]} {w.shape[0]}\n255\n".encode()
    assert raw.startswith(header) and len(raw) == len(header) + w.size
    pixels = np.frombuffer(raw[len(header):], dtype=np.uint8)
    assert pixels.max() == 255


def test_attention_dump_untrained_rows_are_near_uniform(tmp_path):
    # default architecture; "near-uniform" = mean over rows of (max - min) <= 0.35 in every (layer, head)
    assert main(["synth-data", "--out", str(tmp_path / "d"), "--num", "2"]) == 0
    manifest = tmp_path / "d" / "manifest.jsonl"
    assert main(["pretrain", "--run-dir", str(tmp_path / "p"), "--set", "max_steps=0",
                 "--set", f"paths.train_manifest={manifest}"]) == 0
    utt = read_manifest(manifest)[0].utt_id
    cfg = RunConfig()
    for layer in range(cfg.model.enc_layers):
        for head in range(cfg.model.heads):
            out = tmp_path / f"u{layer}{head}"
            assert main(["attention-dump", "--checkpoint", str(tmp_path / "p" / "checkpoints" / "pretrain_init"),
                         "--manifest", str(manifest), "--utt", utt, "--layer", str(layer), "--head", str(head),
                         "--out", str(out)]) == 0
            w = np.loadtxt(out.with_suffix(".csv"), delimiter=",", ndmin=2)
            assert (w.max(1) - w.min(1)).mean() <= 0.35, (layer, head)


@pytest.mark.parametrize("extra", [["--layer", "2"], ["--head", "-1"], ["--head", "2"]])
def test_attention_dump_rejects_out_of_range(workspace, tmp_path, extra):
    assert _dump(workspace, workspace["pt_dir"] / "checkpoints" / "pretrain_best", tmp_path / "x", *extra) == 2


def test_selftest_passes_and_fails_on_injected_fault(capsys):
    assert main(["selftest", "--suite", "schedule", "--suite", "joint_loss"]) == 0
    assert main(["selftest", "--suite", "joint_loss", "--inject-fault", "alpha"]) == 1
    assert "FAIL joint_loss" in capsys.readouterr().out


def test_full_selftest_within_budget():
    t0 = time.perf_counter()
    assert main(["selftest"]) == 0
    assert time.perf_counter() - t0 <= 300.0
