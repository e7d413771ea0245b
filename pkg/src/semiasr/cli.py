"""``semiasr`` command line: pretrain, finetune, evaluate, decode,
attention-dump, selftest and synth-data.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .encoder import band_mass
from .features import Vocabulary, prepare, read_manifest, synth_vocabulary, synthesize_corpus, write_manifest
from .training import evaluate, finetune, load_checkpoint, model_from_checkpoint, pretrain, save_checkpoint
from .training.loop import (
    attention_maps,
    decode_corpus,
    encoder_from_checkpoint,
    score_records,
    write_history_csv,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("semiasr")


def build_id() -> str:
    """Package version plus a digest of the installed sources."""
    digest = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    if getattr(args, "run_dir", None):
        overrides.append(f"paths.run_dir={json.dumps(args.run_dir)}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _require_file(cfg: RunConfig, key: str) -> Path:
    section, name = key.split(".")
    value = getattr(getattr(cfg, section), name)
    if not value:
        raise ConfigError(key, "is required for this command")
    path = Path(value)
    if not path.exists():
        raise ConfigError(key, f"file not found: {value}")
    return path


def _run_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.paths.run_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _record_run(run_dir: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    (run_dir / "config.json").write_text(cfg.to_json() + "\n")
    _write_json(run_dir / "run.json", {"command": command, "seed": cfg.seed, "build_id": build_id(), **(extra or {})})


def _vocabulary(cfg: RunConfig, corpus) -> Vocabulary:
    if cfg.paths.vocab:
        path = _require_file(cfg, "paths.vocab")
        try:
            return Vocabulary.from_json(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError("paths.vocab", f"not a JSON token list: {exc}") from None
    return Vocabulary.from_texts(u.text for u in corpus)


def _load(cfg: RunConfig, key: str, vocab: Vocabulary | None = None):
    return prepare(read_manifest(_require_file(cfg, key), vocab), cfg.model.use_deltas)


def _checkpoint_arg(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError("--checkpoint", f"no checkpoint at {path}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    corpus = _load(cfg, "paths.train_manifest")
    valid = _load(cfg, "paths.valid_manifest") if cfg.paths.valid_manifest else None
    run_dir = _run_dir(cfg)
    res = pretrain(corpus, cfg, cfg.seed, valid=valid)
    ckdir = run_dir / "checkpoints"
    save_checkpoint(res.initial, ckdir / "pretrain_init")
    save_checkpoint(res.checkpoint, ckdir / "pretrain_best")
    for epoch, snap in sorted(res.snapshots.items()):
        save_checkpoint(snap, ckdir / f"pretrain_epoch{epoch}")
    write_history_csv(res.history, run_dir / "pretrain_loss.csv", res.HISTORY_COLUMNS)
    _record_run(run_dir, cfg, "pretrain", {
        "steps": res.steps, "stopped_early": res.stopped_early, "best_step": res.checkpoint.step,
        "initial_val_loss": res.initial_val_loss, "best_val_loss": res.best_val_loss,
        "snapshots": sorted(res.snapshots)})
    print(f"pretrain: {res.steps} steps, best validation L1 {res.best_val_loss} at step {res.checkpoint.step}; "
          f"checkpoints in {ckdir}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    mode = args.mode or cfg.train.finetune_mode
    raw = read_manifest(_require_file(cfg, "paths.train_manifest"))
    vocab = _vocabulary(cfg, raw)
    corpus = _load(cfg, "paths.train_manifest", vocab)
    init = None
    if mode != "scratch":
        init = _checkpoint_arg(args.init) if args.init else load_checkpoint(_require_file(cfg, "paths.init_checkpoint"))
    run_dir = _run_dir(cfg)
    res = finetune(corpus, vocab, init, mode, cfg, cfg.seed)
    save_checkpoint(res.checkpoint, run_dir / "checkpoints" / "finetune")
    write_history_csv(res.history, run_dir / "finetune_loss.csv", res.HISTORY_COLUMNS)
    _write_json(run_dir / "vocab.json", vocab.to_json())
    _record_run(run_dir, cfg, "finetune", {
        "mode": mode, "steps": len(res.history), "frozen_parameters": res.frozen,
        "trainable_count": res.trainable_count, "total_count": res.total_count, "frozen_count": res.frozen_count})
    print(f"finetune ({mode}): {len(res.history)} steps, {res.trainable_count}/{res.total_count} parameters trained")
    return EXIT_OK


def _decode_setup(args):
    cfg = _config(args)
    model, vocab = model_from_checkpoint(_checkpoint_arg(args.checkpoint), cfg)
    manifest = args.manifest or cfg.paths.eval_manifest
    if args.manifest:
        cfg = apply_overrides(cfg, [f"paths.eval_manifest={json.dumps(manifest)}"])
    corpus = _load(cfg, "paths.eval_manifest", vocab)
    beam = cfg.model.beam_width if args.beam is None else args.beam
    weight = cfg.model.ctc_fusion_weight if args.ctc_weight is None else args.ctc_weight
    if beam < 1:
        raise ConfigError("--beam", "must be >= 1")
    if not 0.0 <= weight <= 1.0:
        raise ConfigError("--ctc-weight", "must lie in [0, 1]")
    return cfg, model, vocab, corpus, beam, weight


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def cmd_decode(args) -> int:
    cfg, model, vocab, corpus, beam, weight = _decode_setup(args)
    records = decode_corpus(model, corpus, vocab, beam, weight, cfg.model.max_decode_len, greedy=args.greedy)
    out = Path(args.out) if args.out else _run_dir(cfg) / "decode.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_jsonl(out, records)
    print(f"decode: {len(records)} utterances -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, model, vocab, corpus, beam, weight = _decode_setup(args)
    records = decode_corpus(model, corpus, vocab, beam, weight, cfg.model.max_decode_len, greedy=args.greedy)
    res = score_records(records)
    run_dir = _run_dir(cfg)
    _write_jsonl(run_dir / "decode.jsonl", records)
    report = {"wer": res.wer, "cer": res.cer, "utterances": len(records), "beam": beam, "ctc_weight": weight,
              "greedy": bool(args.greedy), "words": dataclasses.asdict(res.word_counts),
              "chars": dataclasses.asdict(res.char_counts), "per_utterance": res.per_utterance}
    out = Path(args.out) if args.out else run_dir / "eval_report.json"
    _write_json(out, report)
    print(f"WER {100 * res.wer:.2f}% ({res.word_counts.errors}/{res.word_counts.ref_len})  "
          f"CER {100 * res.cer:.2f}%  -> {out}")
    return EXIT_OK


def write_pgm(path: Path, weights: np.ndarray) -> None:
    """8-bit binary PGM, linearly scaled so the largest weight maps to 255."""
    w = np.asarray(weights, dtype=np.float64)
    top = w.max()
    pixels = np.zeros(w.shape, dtype=np.uint8) if top <= 0 else np.rint(255.0 * w / top).astype(np.uint8)
    h, wd = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{wd} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def cmd_attention_dump(args) -> int:
    cfg = _config(args)
    ckpt = _checkpoint_arg(args.checkpoint)
    model = encoder_from_checkpoint(ckpt, cfg)
    n_layers, n_heads = len(model.blocks), model.blocks[0].attn.heads if model.blocks else 0
    if not 0 <= args.layer < n_layers:
        raise ConfigError("--layer", f"must lie in [0, {n_layers - 1}]" if n_layers else "encoder has no layers")
    if not 0 <= args.head < n_heads:
        raise ConfigError("--head", f"must lie in [0, {n_heads - 1}]")
    manifest = args.manifest or cfg.paths.eval_manifest or cfg.paths.train_manifest
    if not manifest:
        raise ConfigError("paths.eval_manifest", "is required for this command")
    if not Path(manifest).exists():
        raise ConfigError("--manifest" if args.manifest else "paths.eval_manifest", f"file not found: {manifest}")
    corpus = prepare(read_manifest(manifest), cfg.model.use_deltas)
    matches = [u for u in corpus if u.utt_id == args.utt]
    if not matches:
        raise ConfigError("--utt", f"utterance {args.utt!r} not in {manifest}")
    weights = attention_maps(model, matches[0])[args.layer][args.head]
    prefix = Path(args.out) if args.out else _run_dir(cfg) / f"attention_{args.utt}_L{args.layer}_H{args.head}"
    prefix.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(prefix.with_suffix(".csv"), weights, delimiter=",", fmt="%.9g")
    write_pgm(prefix.with_suffix(".pgm"), weights)
    print(f"attention {weights.shape[0]}x{weights.shape[1]} -> {prefix}.csv / .pgm; "
          f"band mass (|i-j|<=2) {band_mass(weights):.4f}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import SUITES, run_selftest

    names = args.suite or None
    unknown = sorted(set(names or []) - set(SUITES))
    if unknown:
        raise ConfigError("--suite", f"unknown suite(s) {unknown}; choose from {sorted(SUITES)}")
    results = run_selftest(names, fault=args.inject_fault)
    failed = [r.name for r in results if not r.passed]
    print(f"selftest: {len(results) - len(failed)}/{len(results)} suites passed")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    spec = cfg.synth if args.num is None else dataclasses.replace(cfg.synth, num_utterances=args.num)
    corpus = synthesize_corpus(spec, cfg.seed, args.prefix)
    out = Path(args.out)
    write_manifest(out / "manifest.jsonl", corpus)
    _write_json(out / "vocab.json", synth_vocabulary(spec).to_json())
    print(f"synth-data: {len(corpus)} utterances -> {out / 'manifest.jsonl'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semiasr", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=True):
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. train.max_steps=100 (repeatable)")
        p.add_argument("--seed", type=int, help="root seed (same as --set seed=N)")
        if run_dir:
            p.add_argument("--run-dir", help="output directory (same as --set paths.run_dir=...)")

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining of the encoder")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="joint CTC/attention training in direct, frozen or scratch mode")
    common(p)
    p.add_argument("--mode", choices=("direct", "frozen", "scratch"), help="defaults to train.finetune_mode")
    p.add_argument("--init", help="pretrain checkpoint directory (defaults to paths.init_checkpoint)")
    p.set_defaults(func=cmd_finetune)

    for name, func, helptext in (("evaluate", cmd_evaluate, "decode a manifest and report WER/CER"),
                                 ("decode", cmd_decode, "write hypotheses as JSON lines")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint directory")
        p.add_argument("--manifest", help="manifest to decode (defaults to paths.eval_manifest)")
        p.add_argument("--beam", type=int, help="beam width (defaults to model.beam_width)")
        p.add_argument("--ctc-weight", type=float, help="CTC fusion weight (defaults to model.ctc_fusion_weight)")
        p.add_argument("--greedy", action="store_true", help="attention-only argmax decoding")
        p.add_argument("--out", help="output path")
        p.set_defaults(func=func)

    p = sub.add_parser("attention-dump", help="write one encoder self-attention map as CSV and PGM")
    common(p)
    p.add_argument("--checkpoint", required=True, help="pretrain or fine-tune checkpoint directory")
    p.add_argument("--utt", required=True, help="utterance id")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--head", type=int, default=0)
    p.add_argument("--manifest", help="manifest holding the utterance (defaults to paths.eval_manifest)")
    p.add_argument("--out", help="output path prefix; .csv and .pgm are appended")
    p.set_defaults(func=cmd_attention_dump)

    p = sub.add_parser("selftest", help="run the built-in correctness suites")
    p.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    p.add_argument("--inject-fault", choices=("alpha",), help="negative control: break the joint-loss weighting")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("synth-data", help="write a synthetic corpus: manifest, features and vocabulary")
    common(p, run_dir=False)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--num", type=int, help="number of utterances (defaults to synth.num_utterances)")
    p.add_argument("--prefix", default="syn", help="utterance id prefix")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"semiasr {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        if args.verbose:
            log.exception("command failed")
        print(f"semiasr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
