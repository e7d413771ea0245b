"""Run configuration: dataclasses with defaults, JSON I/O and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .features import SynthSpec


class ConfigError(ValueError):
    """Configuration problem; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ModelConfig:
    feature_dim: int = 80
    use_deltas: bool = True
    conv_channels: list = field(default_factory=lambda: [64, 128])
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    d_ff: int = 256
    dropout: float = 0.1
    attn_dropout: float = 0.1
    tie_embeddings: bool = False
    label_smoothing: float = 0.1
    ctc_weight: float = 0.3
    mask_ratio: float = 0.15
    mask_probs: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    loss_mode: str = "masked"
    beam_width: int = 10
    ctc_fusion_weight: float = 0.3
    max_decode_len: int = 64

    @property
    def in_channels(self) -> int:
        return 3 if self.use_deltas else 1

    def architecture(self) -> dict:
        keys = ("feature_dim", "use_deltas", "conv_channels", "d_model", "heads", "enc_layers", "d_ff")
        return {k: getattr(self, k) for k in keys}

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def encoder_kwargs(self) -> dict:
        return dict(feature_dim=self.feature_dim, in_channels=self.in_channels, conv_channels=tuple(self.conv_channels),
                    d_model=self.d_model, heads=self.heads, layers=self.enc_layers, d_ff=self.d_ff,
                    dropout=self.dropout, attn_dropout=self.attn_dropout)

    def joint_kwargs(self) -> dict:
        return dict(feature_dim=self.feature_dim, in_channels=self.in_channels, conv_channels=tuple(self.conv_channels),
                    d_model=self.d_model, heads=self.heads, enc_layers=self.enc_layers, dec_layers=self.dec_layers,
                    d_ff=self.d_ff, dropout=self.dropout, attn_dropout=self.attn_dropout,
                    tie_embeddings=self.tie_embeddings)

    def validate(self) -> None:
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError("model.ctc_weight", "must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("model.label_smoothing", "must lie in [0, 1)")
        if not 0.0 <= self.ctc_fusion_weight <= 1.0:
            raise ConfigError("model.ctc_fusion_weight", "must lie in [0, 1]")
        if self.loss_mode not in ("masked", "unmasked", "all"):
            raise ConfigError("model.loss_mode", "must be one of masked, unmasked, all")
        if self.d_model % self.heads or self.d_model % 2:
            raise ConfigError("model.d_model", "must be even and divisible by heads")
        if len(self.mask_probs) != 3 or abs(sum(self.mask_probs) - 1.0) > 1e-9:
            raise ConfigError("model.mask_probs", "must be three probabilities summing to 1")
        for key in ("dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"model.{key}", "must lie in [0, 1)")
        if self.beam_width < 1:
            raise ConfigError("model.beam_width", "must be >= 1")


@dataclass
class TrainConfig:
    dtype: str = "float32"
    batch_size: int = 8
    max_steps: int = 2000
    noam_k: float = 0.5
    warmup: int = 400
    grad_clip: float = 5.0
    eval_every: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    val_fraction: float = 0.1
    finetune_mode: str = "frozen"
    frozen_steps: int = -1
    thaw: bool = False
    thaw_epochs: int = 2
    snapshot_epochs: list = field(default_factory=lambda: [1])
    pretrain_downsampler: bool = False

    def validate(self) -> None:
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype", "must be float32 or float64")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps", "must be >= 0")
        if self.warmup < 1 or self.noam_k <= 0:
            raise ConfigError("train.warmup", "warmup must be >= 1 and noam_k > 0")
        if self.finetune_mode not in ("direct", "frozen", "scratch"):
            raise ConfigError("train.finetune_mode", "must be direct, frozen or scratch")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every", "must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("train.val_fraction", "must lie in [0, 1)")


@dataclass
class PathsConfig:
    train_manifest: str = ""
    valid_manifest: str = ""
    eval_manifest: str = ""
    init_checkpoint: str = ""
    vocab: str = ""
    run_dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0

    def validate(self) -> RunConfig:
        self.model.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "paths": PathsConfig, "synth": SynthSpec}


def _coerce(key: str, value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected an integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {value!r}") from None
    if isinstance(current, list):
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                raise ConfigError(key, f"expected a JSON list, got {value!r}") from None
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return value
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build_section(name: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(name, "must be an object")
    obj = cls()
    names = {f.name for f in fields(cls)}
    values = {}
    for k, v in data.items():
        if k not in names:
            raise ConfigError(f"{name}.{k}", "unknown key")
        values[k] = _coerce(f"{name}.{k}", v, getattr(obj, k))
    return dataclasses.replace(obj, **values)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    cfg = RunConfig()
    for k, v in data.items():
        if k == "seed":
            cfg.seed = _coerce("seed", v, 0)
        elif k in _SECTIONS:
            setattr(cfg, k, _build_section(k, _SECTIONS[k], v))
        else:
            raise ConfigError(k, "unknown key")
    return cfg.validate()


def load_config(path: str | None) -> RunConfig:
    if not path:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    return config_from_dict(data)


def resolve_key(key: str) -> tuple[str, str]:
    """Map ``section.field`` or a bare unambiguous ``field`` to (section, field)."""
    if key == "seed":
        return "", "seed"
    if "." in key:
        section, name = key.split(".", 1)
        if section not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[section])}:
            raise ConfigError(key, "unknown key")
        return section, name
    hits = [s for s, cls in _SECTIONS.items() if key in {f.name for f in fields(cls)}]
    if len(hits) != 1:
        raise ConfigError(key, "unknown key" if not hits else f"ambiguous; qualify with one of {hits}")
    return hits[0], key


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``key=value`` strings; values parse as JSON when possible."""
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        section, name = resolve_key(key.strip())
        if section:
            data[section][name] = value
        else:
            data[name] = value
    return config_from_dict(data)
