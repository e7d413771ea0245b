"""Checkpoint directories: one MPET file per parameter plus ``meta.json``."""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics.optim import AdamState
from ..numerics.tensorio import load_tensor, save_tensor

META = "meta.json"


class CheckpointMismatch(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stage: str
    step: int
    config_hash: str
    meta: dict = field(default_factory=dict)
    optimizer: AdamState | None = None

    def copy(self) -> Checkpoint:
        opt = None
        if self.optimizer is not None:
            o = self.optimizer
            opt = AdamState(o.step, o.beta1, o.beta2, o.epsilon, {k: v.copy() for k, v in o.m.items()},
                            {k: v.copy() for k, v in o.v.items()})
        return Checkpoint({k: v.copy() for k, v in self.params.items()}, self.stage, self.step, self.config_hash,
                          json.loads(json.dumps(self.meta)), opt)


def _fname(name: str) -> str:
    return name + ".mpet"


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    for name in sorted(ckpt.params):
        save_tensor(path / _fname(name), ckpt.params[name])
    meta = {"stage": ckpt.stage, "step": ckpt.step, "config_hash": ckpt.config_hash,
            "parameters": sorted(ckpt.params), "meta": ckpt.meta}
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt_dir = path / "optimizer"
        opt_dir.mkdir()
        for name in sorted(o.m):
            save_tensor(opt_dir / _fname("m." + name), o.m[name])
            save_tensor(opt_dir / _fname("v." + name), o.v[name])
        meta["optimizer"] = {"step": o.step, "beta1": o.beta1, "beta2": o.beta2, "epsilon": o.epsilon,
                             "slots": sorted(o.m)}
    with open(path / META, "w") as fh:
        fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | os.PathLike, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    path = Path(path)
    if not (path / META).exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(path / META) as fh:
        meta = json.load(fh)
    if expected_hash is not None and meta["config_hash"] != expected_hash and not force:
        raise CheckpointMismatch(
            f"checkpoint {path} was built for config {meta['config_hash']}, current config is {expected_hash}")
    params = {name: load_tensor(path / _fname(name)) for name in meta["parameters"]}
    opt = None
    if "optimizer" in meta:
        o = meta["optimizer"]
        opt = AdamState(o["step"], o["beta1"], o["beta2"], o["epsilon"],
                        {n: load_tensor(path / "optimizer" / _fname("m." + n)) for n in o["slots"]},
                        {n: load_tensor(path / "optimizer" / _fname("v." + n)) for n in o["slots"]})
    return Checkpoint(params, meta["stage"], meta["step"], meta["config_hash"], meta.get("meta", {}), opt)
