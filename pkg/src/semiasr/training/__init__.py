from .checkpoint import Checkpoint, CheckpointMismatch, load_checkpoint, save_checkpoint
from .loop import (
    FinetuneResult,
    PretrainResult,
    TrainingDiverged,
    average_runs,
    decode_corpus,
    evaluate,
    finetune,
    model_from_checkpoint,
    pretrain,
)
from .metrics import wer
from .schedule import Schedule, noam_lr

__all__ = [
    "Checkpoint",
    "CheckpointMismatch",
    "FinetuneResult",
    "PretrainResult",
    "Schedule",
    "TrainingDiverged",
    "average_runs",
    "decode_corpus",
    "evaluate",
    "finetune",
    "load_checkpoint",
    "model_from_checkpoint",
    "noam_lr",
    "pretrain",
    "save_checkpoint",
    "wer",
]
