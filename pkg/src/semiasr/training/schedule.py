from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Schedule:
    k: float = 0.5
    d: int = 64
    warmup: int = 400


def noam_lr(n: int, k: float, d: int, warmup: int) -> float:
    """k * d^-0.5 * min(n^-0.5, n * warmup^-1.5); linear ramp, peak at n == warmup."""
    if n < 1:
        raise ValueError(f"noam_lr: step must be >= 1, got {n}")
    return k * d**-0.5 * min(n**-0.5, n * warmup**-1.5)


def schedule_lr(schedule: Schedule, n: int) -> float:
    return noam_lr(n, schedule.k, schedule.d, schedule.warmup)
