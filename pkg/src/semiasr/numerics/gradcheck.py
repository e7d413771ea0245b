"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    analytic: float
    numeric: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.1e}) over {self.checked} coords; "
                f"worst {self.worst_param}{list(self.worst_index or ())} analytic={self.analytic:.6e} numeric={self.numeric:.6e}")


def relative_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare backward() gradients of ``f()`` against central differences.

    ``f`` re-evaluates the loss from the current parameter values and must be
    deterministic. When ``max_coords`` is set, that many coordinates per
    parameter are sampled instead of checking all of them. Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = (0.0, None, None, 0.0, 0.0)
    checked = 0
    for name, p in params.items():
        flat_idx = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            flat_idx = rng.choice(p.size, size=max_coords, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), p.shape)
            orig = p.data[idx].copy()
            p.data[idx] = orig + h
            fp = float(f().data)
            p.data[idx] = orig - h
            fm = float(f().data)
            p.data[idx] = orig
            num = (fp - fm) / (2 * h)
            a = float(analytic[name][idx])
            err = relative_error(a, num, floor)
            checked += 1
            if err > worst[0] or worst[1] is None:
                worst = (err, name, tuple(int(i) for i in idx), a, num)
    for p in params.values():
        p.grad = None
    return GradCheckReport(worst[0], worst[1], worst[2], worst[3], worst[4], checked, tol)


def leaf(data, dtype=np.float64) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)
