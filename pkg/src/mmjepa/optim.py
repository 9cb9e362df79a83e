"""Adam updates and cosine learning-rate schedule."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Parameter


@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Iterable[Parameter], lr: float, cfg: AdamConfig = AdamConfig()) -> None:
    """One bias-corrected Adam update per parameter, in place.

    Moment buffers and step counts live on the parameters themselves so a
    checkpoint captures the full optimizer state.
    """
    for p in params:
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        p.step_count += 1
        t = p.step_count
        p.adam_m += (1.0 - cfg.beta1) * (g - p.adam_m)
        p.adam_v += (1.0 - cfg.beta2) * (g * g - p.adam_v)
        mhat = p.adam_m / (1.0 - cfg.beta1**t)
        vhat = p.adam_v / (1.0 - cfg.beta2**t)
        p.data -= np.asarray(lr, dtype=p.dtype) * mhat / (np.sqrt(vhat) + np.asarray(cfg.eps, dtype=p.dtype))


class CosineSchedule:
    """Cosine decay from lr_max to lr_min over total_steps.

    Steps past the end clamp to lr_min; the first such call warns once.
    """

    def __init__(self, lr_max: float, lr_min: float, total_steps: int):
        if total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if lr_min > lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        self.lr_max = float(lr_max)
        self.lr_min = float(lr_min)
        self.total_steps = int(total_steps)
        self._warned = False

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        if step > self.total_steps:
            if not self._warned:
                warnings.warn(
                    f"cosine schedule queried at step {step} past total {self.total_steps}; clamping to lr_min",
                    stacklevel=2,
                )
                self._warned = True
            return self.lr_min
        frac = step / self.total_steps
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


def cosine_lr(step: int, schedule: CosineSchedule) -> float:
    """Learning rate at `step` under a cosine schedule (free-function form)."""
    return schedule.lr_at(step)
