"""Linear warmup followed by inverse-square-root decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .tensor import ConfigError, KernelError


class DomainError(KernelError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    peak_rate: float = 0.1024
    warmup_steps: int = 1000
    total_steps: int = 3500

    def __post_init__(self):
        if self.peak_rate <= 0:
            raise ConfigError("peak_rate must be positive")
        if self.warmup_steps < 1 or self.total_steps < 1:
            raise ConfigError("warmup_steps and total_steps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ConfigError("warmup_steps may not exceed total_steps")


def lr_schedule(step: int, cfg: ScheduleConfig) -> float:
    """Rate at 1-based ``step``: ``peak*s/W`` while warming up, then ``peak/sqrt(s-W)``."""
    if step <= 0:
        raise DomainError(f"schedule step must be >= 1, got {step}")
    if step > cfg.total_steps:
        raise DomainError(f"step {step} beyond total_steps={cfg.total_steps}")
    if step <= cfg.warmup_steps:
        return cfg.peak_rate * step / cfg.warmup_steps
    return cfg.peak_rate / math.sqrt(step - cfg.warmup_steps)
