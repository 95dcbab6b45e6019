"""Learning-rate schedules: linear warmup followed by cosine or step decay."""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "cosine"
    base_lr: float = 8e-4
    warmup_steps: int = 0
    total_steps: int = 100
    step_milestones: tuple[float, ...] = (0.90, 0.95)
    step_factor: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.warmup_steps < 0 or self.total_steps <= self.warmup_steps:
            raise ValueError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )


def lr_at(schedule: ScheduleSpec, t: int) -> float:
    if not 0 <= t <= schedule.total_steps:
        raise ValueError(f"step {t} outside [0, {schedule.total_steps}]")
    base, warm = schedule.base_lr, schedule.warmup_steps
    if t < warm:
        return base * t / warm
    if schedule.kind == "cosine":
        u = (t - warm) / (schedule.total_steps - warm)
        return base * (1.0 + math.cos(math.pi * u)) / 2.0
    passed = sum(1 for m in schedule.step_milestones if t >= m * schedule.total_steps)
    return base * schedule.step_factor ** passed
