"""Tensor algebra, reverse-mode differentiation, AdamW and lr schedules."""
from . import ops
from .gradcheck import GradientCheckError, finite_diff_check
from .optim import AdamW, AdamWState, adamw_step
from .schedule import ScheduleSpec, lr_at
from .tape import (
    PRIMITIVES,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    default_dtype,
    evaluate,
    float64_mode,
    set_default_dtype,
)

__all__ = [
    "ops", "GradientCheckError", "finite_diff_check", "AdamW", "AdamWState",
    "adamw_step", "ScheduleSpec", "lr_at", "PRIMITIVES", "NonFiniteError",
    "ShapeError", "Tape", "Tensor", "default_dtype", "evaluate", "float64_mode",
    "set_default_dtype",
]
