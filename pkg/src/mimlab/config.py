"""Experiment configuration and its ``key = value`` text form.

Nested dataclasses flatten to dotted keys (``mask.strategy = random``).
Parsing is strict: unknown keys and missing keys are both errors.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .masking import MaskConfig
from .model import EncoderConfig

LOSS_SCOPES = ("masked_only", "full_image")


class ConfigError(ValueError):
    def __init__(self, msg: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + msg)
        self.line = line
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""          # empty = synthetic corpus
    seed: int = 0
    num_images: int = 512
    num_classes: int = 4
    image_size: int = 64


@dataclass(frozen=True)
class TargetConfig:
    kind: str = "l1"
    resolution: int = 0         # 0 = input resolution
    num_bins: int = 8
    palette_size: int = 64
    palette_iters: int = 20
    palette_samples: int = 20000


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str = "cosine"
    base_lr: float = 8e-4 * 32 / 2048
    warmup_fraction: float = 0.1
    step_milestones: tuple[float, ...] = (0.9, 0.95)
    step_factor: float = 0.1


@dataclass(frozen=True)
class EvalConfig:
    test_fraction: float = 0.25
    probe_epochs: int = 300
    probe_lr: float = 0.01
    probe_weight_decay: float = 1e-4
    finetune_epochs: int = 20
    finetune_lr: float = 1e-3
    finetune_batch_size: int = 32
    layer_decay: float = 0.9
    drop_path: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskConfig = field(default_factory=lambda: MaskConfig("random", 8, 0.6))
    target: TargetConfig = field(default_factory=TargetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head_kind: str = "linear"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 32
    epochs: int = 10
    max_steps: int = 0          # 0 = run every epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    loss_scope: str = "masked_only"
    augment: bool = True
    checkpoint_every: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.loss_scope not in LOSS_SCOPES:
            raise ConfigError(f"loss_scope must be one of {LOSS_SCOPES}, got {self.loss_scope!r}")
        if self.batch_size <= 0 or self.epochs <= 0:
            raise ConfigError("batch_size and epochs must be positive")
        if self.data.image_size < self.encoder.input_resolution:
            raise ConfigError("data.image_size smaller than encoder.input_resolution")
        mp, tp = self.mask.masked_patch_size, self.encoder.patch_size
        if mp % tp:
            raise ConfigError(f"masked patch size {mp} must be a multiple of the token patch size {tp}")
        self.mask.grid_for(self.encoder.input_resolution)

    def digest(self) -> str:
        return hashlib.sha256(render(self).encode()).hexdigest()


@dataclass(frozen=True)
class SweepConfig:
    """Axes of an AvgDist sweep."""

    strategies: tuple[str, ...] = ("random",)
    patch_sizes: tuple[int, ...] = (4, 8, 16, 32, 64)
    ratios: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    num_seeds: int = 32
    image_size: int = 192

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("strategies must name at least one masking strategy", key="strategies")
        if self.num_seeds <= 0:
            raise ConfigError("num_seeds must be positive", key="num_seeds")


# -- text form -----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def render(config) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in _flatten(config))


def _coerce(raw: str, like, key: str, line: int):
    try:
        if isinstance(like, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            kind = type(like[0]) if like else str
            return tuple(kind(x.strip()) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", line, key) from None


def parse(text: str, cls=TrainConfig, partial: bool = False):
    """Parse ``key = value`` lines into ``cls``.

    With ``partial`` missing keys take their defaults; otherwise every key
    must be present.
    """
    defaults = dict(_flatten(cls()))
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"expected 'key = value', got {s!r}", lineno)
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        values[key] = _coerce(raw, defaults[key], key, lineno)
    missing = [k for k in defaults if k not in values]
    if missing and not partial:
        raise ConfigError(f"missing key {missing[0]!r}", key=missing[0])
    for k in missing:
        values[k] = defaults[k]
    try:
        return _build(cls, values, "")
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def _build(cls, values, prefix):
    proto = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        v = getattr(proto, f.name)
        kwargs[f.name] = _build(type(v), values, key + ".") if dataclasses.is_dataclass(v) else values[key]
    return cls(**kwargs)


def load(path, cls=TrainConfig, partial: bool = False):
    with open(path) as f:
        return parse(f.read(), cls, partial)
