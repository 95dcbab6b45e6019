"""Masked-image-modeling pretraining loop and binary checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .config import TrainConfig
from .imaging import DatasetManifest, Image, augment, center_view, synth_corpus
from .masking import MaskConfig, generate
from .model import EncoderState, HeadConfig
from .numerics.optim import AdamW, AdamWState
from .numerics.schedule import ScheduleSpec, lr_at
from .numerics.tape import NonFiniteError, Tape
from .targets import (
    Palette,
    TargetSpec,
    fit_palette,
    full_classification_loss,
    masked_classification_loss,
    masked_regression_loss,
    reconstruct_full_loss,
)

log = logging.getLogger(__name__)

MAGIC = b"SMIM"
VERSION = 1


# -- data ----------------------------------------------------------------------

@dataclass
class Dataset:
    manifest: DatasetManifest
    images: list[Image]

    def __len__(self):
        return len(self.images)

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.manifest.entries], dtype=np.int64)

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        m = DatasetManifest([self.manifest.entries[i] for i in indices], self.manifest.mean,
                            self.manifest.std)
        return Dataset(m, [self.images[i] for i in indices])


def load_dataset(cfg: config_mod.DataConfig, root=".") -> Dataset:
    if cfg.manifest:
        manifest = DatasetManifest.read(os.path.join(root, cfg.manifest))
        base = os.path.dirname(os.path.join(root, cfg.manifest))
        return Dataset(manifest, [manifest.load(i, base) for i in range(len(manifest))])
    manifest, images = synth_corpus(cfg.seed, cfg.num_images, cfg.image_size, cfg.num_classes)
    return Dataset(manifest, images)


def build_target_spec(cfg: TrainConfig, dataset: Dataset) -> TargetSpec:
    t = cfg.target
    palette = None
    if t.kind == "clusters":
        rng = np.random.default_rng([cfg.seed, 7])
        pix = np.concatenate([im.rgb.reshape(3, -1).T for im in dataset.images])
        sample = pix[rng.choice(len(pix), size=min(t.palette_samples, len(pix)), replace=False)]
        palette = fit_palette(sample, t.palette_size, rng, t.palette_iters, seed=cfg.seed)
    return TargetSpec(t.kind, t.resolution or None, t.num_bins, palette)


def build_model(cfg: TrainConfig, spec: TargetSpec) -> EncoderState:
    enc = cfg.encoder
    spec.check_volume(enc.input_resolution, enc.grid)
    head = HeadConfig(cfg.head_kind, spec.output_dim(enc.input_resolution, enc.grid))
    return EncoderState.create(enc, head, np.random.default_rng([cfg.seed, 3]))


def no_decay(name: str, arr: np.ndarray) -> bool:
    return arr.ndim <= 1 or name in ("pos_embed", "mask_token")


def make_optimizer(cfg: TrainConfig, state: EncoderState, lr_scale=None) -> AdamW:
    return AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
                 lr_scale=dict(lr_scale or {}),
                 decay={k: not no_decay(k, v) for k, v in state.params.items()})


# -- checkpoint ------------------------------------------------------------------

class CheckpointError(ValueError):
    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_t: int = 0
    step: int = 0
    rng_state: str = "{}"
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_table(out: list, table: dict[str, np.ndarray], dtype: str) -> None:
    out.append(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype=dtype)
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())


def encode_checkpoint(ck: Checkpoint) -> bytes:
    text = config_mod.render(ck.config).encode()
    rng = ck.rng_state.encode()
    out = [MAGIC, struct.pack("<I", VERSION),
           struct.pack("<I", len(text)), text, bytes.fromhex(ck.config.digest()),
           struct.pack("<Q", ck.step), struct.pack("<I", len(rng)), rng]
    _pack_table(out, ck.params, "<f4")
    _pack_table(out, ck.adam_m, "<f4")
    _pack_table(out, ck.adam_v, "<f4")
    out.append(struct.pack("<Q", ck.adam_t))
    _pack_table(out, ck.buffers, "<f8")
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def table(self, dtype: str, what: str) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I", what + " count")
        out = {}
        itemsize = np.dtype(dtype).itemsize
        for _ in range(count):
            (nlen,) = self.unpack("<H", what + " name length")
            name = self.take(nlen, what + " name").decode()
            (ndim,) = self.unpack("<B", f"{what} {name} rank")
            shape = self.unpack(f"<{ndim}I", f"{what} {name} shape")
            n = math.prod(shape)
            data = self.take(n * itemsize, f"{what} {name} data")
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype[1:])
        return out


def decode_checkpoint(buf: bytes, expected: TrainConfig | None = None, force: bool = False) -> Checkpoint:
    if len(buf) < 8:
        raise CheckpointError("file too short for a checkpoint header", 0)
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}", 0)
    (crc,) = struct.unpack("<I", buf[-4:])
    body = buf[:-4]
    r = _Reader(body)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: file is truncated or corrupt", len(buf) - 4)
    (tlen,) = r.unpack("<I", "config length")
    text = r.take(tlen, "config").decode()
    digest = r.take(32, "config digest").hex()
    try:
        cfg = config_mod.parse(text)
    except config_mod.ConfigError as e:
        raise CheckpointError(f"embedded config invalid: {e}", 12) from None
    if cfg.digest() != digest:
        raise CheckpointError("embedded config does not match its digest", 12 + tlen)
    if expected is not None and expected.digest() != digest and not force:
        raise CheckpointError("checkpoint was written for a different config (use force to override)")
    (step,) = r.unpack("<Q", "step")
    (rlen,) = r.unpack("<I", "rng state length")
    rng_state = r.take(rlen, "rng state").decode()
    params = r.table("<f4", "params")
    m = r.table("<f4", "adam m")
    v = r.table("<f4", "adam v")
    (adam_t,) = r.unpack("<Q", "adam step")
    buffers = r.table("<f8", "buffers")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint body", r.pos)
    return Checkpoint(cfg, params, m, v, adam_t, step, rng_state, buffers)


def save_checkpoint(path, ck: Checkpoint) -> None:
    data = encode_checkpoint(ck)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expected: TrainConfig | None = None, force: bool = False) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read(), expected, force)


def state_from_checkpoint(ck: Checkpoint) -> tuple[EncoderState, TargetSpec]:
    cfg = ck.config
    palette = None
    if "target.palette" in ck.buffers:
        palette = Palette(ck.buffers["target.palette"], seed=cfg.seed)
    t = cfg.target
    spec = TargetSpec(t.kind, t.resolution or None, t.num_bins, palette)
    enc = cfg.encoder
    head = HeadConfig(cfg.head_kind, spec.output_dim(enc.input_resolution, enc.grid))
    return EncoderState(enc, head, {k: v.copy() for k, v in ck.params.items()}), spec


# -- training ----------------------------------------------------------------------

def metrics_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "loss"])
    for step, lr, loss in rows:
        w.writerow([step, repr(float(lr)), repr(float(loss))])
    return buf.getvalue()


class Pretrainer:
    """Owns model, optimizer and step counter for one pretraining run.

    Every random choice at step ``s`` comes from generators seeded with
    ``(seed, tag, s)``, so a run resumed from a checkpoint at step ``s``
    continues exactly as the uninterrupted run would.
    """

    def __init__(self, config: TrainConfig, dataset: Dataset, state: EncoderState | None = None,
                 spec: TargetSpec | None = None):
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        self.config = config
        self.dataset = dataset
        self.spec = spec or build_target_spec(config, dataset)
        self.state = state or build_model(config, self.spec)
        self.optimizer = make_optimizer(config, self.state)
        self.step_count = 0
        self.metrics: list[tuple[int, float, float]] = []
        enc = config.encoder
        self.mask_cfg: MaskConfig = config.mask
        self.mask_split = config.mask.masked_patch_size // enc.patch_size
        self.steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
        total = config.epochs * self.steps_per_epoch
        if config.max_steps:
            total = min(total, config.max_steps)
        self.total_steps = total
        sc = config.schedule
        warmup = min(int(round(sc.warmup_fraction * total)), total - 1)
        self.schedule = ScheduleSpec(sc.kind, sc.base_lr, warmup, total,
                                     tuple(sc.step_milestones), sc.step_factor)

    # -- persistence
    def checkpoint(self) -> Checkpoint:
        st = self.optimizer.state
        m = self.dataset.manifest
        buffers = {"data.mean": np.asarray(m.mean, dtype=np.float64),
                   "data.std": np.asarray(m.std, dtype=np.float64)}
        if self.spec.palette is not None:
            buffers["target.palette"] = self.spec.palette.centers
        return Checkpoint(
            self.config,
            dict(self.state.params),
            {k: s.m for k, s in st.items()},
            {k: s.v for k, s in st.items()},
            max((s.t for s in st.values()), default=0),
            self.step_count,
            json.dumps({"seed": self.config.seed, "step": self.step_count}),
            buffers,
        )

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint, dataset: Dataset) -> "Pretrainer":
        state, spec = state_from_checkpoint(ck)
        tr = cls(ck.config, dataset, state, spec)
        tr.step_count = ck.step
        for k in ck.adam_m:
            tr.optimizer.state[k] = AdamWState(ck.adam_m[k].copy(), ck.adam_v[k].copy(), ck.adam_t)
        return tr

    # -- batches
    def batch_indices(self, step: int) -> np.ndarray:
        epoch, j = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng([self.config.seed, 1, epoch]).permutation(len(self.dataset))
        b = self.config.batch_size
        return perm[j * b:(j + 1) * b]

    def prepare_batch(self, indices, rng: np.random.Generator):
        """Encoder inputs, un-normalized crops and token-level masks."""
        res = self.config.encoder.input_resolution
        mean, std = self.dataset.manifest.mean, self.dataset.manifest.std
        inputs, crops, masks = [], [], []
        for i in indices:
            img = self.dataset.images[int(i)]
            view = augment(img, rng, res, mean, std) if self.config.augment else center_view(img, res, mean, std)
            m = generate(self.mask_cfg, res, rng)
            if self.mask_split > 1:
                m = m.upsample(self.mask_split)
            inputs.append(view.normalized)
            crops.append(view.crop.rgb)
            masks.append(m.grid.reshape(-1))
        return np.stack(inputs), np.stack(crops), np.stack(masks)

    def loss(self, params, inputs, crops, masks, **kw):
        """Scalar loss on a tape given leaf ``params``."""
        enc = self.config.encoder
        _, pred = self.state.forward(inputs, masks, params, **kw)
        target = self.spec.build(crops, enc.grid)
        full = self.config.loss_scope == "full_image"
        if self.spec.is_regression:
            if full:
                return reconstruct_full_loss(pred, target, self.spec.kind)
            return masked_regression_loss(pred, target, masks, self.spec.kind)
        if full:
            return full_classification_loss(pred, target, self.spec.num_classes)
        return masked_classification_loss(pred, target, masks, self.spec.num_classes)

    def pretrain_step(self) -> float:
        """One optimizer update on the batch for the current step; returns the loss."""
        step = self.step_count
        if step >= self.total_steps:
            raise RuntimeError(f"run already finished ({self.total_steps} steps)")
        rng = np.random.default_rng([self.config.seed, 2, step])
        inputs, crops, masks = self.prepare_batch(self.batch_indices(step), rng)
        tape = Tape()
        params = self.state.leaves(tape)
        loss = self.loss(params, inputs, crops, masks)
        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss {value} at step {step}; config:\n{config_mod.render(self.config)}"
            )
        names = list(params)
        grads = dict(zip(names, tape.grad(loss, [params[k] for k in names])))
        lr = lr_at(self.schedule, step)
        self.optimizer.step(self.state.params, grads, lr)
        self.metrics.append((step, lr, value))
        self.step_count += 1
        return value

    def run(self, out_dir=None, until: int | None = None) -> Checkpoint:
        until = self.total_steps if until is None else min(until, self.total_steps)
        every = self.config.checkpoint_every
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        while self.step_count < until:
            loss = self.pretrain_step()
            if self.step_count % 20 == 0 or self.step_count == until:
                log.info("step %d/%d loss %.5f", self.step_count, self.total_steps, loss)
            if out_dir and every and self.step_count % every == 0:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{self.step_count:06d}.smim"), self.checkpoint())
        ck = self.checkpoint()
        if out_dir:
            save_checkpoint(os.path.join(out_dir, "final.smim"), ck)
            with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
                f.write(metrics_csv(self.metrics))
        return ck


def pretrain_run(config: TrainConfig, dataset: Dataset, out_dir=None) -> tuple[Checkpoint, list]:
    """Train from scratch; returns the final checkpoint and ``(step, lr, loss)`` rows."""
    tr = Pretrainer(config, dataset)
    ck = tr.run(out_dir)
    return ck, tr.metrics


def heldout_masks(n: int, mask_cfg: MaskConfig, state: EncoderState, seed: int = 12345) -> np.ndarray:
    """Fixed token-level masks ``(n, N)`` for evaluation."""
    res = state.config.input_resolution
    split = mask_cfg.masked_patch_size // state.config.patch_size
    rng = np.random.default_rng([seed, 5])
    out = []
    for _ in range(n):
        m = generate(mask_cfg, res, rng)
        out.append((m.upsample(split) if split > 1 else m).grid.reshape(-1))
    return np.stack(out)


def heldout_masked_loss(state: EncoderState, spec: TargetSpec, dataset: Dataset, masks: np.ndarray,
                        batch: int = 64) -> float:
    """Masked regression loss on un-augmented images under the given masks."""
    res = state.config.input_resolution
    mean, std = dataset.manifest.mean, dataset.manifest.std
    total, count = 0.0, 0
    for s in range(0, len(dataset), batch):
        idx = range(s, min(s + batch, len(dataset)))
        views = [center_view(dataset.images[i], res, mean, std) for i in idx]
        m = masks[s:s + len(idx)]
        _, pred = state.forward(np.stack([v.normalized for v in views]), m)
        target = spec.build(np.stack([v.crop.rgb for v in views]), state.config.grid)
        n = int(m.sum()) * target.shape[-1]
        total += masked_regression_loss(pred, target, m, spec.kind).item() * n
        count += n
    return total / count
