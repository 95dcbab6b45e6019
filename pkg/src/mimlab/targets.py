"""Prediction targets and masked losses.

Regression targets are (optionally box-downsampled) raw RGB values. For a
token grid of ``g x g`` tokens and target resolution ``r`` each token owns a
``t x t`` block of target pixels with ``t = r / g``; its prediction vector
has ``3*t*t`` entries (regression), ``3*t*t*num_bins`` logits (bins, element
``e`` of the patchified target owning logits ``[e*B, (e+1)*B)``) or
``t*t*K`` logits (palette clusters, pixel-major).

Losses average over masked elements only; values and gradients at visible
tokens never enter the computation.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .masking import MaskGrid
from .numerics import ops
from .numerics.tape import Tensor
from .patches import patchify

REGRESSION_KINDS = ("l1", "l2", "smooth_l1")
CLASSIFICATION_KINDS = ("bins", "clusters")
SMOOTH_L1_BETA = 1.0

# per-image logit count above which classification targets warn about memory
LOGIT_VOLUME_WARN = 4 * 2 ** 20


@dataclass
class Palette:
    centers: np.ndarray
    seed: int = 0
    iterations: int = 0
    inertia: list[float] = field(default_factory=list)

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or len(c) == 0:
            raise ValueError(f"palette must be a non-empty Kx3 array, got {c.shape}")
        if c.min() < 0 or c.max() > 1:
            raise ValueError("palette centers must lie in [0, 1]^3")
        if len(np.unique(c, axis=0)) != len(c):
            raise ValueError("palette has duplicate centers")
        self.centers = c

    @property
    def k(self) -> int:
        return len(self.centers)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# K={self.k} seed={self.seed} iterations={self.iterations}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "g", "b"])
        for row in self.centers:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Palette":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("#"):
            raise ValueError("palette CSV must start with a '# K=.. seed=..' header")
        meta = dict(kv.split("=") for kv in lines[0][1:].split())
        rows = list(csv.reader(lines[1:]))
        if rows[0] != ["r", "g", "b"]:
            raise ValueError("palette CSV needs an 'r,g,b' column header")
        centers = np.array([[float(v) for v in r] for r in rows[1:]])
        if len(centers) != int(meta["K"]):
            raise ValueError(f"palette header says K={meta['K']} but has {len(centers)} rows")
        return cls(centers, int(meta.get("seed", 0)), int(meta.get("iterations", 0)))


@dataclass
class TargetSpec:
    kind: str = "l1"
    target_resolution: int | None = None  # None = input resolution
    num_bins: int = 8
    palette: Palette | None = None

    def __post_init__(self):
        if self.kind not in REGRESSION_KINDS + CLASSIFICATION_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == "bins" and self.num_bins < 2:
            raise ValueError("num_bins must be >= 2")
        if self.kind == "clusters" and self.palette is None:
            raise ValueError("cluster targets need a palette")

    @property
    def is_regression(self) -> bool:
        return self.kind in REGRESSION_KINDS

    def resolution(self, input_resolution: int) -> int:
        r = self.target_resolution or input_resolution
        if input_resolution % r:
            raise ValueError(f"target resolution {r} does not divide input resolution {input_resolution}")
        return r

    def pixels_per_token(self, input_resolution: int, grid: int) -> int:
        r = self.resolution(input_resolution)
        if r % grid:
            raise ValueError(
                f"target resolution {r} leaves a fractional block per token on a {grid}x{grid} grid"
            )
        return r // grid

    def output_dim(self, input_resolution: int, grid: int) -> int:
        t = self.pixels_per_token(input_resolution, grid)
        if self.kind == "bins":
            return 3 * t * t * self.num_bins
        if self.kind == "clusters":
            return t * t * self.palette.k
        return 3 * t * t

    @property
    def num_classes(self) -> int:
        return self.num_bins if self.kind == "bins" else self.palette.k

    def check_volume(self, input_resolution: int, grid: int) -> int:
        vol = grid * grid * self.output_dim(input_resolution, grid)
        if not self.is_regression and vol > LOGIT_VOLUME_WARN:
            warnings.warn(
                f"{self.kind} target at resolution {self.resolution(input_resolution)} needs "
                f"{vol} logits per image", ResourceWarning, stacklevel=2,
            )
        return vol

    def build(self, rgb: np.ndarray, grid: int) -> np.ndarray:
        """Per-token targets ``(..., N, G)`` from un-normalized ``(..., 3, R, R)`` images.

        Float values for regression, integer classes for classification.
        """
        rgb = np.asarray(rgb)
        r = self.resolution(rgb.shape[-1])
        t = self.pixels_per_token(rgb.shape[-1], grid)
        img = build_regression_target(rgb, r)
        if self.is_regression:
            return patchify(img, t)
        if self.kind == "bins":
            return patchify(discretize_bins(img, self.num_bins), t)
        pix = np.moveaxis(img, -3, -1)
        cls = palette_assign(pix, self.palette)
        return patchify(cls[..., None, :, :], t)


# -- regression ----------------------------------------------------------------

def build_regression_target(img: np.ndarray, target_resolution: int) -> np.ndarray:
    """Exact area-average downsample of ``(..., C, R, R)`` to ``target_resolution``."""
    img = np.asarray(img)
    r = img.shape[-1]
    if target_resolution <= 0 or r % target_resolution:
        raise ValueError(f"downsample factor {r}/{target_resolution} is not an integer")
    f = r // target_resolution
    if f == 1:
        return img
    *lead, c, h, w = img.shape
    return img.reshape(*lead, c, h // f, f, w // f, f).mean(axis=(-3, -1)).astype(img.dtype)


def _mask_index(mask, shape):
    """Normalize masks to a ``(B, N)`` boolean array usable as an index."""
    if isinstance(mask, MaskGrid):
        mask = mask.grid.reshape(1, -1)
    elif isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskGrid):
        mask = np.stack([m.grid.reshape(-1) for m in mask])
    mask = np.asarray(mask, dtype=bool).reshape(shape[:-1])
    if not mask.any():
        raise ValueError("masked loss undefined: no masked tokens")
    return mask


def _elementwise(diff: Tensor, kind: str) -> Tensor:
    if kind == "l1":
        return ops.abs(diff)
    if kind == "l2":
        return diff * diff
    if kind == "smooth_l1":
        a = ops.abs(diff)
        small = ops.minimum(a, SMOOTH_L1_BETA)
        return small * small * (0.5 / SMOOTH_L1_BETA) + (a - small)
    raise ValueError(f"not a regression kind: {kind!r}")


def masked_regression_loss(pred, target, mask, kind: str = "l1") -> Tensor:
    """Mean ``kind`` loss over elements of masked tokens.

    ``pred`` and ``target`` are ``(B, N, G)``; ``mask`` a ``(B, N)`` boolean
    array, a MaskGrid, or a list of MaskGrids (one per image).
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    idx = _mask_index(mask, pred.shape)
    diff = ops.getitem(pred, idx) - target[idx]
    return ops.mean(_elementwise(diff, kind))


def reconstruct_full_loss(pred, target, kind: str = "l1") -> Tensor:
    """Same losses averaged over every element (prediction + reconstruction)."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    return ops.mean(_elementwise(pred - target, kind))


# -- classification ------------------------------------------------------------

def discretize_bins(value, num_bins: int):
    """``floor(v * num_bins)`` with ``v = 1`` clamped into the last bin."""
    v = np.asarray(value)
    if np.any(v < 0) or np.any(v > 1) or np.any(np.isnan(v)):
        raise ValueError("bin discretization needs values in [0, 1]")
    idx = np.minimum(np.floor(v * num_bins).astype(np.int64), num_bins - 1)
    return int(idx) if idx.ndim == 0 else idx


def bin_midpoints(index, num_bins: int):
    return (np.asarray(index) + 0.5) / num_bins


def decode_predictions(predictions, spec: TargetSpec) -> np.ndarray:
    """Per-token pixel values ``(..., N, 3*t*t)`` from regression outputs or class logits.

    Classification logits are decoded by argmax: bins to their midpoints,
    clusters to their palette colors.
    """
    p = np.asarray(predictions, dtype=np.float64)
    if spec.is_regression:
        return p
    k = spec.num_classes
    cls = p.reshape(*p.shape[:-1], p.shape[-1] // k, k).argmax(-1)
    if spec.kind == "bins":
        return bin_midpoints(cls, k)
    colors = spec.palette.centers[cls]                     # (..., N, t*t, 3)
    return np.swapaxes(colors, -1, -2).reshape(*cls.shape[:-1], -1)


def masked_classification_loss(logits, classes, mask, num_classes: int) -> Tensor:
    """Mean cross-entropy over the targets of masked tokens.

    ``logits`` is ``(B, N, G*num_classes)`` and ``classes`` ``(B, N, G)``.
    For bin targets the G entries per token are channel/pixel elements, so
    the mean also averages over channels.
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    classes = np.asarray(classes)
    b, n, width = logits.shape
    g = classes.shape[-1]
    if width != g * num_classes:
        raise ValueError(f"logit width {width} != {g} targets x {num_classes} classes")
    idx = _mask_index(mask, logits.shape)
    picked = ops.reshape(ops.getitem(logits, idx), (-1, num_classes))
    logp = ops.log_softmax(picked, axis=-1)
    flat = classes[idx].reshape(-1)
    return -ops.mean(ops.getitem(logp, (np.arange(len(flat)), flat)))


def full_classification_loss(logits, classes, num_classes: int) -> Tensor:
    shape = logits.shape[:-1]
    return masked_classification_loss(logits, classes, np.ones(shape, dtype=bool), num_classes)


# -- palettes --------------------------------------------------------------------

def _sqdist(pixels: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((pixels[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def palette_assign(pixels, palette: Palette | np.ndarray, chunk: int = 65536):
    """Index of the nearest center for each RGB pixel (``(..., 3)``); ties go low."""
    centers = palette.centers if isinstance(palette, Palette) else np.asarray(palette, np.float64)
    if len(centers) == 0:
        raise ValueError("empty palette")
    pix = np.asarray(pixels, dtype=np.float64)
    flat = pix.reshape(-1, 3)
    out = np.empty(len(flat), dtype=np.int64)
    for i in range(0, len(flat), chunk):
        out[i:i + chunk] = np.argmin(_sqdist(flat[i:i + chunk], centers), axis=1)
    return int(out[0]) if pix.ndim == 1 else out.reshape(pix.shape[:-1])


def fit_palette(pixels, k: int, rng: np.random.Generator, iters: int = 20, seed: int = 0) -> Palette:
    """Lloyd's k-means on RGB samples.

    Centers start at ``k`` distinct sample colors; a cluster that empties is
    reseeded at the sample farthest from its current center.
    """
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, 3)
    if len(x) < k:
        raise ValueError(f"need at least {k} samples, got {len(x)}")
    distinct = np.unique(x, axis=0)
    if k > len(distinct):
        raise ValueError(f"K={k} exceeds the {len(distinct)} distinct colors in the sample")
    centers = distinct[rng.choice(len(distinct), size=k, replace=False)]
    inertia = []
    done = 0
    for _ in range(iters):
        d = _sqdist(x, centers)
        assign = np.argmin(d, axis=1)
        nearest = d[np.arange(len(x)), assign]
        inertia.append(float(nearest.sum()))
        new = centers.copy()
        counts = np.bincount(assign, minlength=k)
        for j in range(k):
            if counts[j]:
                new[j] = x[assign == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(np.argmax(nearest))
            new[j] = x[far]
            nearest[far] = 0.0
        done += 1
        if np.array_equal(new, centers):
            break
        centers = new
    centers = np.clip(centers, 0.0, 1.0)
    return Palette(centers, seed=seed, iterations=done, inertia=inertia)
