"""Image I/O, a procedural texture corpus, and the light augmentation pipeline."""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class PPMError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Image:
    """RGB image stored channel-first with values in [0, 1]."""

    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"expected a 3xHxW array, got {self.rgb.shape}")
        if self.rgb.size and (self.rgb.min() < 0.0 or self.rgb.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[1]

    @property
    def width(self) -> int:
        return self.rgb.shape[2]

    def digest(self) -> str:
        return hashlib.sha1(self.rgb.tobytes()).hexdigest()


# -- PPM ---------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and (buf[pos:pos + 1].isspace() or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < n and buf[pos] not in (10, 13):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PPMError("truncated header", pos)
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos] != ord("#"):
            pos += 1
        tokens.append((buf[start:pos], start))
    return tokens, pos


def decode_ppm(buf: bytes) -> Image:
    if buf[:2] != b"P6":
        raise PPMError(f"bad magic {buf[:2]!r}, expected b'P6'", 0)
    tokens, pos = _header_tokens(buf[2:], 3)
    vals = []
    for tok, off in tokens:
        if not tok.isdigit():
            raise PPMError(f"expected an integer, got {tok!r}", off + 2)
        vals.append(int(tok))
    width, height, maxval = vals
    pos += 2
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}, only 255 is supported", tokens[2][1] + 2)
    if width <= 0 or height <= 0:
        raise PPMError(f"invalid dimensions {width}x{height}", tokens[0][1] + 2)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PPMError("missing whitespace after maxval", pos)
    pos += 1
    need = 3 * width * height
    if len(buf) - pos < need:
        raise PPMError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    rgb = raw.reshape(height, width, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
    return Image(rgb)


def encode_ppm(img: Image | np.ndarray) -> bytes:
    rgb = img.rgb if isinstance(img, Image) else np.asarray(img)
    q = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    return b"P6\n%d %d\n255\n" % (w, h) + q.transpose(1, 2, 0).tobytes()


def load_ppm(path) -> Image:
    with open(path, "rb") as f:
        return decode_ppm(f.read())


def write_ppm(path, img: Image | np.ndarray) -> None:
    data = encode_ppm(img)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


# -- synthetic corpus ----------------------------------------------------------

FAMILIES = ("stripes", "checkers", "blobs", "gradient", "rings", "dots")
PERIOD_RANGE = (0.12, 0.3)   # texture period as a fraction of the image side
BLOB_RADIUS = (0.06, 0.14)


def _texture(family: str, band: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """A pattern in [0, 1] of shape (size, size)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    period = rng.uniform(*PERIOD_RANGE) / (1 + band)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    if family == "stripes":
        p = 0.5 + 0.5 * np.sin(2 * np.pi * u / period + phase)
    elif family == "checkers":
        phase2 = rng.uniform(0, 2 * np.pi)
        s = np.sin(2 * np.pi * u / period + phase) * np.sin(2 * np.pi * v / period + phase2)
        p = 0.5 + 0.5 * np.tanh(4 * s)
    elif family == "blobs":
        k = rng.integers(3, 7)
        centers = rng.uniform(0, 1, size=(k, 2))
        radii = rng.uniform(*BLOB_RADIUS, size=k) / (1 + band)
        d2 = (xx[None] - centers[:, 0, None, None]) ** 2 + (yy[None] - centers[:, 1, None, None]) ** 2
        p = np.clip(np.exp(-d2 / (2 * radii[:, None, None] ** 2)).sum(0), 0, 1)
    elif family == "gradient":
        p = np.clip(u / np.sqrt(2) + rng.uniform(-0.2, 0.2), 0, 1) ** rng.uniform(0.7, 1.4)
    elif family == "rings":
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        r = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
        p = 0.5 + 0.5 * np.sin(2 * np.pi * r / period + phase)
    elif family == "dots":
        cu = np.mod(u / period + phase / (2 * np.pi), 1.0) - 0.5
        cv = np.mod(v / period, 1.0) - 0.5
        p = np.exp(-(cu ** 2 + cv ** 2) / (2 * 0.15 ** 2))
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return p


def synth_image(seed: int, index: int, size: int, num_classes: int) -> tuple[Image, int]:
    """Image ``index`` of the corpus drawn from ``seed``; class = index mod num_classes."""
    label = index % num_classes
    rng = np.random.default_rng([seed, index])
    family = FAMILIES[label % len(FAMILIES)]
    band = label // len(FAMILIES)
    p = _texture(family, band, size, rng)
    c0, c1 = rng.uniform(0.05, 0.95, size=(2, 3))
    noise = rng.normal(0.0, 0.03, size=(3, size, size))
    rgb = c0[:, None, None] * (1 - p) + c1[:, None, None] * p + noise
    return Image(np.clip(rgb, 0.0, 1.0)), label


@dataclass
class DatasetManifest:
    """Images as (source, label) pairs plus per-channel normalization stats.

    ``source`` is a PPM path or ``synth:<seed>:<index>:<size>:<classes>``.
    """

    entries: list[tuple[str, int]]
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_classes: int = field(init=False)

    def __post_init__(self):
        labels = sorted({lab for _, lab in self.entries})
        if labels and labels != list(range(len(labels))):
            raise ValueError(f"labels must be dense in [0, num_classes), got {labels}")
        self.num_classes = len(labels)

    def __len__(self):
        return len(self.entries)

    def load(self, i: int, root: str | os.PathLike = ".") -> Image:
        source = self.entries[i][0]
        if source.startswith("synth:"):
            _, seed, index, size, classes = source.split(":")
            return synth_image(int(seed), int(index), int(size), int(classes))[0]
        return load_ppm(os.path.join(root, source))

    def render(self) -> str:
        lines = ["mean=" + ",".join(repr(float(v)) for v in self.mean),
                 "std=" + ",".join(repr(float(v)) for v in self.std)]
        lines += [f"{src}\t{lab}" for src, lab in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "DatasetManifest":
        mean = std = None
        entries = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("mean="):
                mean = tuple(float(v) for v in line[5:].split(","))
            elif line.startswith("std="):
                std = tuple(float(v) for v in line[4:].split(","))
            else:
                try:
                    src, lab = line.rsplit("\t", 1)
                    entries.append((src, int(lab)))
                except ValueError:
                    raise ValueError(f"manifest line {lineno}: expected 'path<TAB>label'") from None
        if mean is None or std is None or len(mean) != 3 or len(std) != 3:
            raise ValueError("manifest needs 'mean=r,g,b' and 'std=r,g,b' header lines")
        return cls(entries, mean, std)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.render())

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        with open(path) as f:
            return cls.parse(f.read())


def channel_stats(images) -> tuple[tuple[float, ...], tuple[float, ...]]:
    stack = np.stack([im.rgb for im in images]).astype(np.float64)
    mean = stack.mean(axis=(0, 2, 3))
    std = stack.std(axis=(0, 2, 3))
    return tuple(float(v) for v in mean), tuple(float(max(v, 1e-6)) for v in std)


def synth_corpus(seed: int, n: int, size: int, num_classes: int):
    """Deterministic procedural texture corpus; returns ``(manifest, images)``."""
    if n < num_classes:
        raise ValueError(f"need n >= num_classes, got n={n}, num_classes={num_classes}")
    if size % 8:
        raise ValueError(f"size must be divisible by 8, got {size}")
    images, entries = [], []
    for i in range(n):
        img, label = synth_image(seed, i, size, num_classes)
        images.append(img)
        entries.append((f"synth:{seed}:{i}:{size}:{num_classes}", label))
    mean, std = channel_stats(images)
    return DatasetManifest(entries, mean, std), images


# -- augmentation ----------------------------------------------------------------

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Bilinear weights (n_out, n_in) using half-pixel centers."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - w1
    m[rows, i1] += w1
    return m


def resize_bilinear(rgb: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ry = _interp_matrix(rgb.shape[1], out_h)
    rx = _interp_matrix(rgb.shape[2], out_w)
    out = ry @ rgb.astype(np.float64) @ rx.T
    return np.clip(out, 0.0, 1.0)


def sample_crop(h: int, w: int, rng: np.random.Generator,
                scale=(0.67, 1.0), ratio=(3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Crop box ``(top, left, ch, cw)`` with area fraction uniform in ``scale``.

    The aspect ratio is log-uniform over the part of ``ratio`` for which a
    crop of the drawn area fits inside the image, so the area law is exact
    up to integer rounding.
    """
    area = rng.uniform(*scale)
    lo = max(ratio[0], area * w / h)
    hi = min(ratio[1], w / (area * h))
    if lo > hi:
        lo = hi = min(max(1.0, ratio[0]), ratio[1])
    aspect = math.exp(rng.uniform(math.log(lo), math.log(hi)))
    cw = min(w, max(1, int(round(math.sqrt(area * h * w * aspect)))))
    ch = min(h, max(1, int(round(math.sqrt(area * h * w / aspect)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return top, left, ch, cw


class View(NamedTuple):
    crop: Image            # un-normalized, source of prediction targets
    normalized: np.ndarray  # encoder input, 3 x out x out
    flipped: bool


def normalize(rgb: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)[:, None, None]
    std = np.asarray(std, dtype=np.float64)[:, None, None]
    return ((rgb - mean) / std).astype(np.float32)


def augment(img: Image, rng: np.random.Generator, out_size: int,
            mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> View:
    """Random resized crop, horizontal flip, then per-channel normalization."""
    if out_size > min(img.height, img.width):
        raise ValueError(f"out_size {out_size} exceeds image size {img.height}x{img.width}")
    top, left, ch, cw = sample_crop(img.height, img.width, rng)
    crop = resize_bilinear(img.rgb[:, top:top + ch, left:left + cw], out_size, out_size)
    flipped = bool(rng.random() < 0.5)
    if flipped:
        crop = crop[:, :, ::-1]
    crop = np.ascontiguousarray(crop, dtype=np.float32)
    return View(Image(crop), normalize(crop, mean, std), flipped)


def center_view(img: Image, out_size: int, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)) -> View:
    """Deterministic evaluation view: resize only when the size differs."""
    rgb = img.rgb
    if img.height != out_size or img.width != out_size:
        rgb = resize_bilinear(rgb, out_size, out_size).astype(np.float32)
    return View(Image(rgb), normalize(rgb, mean, std), False)
