"""Patch-level masking strategies and the AvgDist analysis.

Three generators produce a :class:`MaskGrid` over the patch grid:

* ``random``: exactly ``k`` patches, uniformly without replacement;
* ``square``: one movable ``s x s`` square of patches;
* ``blockwise``: a union of random rectangles grown until ``k`` is reached.

``k = round_half_away(ratio * gh * gw)`` everywhere.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

STRATEGIES = ("random", "square", "blockwise")

MIN_BLOCK = 4
MAX_ATTEMPTS = 1000
BLOCK_ASPECT = (0.3, 1 / 0.3)


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskConfig:
    strategy: str = "random"
    masked_patch_size: int = 32
    mask_ratio: float = 0.6

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown masking strategy {self.strategy!r}")
        if self.masked_patch_size <= 0:
            raise ValueError("masked_patch_size must be positive")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")

    def grid_for(self, image_size: int) -> tuple[int, int]:
        if image_size % self.masked_patch_size:
            raise ValueError(
                f"image size {image_size} not divisible by masked patch size {self.masked_patch_size}"
            )
        g = image_size // self.masked_patch_size
        return g, g


@dataclass(frozen=True)
class MaskGrid:
    """Binary mask over patches (True = masked)."""

    grid: np.ndarray
    masked_patch_size: int = 1

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ValueError(f"mask grid must be 2-d, got shape {g.shape}")
        if g.dtype != bool:
            if not np.all((g == 0) | (g == 1)):
                raise ValueError("mask entries must be 0 or 1")
            g = g.astype(bool)
        g = g.copy()
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    @property
    def ratio(self) -> float:
        return self.count / self.grid.size

    def pixels(self) -> np.ndarray:
        """Expand to a pixel-level boolean mask."""
        p = self.masked_patch_size
        return np.kron(self.grid, np.ones((p, p), dtype=bool))

    def upsample(self, factor: int) -> "MaskGrid":
        """Re-express on a finer grid (e.g. 32px mask patches over 16px tokens)."""
        if factor < 1 or self.masked_patch_size % factor:
            raise ValueError(f"cannot split patch {self.masked_patch_size} by {factor}")
        fine = np.kron(self.grid, np.ones((factor, factor), dtype=bool))
        return MaskGrid(fine, self.masked_patch_size // factor)


def gen_random_mask(grid, ratio: float, rng: np.random.Generator, patch: int = 1) -> MaskGrid:
    gh, gw = grid
    if not 0.0 <= ratio <= 1.0:
        raise MaskError(f"ratio must lie in [0, 1], got {ratio}")
    k = round_half_away(ratio * gh * gw)
    flat = np.zeros(gh * gw, dtype=bool)
    flat[rng.permutation(gh * gw)[:k]] = True
    return MaskGrid(flat.reshape(gh, gw), patch)


def square_side(grid, ratio: float) -> int:
    gh, gw = grid
    return round_half_away(math.sqrt(ratio * gh * gw))


def gen_square_mask(grid, ratio: float, rng: np.random.Generator, patch: int = 1) -> MaskGrid:
    """One ``s x s`` square at a uniformly random offset; realized ratio is ``s^2 / (gh*gw)``."""
    gh, gw = grid
    s = square_side(grid, ratio)
    if s == 0:
        raise MaskError(f"ratio {ratio} too small for any square on a {gh}x{gw} grid")
    if s > min(gh, gw):
        raise MaskError(f"square side {s} exceeds grid {gh}x{gw}")
    top = int(rng.integers(0, gh - s + 1))
    left = int(rng.integers(0, gw - s + 1))
    m = np.zeros((gh, gw), dtype=bool)
    m[top:top + s, left:left + s] = True
    return MaskGrid(m, patch)


def gen_blockwise_mask(grid, ratio: float, rng: np.random.Generator, patch: int = 1) -> MaskGrid:
    """Union of random rectangles until at least ``k`` patches are masked.

    Block area is uniform in ``[MIN_BLOCK, remaining]``, aspect log-uniform
    in ``BLOCK_ASPECT``. A block is kept only if it covers at least
    ``MIN_BLOCK`` cells and adds no more than ``max(remaining, MIN_BLOCK)``
    new ones, so the final count lies in ``[k, k + MIN_BLOCK)``.
    """
    gh, gw = grid
    if not 0.0 < ratio < 1.0:
        raise MaskError(f"blockwise ratio must lie in (0, 1), got {ratio}")
    if gh * gw < MIN_BLOCK:
        raise MaskError(f"grid {gh}x{gw} smaller than the minimum block of {MIN_BLOCK}")
    k = round_half_away(ratio * gh * gw)
    m = np.zeros((gh, gw), dtype=bool)
    log_lo, log_hi = math.log(BLOCK_ASPECT[0]), math.log(BLOCK_ASPECT[1])
    count = 0
    while count < k:
        remaining = k - count
        budget = max(remaining, MIN_BLOCK)
        for _ in range(MAX_ATTEMPTS):
            area = rng.uniform(MIN_BLOCK, budget)
            aspect = math.exp(rng.uniform(log_lo, log_hi))
            h = round_half_away(math.sqrt(area * aspect))
            w = round_half_away(math.sqrt(area / aspect))
            if h * w < MIN_BLOCK or h > gh or w > gw:
                continue
            top = int(rng.integers(0, gh - h + 1))
            left = int(rng.integers(0, gw - w + 1))
            new = h * w - int(m[top:top + h, left:left + w].sum())
            if 0 < new <= budget:
                m[top:top + h, left:left + w] = True
                count += new
                break
        else:
            raise MaskError(f"no admissible block after {MAX_ATTEMPTS} attempts on a {gh}x{gw} grid")
    return MaskGrid(m, patch)


GENERATORS = {
    "random": gen_random_mask,
    "square": gen_square_mask,
    "blockwise": gen_blockwise_mask,
}


def generate(cfg: MaskConfig, image_size: int, rng: np.random.Generator) -> MaskGrid:
    return GENERATORS[cfg.strategy](cfg.grid_for(image_size), cfg.mask_ratio, rng, cfg.masked_patch_size)


# -- AvgDist -------------------------------------------------------------------

def _pixel_mask(mask, image_size=None) -> np.ndarray:
    if isinstance(mask, MaskGrid):
        px = mask.pixels()
        if image_size is not None and px.shape != (image_size, image_size):
            raise MaskError(
                f"mask {mask.shape} x patch {mask.masked_patch_size} does not cover a "
                f"{image_size}x{image_size} image"
            )
        return px
    return np.asarray(mask, dtype=bool)


def _check_defined(px: np.ndarray) -> None:
    if px.all():
        raise MaskError("AvgDist undefined: every pixel is masked")
    if not px.any():
        raise MaskError("AvgDist undefined: no pixel is masked")


def avg_dist(mask, image_size: int | None = None) -> float:
    """Mean Euclidean distance from each masked pixel to the nearest visible one.

    Distances are between pixel centers, in pixels. ``mask`` is a
    :class:`MaskGrid` or a pixel-level boolean array.
    """
    px = _pixel_mask(mask, image_size)
    _check_defined(px)
    dist = ndimage.distance_transform_edt(px)
    return float(dist[px].mean())


def avg_dist_bruteforce(mask, image_size: int | None = None, chunk: int = 2048) -> float:
    """All-pairs reference for :func:`avg_dist`."""
    px = _pixel_mask(mask, image_size)
    _check_defined(px)
    masked = np.argwhere(px).astype(np.float64)
    visible = np.argwhere(~px).astype(np.float64)
    total = 0.0
    for i in range(0, len(masked), chunk):
        a = masked[i:i + chunk]
        d2 = ((a[:, None, :] - visible[None, :, :]) ** 2).sum(-1)
        total += np.sqrt(d2.min(axis=1)).sum()
    return total / len(masked)


# -- sweeps ----------------------------------------------------------------------

SWEEP_HEADER = ("strategy", "patch", "ratio", "avgdist_mean", "avgdist_std")


@dataclass(frozen=True)
class SweepRow:
    strategy: str
    patch: int
    ratio: float
    avgdist_mean: float
    avgdist_std: float


def sweep_cell(strategy: str, patch: int, ratio: float, seeds, image_size: int) -> SweepRow:
    cfg = MaskConfig(strategy, patch, ratio)
    grid = cfg.grid_for(image_size)
    values = []
    for seed in seeds:
        # common random numbers across ratios keep the sweep curves smooth
        rng = np.random.default_rng([int(seed), patch])
        m = GENERATORS[strategy](grid, ratio, rng, patch)
        values.append(avg_dist(m, image_size))
    v = np.asarray(values)
    return SweepRow(strategy, patch, ratio, float(v.mean()), float(v.std()))


def _cell_or_error(args):
    try:
        return sweep_cell(*args)
    except (MaskError, ValueError) as e:
        return e


def mask_sweep(strategies, patch_sizes, ratios, seeds, image_size: int,
               skip_invalid: bool = False, workers: int = 1) -> list[SweepRow]:
    """Mean and std of AvgDist over seeds for every (strategy, patch, ratio) cell.

    With ``skip_invalid`` cells whose masks are undefined for AvgDist (or
    cannot be generated) are dropped with a warning instead of raising.
    ``workers > 1`` evaluates cells in a process pool; row order and values
    do not depend on it.
    """
    seeds = list(seeds)
    cells = [(s, p, r, seeds, image_size) for s in strategies for p in patch_sizes for r in ratios]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_or_error, cells))
    else:
        results = [_cell_or_error(c) for c in cells]
    rows = []
    for cell, res in zip(cells, results):
        if isinstance(res, Exception):
            if not skip_invalid:
                raise res
            warnings.warn(f"skipping cell {cell[0]}/{cell[1]}/{cell[2]}: {res}", stacklevel=2)
            continue
        rows.append(res)
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([r.strategy, r.patch, repr(r.ratio), repr(r.avgdist_mean), repr(r.avgdist_std)])
    return buf.getvalue()


def mask_to_rgb(mask: MaskGrid) -> np.ndarray:
    """Visualization image: masked pixels black, visible white."""
    px = mask.pixels()
    return np.repeat((~px)[None].astype(np.float32), 3, axis=0)


def mask_from_rgb(rgb: np.ndarray, patch: int) -> MaskGrid:
    """Snap a hand-drawn mask (non-black = masked) to the patch grid by majority vote."""
    rgb = np.asarray(rgb)
    _, h, w = rgb.shape
    if h % patch or w % patch:
        raise ValueError(f"mask image {h}x{w} not divisible by patch {patch}")
    marked = rgb.max(axis=0) > 0
    votes = marked.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))
    return MaskGrid(votes > 0.5, patch)
