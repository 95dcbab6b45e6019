"""Conversion between images and per-patch token vectors.

Patches are ordered row-major over the grid; inside a token the values are
flattened channel-major, so a 32x32 RGB patch is a 3072-vector laid out as
``(3, 32, 32)``.
"""
from __future__ import annotations

import numpy as np


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``(..., 3, R, R) -> (..., N, 3*patch*patch)``."""
    img = np.asarray(img)
    *lead, c, h, w = img.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = img.reshape(*lead, c, gh, patch, gw, patch)
    nl = len(lead)
    axes = list(range(nl)) + [nl + 1, nl + 3, nl, nl + 2, nl + 4]
    return x.transpose(axes).reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(tokens: np.ndarray, patch: int, channels: int = 3) -> np.ndarray:
    """Exact inverse of :func:`patchify` for square grids."""
    tokens = np.asarray(tokens)
    *lead, n, d = tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n or d != channels * patch * patch:
        raise ValueError(f"cannot unpatchify {n} tokens of dim {d} with patch {patch}")
    x = tokens.reshape(*lead, g, g, channels, patch, patch)
    nl = len(lead)
    axes = list(range(nl)) + [nl + 2, nl, nl + 3, nl + 1, nl + 4]
    return x.transpose(axes).reshape(*lead, channels, g * patch, g * patch)
