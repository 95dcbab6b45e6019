"""A small ViT-style encoder with a learnable mask token, plus prediction heads."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .imaging import Image
from .masking import MaskGrid
from .numerics import ops
from .numerics.tape import NonFiniteError, Tape, Tensor
from .patches import patchify, unpatchify

HEAD_KINDS = ("linear", "mlp2")
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    input_resolution: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.input_resolution % self.patch_size:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid ** 2

    @property
    def token_dim(self) -> int:
        return 3 * self.patch_size ** 2


@dataclass(frozen=True)
class HeadConfig:
    kind: str = "linear"
    output_dim: int = 192

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.kind!r}")


def _trunc_normal(rng, shape, std=INIT_STD):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, hd = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    p = {
        "patch_embed.weight": _trunc_normal(rng, (d, cfg.token_dim)),
        "patch_embed.bias": np.zeros(d),
        "mask_token": rng.normal(0.0, INIT_STD, size=d),
        "pos_embed": rng.normal(0.0, INIT_STD, size=(cfg.num_tokens, d)),
    }
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "norm1.weight"] = np.ones(d)
        p[b + "norm1.bias"] = np.zeros(d)
        p[b + "attn.qkv.weight"] = _trunc_normal(rng, (3 * d, d))
        p[b + "attn.qkv.bias"] = np.zeros(3 * d)
        p[b + "attn.proj.weight"] = _trunc_normal(rng, (d, d))
        p[b + "attn.proj.bias"] = np.zeros(d)
        p[b + "norm2.weight"] = np.ones(d)
        p[b + "norm2.bias"] = np.zeros(d)
        p[b + "mlp.fc1.weight"] = _trunc_normal(rng, (hd, d))
        p[b + "mlp.fc1.bias"] = np.zeros(hd)
        p[b + "mlp.fc2.weight"] = _trunc_normal(rng, (d, hd))
        p[b + "mlp.fc2.bias"] = np.zeros(d)
    p["norm.weight"] = np.ones(d)
    p["norm.bias"] = np.zeros(d)
    return {k: v.astype(np.float32) for k, v in p.items()}


def init_head(head: HeadConfig, embed_dim: int, rng: np.random.Generator,
              prefix: str = "head") -> dict[str, np.ndarray]:
    d, out = embed_dim, head.output_dim
    if head.kind == "linear":
        p = {f"{prefix}.weight": _trunc_normal(rng, (out, d)), f"{prefix}.bias": np.zeros(out)}
    else:
        p = {
            f"{prefix}.fc1.weight": _trunc_normal(rng, (d, d)),
            f"{prefix}.fc1.bias": np.zeros(d),
            f"{prefix}.fc2.weight": _trunc_normal(rng, (out, d)),
            f"{prefix}.fc2.bias": np.zeros(out),
        }
    return {k: v.astype(np.float32) for k, v in p.items()}


def encoder_param_count(cfg: EncoderConfig) -> int:
    d, hd, n = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, cfg.num_tokens
    per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (hd * d + hd) + (d * hd + d)
    return d * cfg.token_dim + d + d + n * d + cfg.depth * per_block + 2 * d


def head_param_count(head: HeadConfig, embed_dim: int) -> int:
    d, out = embed_dim, head.output_dim
    if head.kind == "linear":
        return d * out + out
    return d * d + d + d * out + out


def layer_id(name: str, depth: int) -> int:
    """0 for the embedding, i+1 for block i, depth+1 for everything above."""
    if name.startswith(("patch_embed.", "mask_token", "pos_embed")):
        return 0
    if name.startswith("blocks."):
        return int(name.split(".")[1]) + 1
    return depth + 1


# -- forward -----------------------------------------------------------------

def _as_mask(mask, shape) -> np.ndarray:
    b, n = shape
    if mask is None:
        return np.zeros((b, n), dtype=bool)
    if isinstance(mask, MaskGrid):
        mask = [mask]
    if isinstance(mask, (list, tuple)) and mask and isinstance(mask[0], MaskGrid):
        mask = np.stack([m.grid.reshape(-1) for m in mask])
    mask = np.asarray(mask, dtype=bool)
    if mask.size != b * n:
        raise ValueError(f"mask with {mask.size} entries does not match token grid {b}x{n}")
    return mask.reshape(b, n)


def embed_and_mask(tokens, mask, params) -> Tensor:
    """Patch embedding with masked tokens replaced by the mask token, then positions.

    ``tokens``: ``(B, N, 3p^2)``; ``mask``: ``(B, N)`` booleans or MaskGrids.
    """
    x = ops.linear(tokens, params["patch_embed.weight"], params["patch_embed.bias"])
    m = _as_mask(mask, x.shape[:2])
    if m.any():
        mt = ops.broadcast_to(params["mask_token"], x.shape)
        x = ops.where(m[:, :, None], mt, x)
    return x + params["pos_embed"]


def _affine_norm(x, params, prefix):
    return ops.layernorm(x) * params[prefix + ".weight"] + params[prefix + ".bias"]


def _attention(x, params, prefix, num_heads):
    b, n, d = x.shape
    dh = d // num_heads
    qkv = ops.linear(x, params[prefix + ".qkv.weight"], params[prefix + ".qkv.bias"])
    qkv = ops.transpose(ops.reshape(qkv, (b, n, 3, num_heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ops.softmax(ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
    out = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (b, n, d))
    return ops.linear(out, params[prefix + ".proj.weight"], params[prefix + ".proj.bias"])


def _mlp(x, params, prefix):
    h = ops.gelu(ops.linear(x, params[prefix + ".fc1.weight"], params[prefix + ".fc1.bias"]))
    return ops.linear(h, params[prefix + ".fc2.weight"], params[prefix + ".fc2.bias"])


def _drop_path(branch, rate, rng):
    if not rate:
        return branch
    keep = (rng.random((branch.shape[0], 1, 1)) >= rate).astype(branch.dtype)
    return branch * (keep / (1.0 - rate))


def encoder_forward(x, params, cfg: EncoderConfig, *, drop_path: float = 0.0,
                    rng: np.random.Generator | None = None, hidden: list | None = None) -> Tensor:
    """Pre-norm transformer blocks followed by a final layer norm.

    If ``hidden`` is a list, the input and each block's output are appended
    to it (before the final norm).
    """
    if drop_path and rng is None:
        raise ValueError("drop_path needs an rng")
    if hidden is not None:
        hidden.append(x)
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        x = x + _drop_path(_attention(_affine_norm(x, params, b + ".norm1"), params, b + ".attn",
                                      cfg.num_heads), drop_path, rng)
        x = x + _drop_path(_mlp(_affine_norm(x, params, b + ".norm2"), params, b + ".mlp"),
                           drop_path, rng)
        if not np.all(np.isfinite(x.data)):
            raise NonFiniteError(f"non-finite activation in block {i}")
        if hidden is not None:
            hidden.append(x)
    return _affine_norm(x, params, "norm")


def head_forward(features, params, head: HeadConfig, prefix: str = "head") -> Tensor:
    if head.kind == "linear":
        return ops.linear(features, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
    h = ops.gelu(ops.linear(features, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return ops.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


@dataclass
class EncoderState:
    """Encoder + head configuration and parameters (float32 numpy arrays)."""

    config: EncoderConfig
    head: HeadConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, config: EncoderConfig, head: HeadConfig, rng: np.random.Generator) -> "EncoderState":
        params = init_encoder(config, rng)
        params.update(init_head(head, config.embed_dim, rng))
        return cls(config, head, params)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def leaves(self, tape: Tape, names=None) -> dict[str, Tensor]:
        names = self.params if names is None else names
        return {k: tape.leaf(self.params[k], dtype=self.params[k].dtype) for k in names}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v, dtype=v.dtype) for k, v in self.params.items()}

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha1()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def forward(self, images_normalized, mask, params=None, **kw):
        """Images ``(B, 3, R, R)`` -> (features, per-token predictions)."""
        params = self.constants() if params is None else params
        tokens = patchify(images_normalized, self.config.patch_size)
        emb = embed_and_mask(tokens, mask, params)
        feats = encoder_forward(emb, params, self.config, **kw)
        return feats, head_forward(feats, params, self.head)


def reconstruct_image(predictions, mask: MaskGrid, original: Image, target_kind: str = "l1") -> Image:
    """Composite of predicted pixels under masked tokens and original pixels elsewhere.

    ``predictions`` is ``(N, 3*t*t)``; lower-resolution predictions are
    upsampled by pixel replication.
    """
    if target_kind not in ("l1", "l2", "smooth_l1"):
        raise ValueError(
            f"cannot reconstruct from {target_kind!r} predictions; decode classes to colors first"
        )
    preds = np.asarray(predictions, dtype=np.float64)
    n, width = preds.shape
    t = int(round(math.sqrt(width / 3)))
    pred_img = unpatchify(preds, t)
    res = original.width
    if pred_img.shape[-1] != res:
        f = res // pred_img.shape[-1]
        pred_img = np.repeat(np.repeat(pred_img, f, axis=1), f, axis=2)
    g = int(round(math.sqrt(n)))
    px = np.kron(np.asarray(mask.grid, dtype=bool).reshape(g, g),
                 np.ones((res // g, res // g), dtype=bool))
    out = np.where(px[None], np.clip(pred_img, 0.0, 1.0), original.rgb)
    return Image(out)
