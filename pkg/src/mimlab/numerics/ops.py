"""Differentiable primitives.

Each primitive is a forward/backward pair registered on the tape module.
The public functions below accept Tensors, arrays or Python scalars.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .tape import ShapeError, Tensor, evaluate, register

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- elementwise binary ------------------------------------------------------

def _binary(name, fwd, dfa, dfb):
    def forward(a, b):
        _check_broadcast(name, a, b)
        return fwd(a, b), None

    def backward(g, ctx, a, b):
        return _unbroadcast(dfa(g, a, b), a.shape), _unbroadcast(dfb(g, a, b), b.shape)

    register(name, forward, backward)


_binary("add", np.add, lambda g, a, b: g, lambda g, a, b: g)
_binary("sub", np.subtract, lambda g, a, b: g, lambda g, a, b: -g)
_binary("mul", np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a)
_binary("div", np.divide, lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))
# ties send the gradient to the first argument
_binary("maximum", np.maximum, lambda g, a, b: g * (a >= b), lambda g, a, b: g * (a < b))
_binary("minimum", np.minimum, lambda g, a, b: g * (a <= b), lambda g, a, b: g * (a > b))


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return a @ b, None


def _matmul_bwd(g, ctx, a, b):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register("matmul", _matmul_fwd, _matmul_bwd)


def _where_fwd(a, b, cond):
    _check_broadcast("where", a, b)
    return np.where(cond, a, b), None


def _where_bwd(g, cond, a, b):
    zero = np.zeros((), dtype=g.dtype)
    return (_unbroadcast(np.where(cond, g, zero), a.shape),
            _unbroadcast(np.where(cond, zero, g), b.shape))


register("where", lambda a, b, cond: (_where_fwd(a, b, cond)[0], cond), _where_bwd)


# -- elementwise unary -------------------------------------------------------

def _unary(name, fwd, dfdx):
    register(name, lambda x: (fwd(x), None), lambda g, ctx, x: (g * dfdx(x),))


_unary("neg", np.negative, lambda x: -np.ones_like(x))
_unary("abs", np.abs, np.sign)


def _exp_fwd(x):
    y = np.exp(x)
    return y, y


register("exp", _exp_fwd, lambda g, y, x: (g * y,))
register("log", lambda x: (np.log(x), None), lambda g, ctx, x: (g / x,))


def _sqrt_fwd(x):
    y = np.sqrt(x)
    return y, y


register("sqrt", _sqrt_fwd, lambda g, y, x: (g * 0.5 / y,))


def _gelu_fwd(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return (x * cdf).astype(x.dtype, copy=False), cdf


def _gelu_bwd(g, cdf, x):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)


register("gelu", _gelu_fwd, _gelu_bwd)


# -- shape -------------------------------------------------------------------

def _reshape_fwd(x, shape):
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None


register("reshape", _reshape_fwd, lambda g, ctx, x: (g.reshape(x.shape),))


def _transpose_fwd(x, axes):
    if axes is not None and sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    return np.transpose(x, axes), axes


def _transpose_bwd(g, axes, x):
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort([a % x.ndim for a in axes])),)


register("transpose", _transpose_fwd, _transpose_bwd)


def _getitem_fwd(x, index):
    try:
        return x[index], None
    except (IndexError, TypeError) as e:
        raise ShapeError(f"getitem: {e} (shape {x.shape})") from None


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _getitem_bwd(g, index, x):
    out = np.zeros(x.shape, dtype=g.dtype)
    if _is_basic(index) or (isinstance(index, np.ndarray) and index.dtype == bool):
        # no repeated positions: plain assignment
        out[index] = g
    else:
        np.add.at(out, index, g)
    return (out,)


register("getitem", lambda x, index: (_getitem_fwd(x, index)[0], index), _getitem_bwd)


def _broadcast_fwd(x, shape):
    try:
        return np.broadcast_to(x, shape).copy(), None
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None


register("broadcast_to", _broadcast_fwd, lambda g, ctx, x: (_unbroadcast(g, x.shape),))


# -- reductions --------------------------------------------------------------

def _sum_fwd(x, axis, keepdims):
    return np.sum(x, axis=axis, keepdims=keepdims), (axis, keepdims)


def _expand_like(g, x, axis, keepdims):
    if not keepdims:
        g = np.expand_dims(g, _norm_axes(axis, x.ndim))
    return np.broadcast_to(g, x.shape)


def _sum_bwd(g, ctx, x):
    axis, keepdims = ctx
    return (np.array(_expand_like(g, x, axis, keepdims)),)


register("sum", _sum_fwd, _sum_bwd)


def _mean_fwd(x, axis, keepdims):
    return np.mean(x, axis=axis, keepdims=keepdims), (axis, keepdims)


def _mean_bwd(g, ctx, x):
    axis, keepdims = ctx
    n = math.prod(x.shape[a] for a in _norm_axes(axis, x.ndim))
    return (_expand_like(g, x, axis, keepdims) / np.asarray(n, dtype=x.dtype),)


register("mean", _mean_fwd, _mean_bwd)


def _max_fwd(x, axis, keepdims):
    out = np.max(x, axis=axis, keepdims=True)
    hit = (x == out)
    count = hit.sum(axis=axis, keepdims=True)
    res = out if keepdims else np.squeeze(out, axis=_norm_axes(axis, x.ndim))
    return res, (hit, count, axis, keepdims)


def _max_bwd(g, ctx, x):
    hit, count, axis, keepdims = ctx
    gx = _expand_like(g, x, axis, keepdims)
    return ((gx * hit / count).astype(x.dtype, copy=False),)


register("max", _max_fwd, _max_bwd)


# -- fused normalisations ----------------------------------------------------

def _softmax_fwd(x, axis):
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    s = z / np.sum(z, axis=axis, keepdims=True)
    return s, (s, axis)


def _softmax_bwd(g, ctx, x):
    s, axis = ctx
    return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)


register("softmax", _softmax_fwd, _softmax_bwd)


def _log_softmax_fwd(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    return out, (out, axis)


def _log_softmax_bwd(g, ctx, x):
    out, axis = ctx
    return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)


register("log_softmax", _log_softmax_fwd, _log_softmax_bwd)


def _layernorm_fwd(x, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    y = xc * inv
    return y, (y, inv)


def _layernorm_bwd(g, ctx, x):
    y, inv = ctx
    gm = np.mean(g, axis=-1, keepdims=True)
    gy = np.mean(g * y, axis=-1, keepdims=True)
    return (inv * (g - gm - y * gy),)


register("layernorm", _layernorm_fwd, _layernorm_bwd)


# -- public API --------------------------------------------------------------

def add(a, b) -> Tensor:
    return evaluate("add", a, b)


def sub(a, b) -> Tensor:
    return evaluate("sub", a, b)


def mul(a, b) -> Tensor:
    return evaluate("mul", a, b)


def div(a, b) -> Tensor:
    return evaluate("div", a, b)


def maximum(a, b) -> Tensor:
    return evaluate("maximum", a, b)


def minimum(a, b) -> Tensor:
    return evaluate("minimum", a, b)


def matmul(a, b) -> Tensor:
    return evaluate("matmul", a, b)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    return evaluate("where", a, b, cond=np.asarray(cond, dtype=bool))


def neg(x) -> Tensor:
    return evaluate("neg", x)


def abs(x) -> Tensor:
    return evaluate("abs", x)


def exp(x) -> Tensor:
    return evaluate("exp", x)


def log(x) -> Tensor:
    return evaluate("log", x)


def sqrt(x) -> Tensor:
    return evaluate("sqrt", x)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    return evaluate("gelu", x)


def reshape(x, shape) -> Tensor:
    return evaluate("reshape", x, shape=tuple(shape))


def transpose(x, axes=None) -> Tensor:
    return evaluate("transpose", x, axes=None if axes is None else tuple(axes))


def swapaxes(x, a1, a2) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x, index) -> Tensor:
    """Basic slicing or gather with integer/boolean index arrays."""
    return evaluate("getitem", x, index=index)


def broadcast_to(x, shape) -> Tensor:
    return evaluate("broadcast_to", x, shape=tuple(shape))


def sum(x, axis=None, keepdims=False) -> Tensor:
    return evaluate("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False) -> Tensor:
    return evaluate("mean", x, axis=axis, keepdims=keepdims)


def max(x, axis=None, keepdims=False) -> Tensor:
    return evaluate("max", x, axis=axis, keepdims=keepdims)


def softmax(x, axis=-1) -> Tensor:
    return evaluate("softmax", x, axis=axis)


def log_softmax(x, axis=-1) -> Tensor:
    return evaluate("log_softmax", x, axis=axis)


def layernorm(x, eps=1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    return evaluate("layernorm", x, eps=eps)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    y = matmul(x, transpose(weight, (1, 0)))
    return y if bias is None else add(y, bias)


PRIMITIVE_NAMES = (
    "add", "sub", "mul", "div", "maximum", "minimum", "matmul", "where",
    "neg", "abs", "exp", "log", "sqrt", "gelu", "reshape", "transpose",
    "getitem", "broadcast_to", "sum", "mean", "max", "softmax", "log_softmax",
    "layernorm",
)
