"""Tensors and a reverse-mode tape.

A :class:`Tape` records every primitive evaluated on tensors it owns; calling
:meth:`Tape.backward` on a scalar walks the records in reverse and
accumulates gradients. Primitives are registered in :data:`PRIMITIVES` by
:mod:`mimlab.numerics.ops`.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

_ids = itertools.count()

_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE[0] = dtype


@contextmanager
def float64_mode():
    """Switch newly created tensors to float64 (gradient-check mode)."""
    prev = _DTYPE[0]
    _DTYPE[0] = np.float64
    try:
        yield
    finally:
        _DTYPE[0] = prev


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    # (grad_out, ctx, *input_arrays) -> tuple of input gradients (None = no grad)
    backward: Callable[..., tuple]


PRIMITIVES: dict[str, Primitive] = {}


def register(name, forward, backward):
    PRIMITIVES[name] = Primitive(name, forward, backward)


class Tensor:
    """An immutable n-d array, optionally owned by a tape."""

    __slots__ = ("data", "tape", "id")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, id={self.id})"

    def __len__(self):
        return self.shape[0]

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


@dataclass
class Record:
    prim: Primitive
    inputs: tuple[Tensor, ...]
    out_id: int
    out_shape: tuple[int, ...]
    ctx: Any


@dataclass
class Tape:
    """Single-writer, append-only log of primitive evaluations."""

    records: list[Record] = field(default_factory=list)

    def leaf(self, data, dtype=None) -> Tensor:
        return Tensor(data, tape=self, dtype=dtype)

    def eval(self, name: str, *inputs: Tensor, **attrs) -> Tensor:
        prim = PRIMITIVES[name]
        arrays = [t.data for t in inputs]
        out, ctx = prim.forward(*arrays, **attrs)
        result = Tensor(out, tape=self, dtype=out.dtype)
        self.records.append(Record(prim, inputs, result.id, result.shape, ctx))
        return result

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by tensor id."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            # keep the output gradient around so callers can inspect it
            grads[rec.out_id] = g
            in_grads = rec.prim.backward(g, rec.ctx, *[t.data for t in rec.inputs])
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or t.tape is not self:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(
                        f"{rec.prim.name}: gradient shape {gi.shape} != input shape {t.shape}"
                    )
                prev = grads.get(t.id)
                grads[t.id] = gi.astype(t.dtype, copy=False) if prev is None else prev + gi
        return grads

    def grad(self, loss: Tensor, wrt) -> list[np.ndarray]:
        """Gradients of ``loss`` for each tensor in ``wrt``; zeros when unreachable."""
        grads = self.backward(loss)
        out = []
        for t in wrt:
            g = grads.get(t.id)
            out.append(np.zeros(t.shape, dtype=t.dtype) if g is None else g)
        return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def evaluate(name: str, *inputs, **attrs) -> Tensor:
    """Evaluate a primitive on the tape shared by its inputs.

    Inputs without a tape act as constants. When no input has a tape the
    forward value is computed and nothing is recorded.
    """
    tensors = []
    tape = None
    ref = next((x.dtype for x in inputs if isinstance(x, Tensor)), None)
    for x in inputs:
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=ref)
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError(f"{name}: inputs belong to different tapes")
            tape = x.tape
        tensors.append(x)
    if tape is not None:
        return tape.eval(name, *tensors, **attrs)
    out, _ = PRIMITIVES[name].forward(*[t.data for t in tensors], **attrs)
    return Tensor(out, dtype=out.dtype)
