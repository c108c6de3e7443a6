"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient. Without an active tape nothing is
recorded, which is how inference runs.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

MASK_VALUE = -1e9

_ACTIVE: list["Tape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class _Node:
    __slots__ = ("inputs", "out", "fn")

    def __init__(self, inputs, out, fn):
        self.inputs = inputs
        self.out = out
        self.fn = fn


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` of every tracked tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already used for a backward pass; call reset() first")
    tape.consumed = True
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                inp.grad = inp.grad + gi


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE[-1].nodes.append(_Node(tuple(inputs), out, fn))
    return out


def is_recording() -> bool:
    return bool(_ACTIVE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad * bd, (a, b), fn, "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation GELU."""
    xd = x.data
    c = math.sqrt(2.0 / math.pi)
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def fn(g):
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * (c * (1.0 + 3 * 0.044715 * x2))
        return (g * d,)

    return _emit(out, (x,), fn, "gelu")


# -- reductions and shape ----------------------------------------------------

def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        n = x.size
        return _emit(np.asarray(x.data.mean()), (x,),
                     lambda g: (np.broadcast_to(g / n, shape),), "mean")
    ax = axis if axis >= 0 else x.ndim + axis
    n = shape[ax]
    out = x.data.mean(axis=ax, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape),)

    return _emit(out, (x,), fn, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return _emit(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    nd = tensors[0].ndim
    ax = axis if axis >= 0 else nd + axis
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape {t.shape} does not match {ref} off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(out, tensors, fn, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = axis if axis >= 0 else x.ndim + axis
    sizes = [int(s) for s in sizes]
    if sum(sizes) != x.shape[ax] or any(s < 0 for s in sizes):
        raise ShapeError(f"split sizes {sizes} do not sum to extent {x.shape[ax]}")
    outs = []
    start = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[ax] = slice(start, start + s)
        idx = tuple(idx)
        outs.append(_slice(x, idx))
        start += s
    return outs


def _slice(x: Tensor, idx: tuple) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit(np.ascontiguousarray(x.data[idx]), (x,), fn, "slice")


def take_rows(table: Tensor, index) -> Tensor:
    """Gather rows of a 2-D table; output shape is ``index.shape + (D,)``."""
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-D table, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise IndexError(f"row index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape)
        np.add.at(full, index.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(table.data[index], (table,), fn, "take_rows")


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit(ad @ bd, (a, b), fn, "matmul")


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries receive
    the additive value ``MASK_VALUE`` before normalisation.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row is fully masked")
        xd = xd + np.where(mask, 0.0, MASK_VALUE)
    elif xd.shape[-1] and (xd <= MASK_VALUE).all(axis=-1).any():
        raise ValueError("softmax_rows: a row is fully masked")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (x,), fn, "softmax_rows")


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an optional affine map."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a last extent >= 2, got {d}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm affine shape {p.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def fn(g):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dg = (g * xhat).sum(axis=lead) if gain is not None and gain.requires_grad else None
        db = g.sum(axis=lead) if bias is not None and bias.requires_grad else None
        return dx, dg, db

    inputs = (x, gain if gain is not None else Tensor(0.0), bias if bias is not None else Tensor(0.0))
    return _emit(out, inputs, fn, "layer_norm")


def rope_angles(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angle per (token, pair): position * base^(-2k/dim)."""
    if dim % 2:
        raise ShapeError(f"rotary embedding needs an even dimension, got {dim}")
    if base <= 0:
        raise ValueError("rope base must be positive")
    pos = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return pos[:, None] * freqs[None, :]


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate each pair of channels (2k, 2k+1) by position-dependent angles.

    ``x`` is ``[..., T, D]`` and ``positions`` has length ``T``.
    """
    d = x.shape[-1]
    ang = rope_angles(positions, d, base)
    if ang.shape[0] != x.shape[-2]:
        raise ShapeError(f"{ang.shape[0]} positions for {x.shape[-2]} tokens")
    cos, sin = np.cos(ang), np.sin(ang)

    def rotate(arr, s):
        ev, od = arr[..., 0::2], arr[..., 1::2]
        out = np.empty_like(arr)
        out[..., 0::2] = ev * cos - od * s
        out[..., 1::2] = ev * s + od * cos
        return out

    return _emit(rotate(x.data, sin), (x,), lambda g: (rotate(g, -sin),), "rope_apply")
