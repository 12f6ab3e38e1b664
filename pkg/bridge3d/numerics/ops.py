"""Differentiable primitives over ``Tensor``.

Every primitive computes its forward value with numpy and, when recording,
stores a closure mapping the output gradient to one gradient per input.
Elementwise primitives broadcast like numpy; gradients are summed back down to
each input's shape.
"""
from __future__ import annotations

import math
import typing as t

import numpy as np

from ..errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, record

LN_EPS = 1e-5

TensorLike = t.Union[Tensor, float, int, np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a: TensorLike, b: TensorLike) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return record("add", (a, b), a.data + b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return record("sub", (a, b), a.data - b.data,
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return record("mul", (a, b), a.data * b.data,
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", (x,), x.data * c, lambda g: (g * c,))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from exc

    def back(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", (a, b), out, back)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return record("swapaxes", (x,), np.swapaxes(x.data, a1, a2),
                  lambda g: (np.swapaxes(g, a1, a2),))


def transpose(x: Tensor) -> Tensor:
    return swapaxes(x, -1, -2)


def reshape(x: Tensor, shape: t.Sequence[int]) -> Tensor:
    src = x.shape
    return record("reshape", (x,), x.data.reshape(tuple(shape)), lambda g: (g.reshape(src),))


def concat(xs: t.Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty sequence")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g: np.ndarray):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(xs), out, back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index: list[t.Any] = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)

    def back(g: np.ndarray):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return record("slice", (x,), x.data[key], back)


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def back(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record("sum", (x,), np.sum(x.data, axis=axis, keepdims=keepdims), back)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def square(x: Tensor) -> Tensor:
    return record("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return record("silu", (x,), out, lambda g: (g * (sig + out * (1.0 - sig)),))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    if not np.isfinite(y).all():
        raise NumericError("softmax_rows: non-finite input row")

    def back(g: np.ndarray):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return record("softmax", (x,), y, back)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (denominator C)."""
    c = x.shape[-1]
    if c < 2:
        raise DimensionError(f"layer_norm needs at least 2 channels, got {c}")
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"layer_norm {name} shape {p.shape} != ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(x.ndim - 1))

    def back(g: np.ndarray):
        dxhat = g * gain.data if gain is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        grads: list[np.ndarray | None] = [dx]
        if gain is not None:
            grads.append(np.sum(g * xhat, axis=lead))
        if bias is not None:
            grads.append(np.sum(g, axis=lead))
        return grads

    inputs = tuple(p for p in (x, gain, bias) if p is not None)
    return record("layer_norm", inputs, out, back)


def sdp_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes (leading axes are batch)."""
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("sdp_attention: head dimension is 0")
    if k.shape[-1] != d:
        raise DimensionError(f"sdp_attention: query dim {d} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"sdp_attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(d))
    return matmul(softmax_rows(scores), v)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def back(g: np.ndarray):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return record("embedding", (table,), table.data[ids], back)


def mse(pred: Tensor, target: TensorLike) -> Tensor:
    """Mean over all elements of (pred - target)²."""
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    return mean(square(sub(pred, target)))
