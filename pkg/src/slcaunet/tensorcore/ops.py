"""Differentiable primitives other than convolution and resampling."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_operands(a, b):
    # python scalars adopt the tensor operand's dtype
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = as_tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = as_tensor(np.asarray(a, dtype=b.dtype))
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {list(a.shape)} and {list(b.shape)}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), back)


def eltwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise sum of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ShapeError(f"eltwise_add shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    return add(a, b)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    out = a.data / b.data

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum propagates NaN, so a diverged input stays visible downstream
    return Tensor._from_op(np.maximum(x.data, x.data.dtype.type(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = x.data > floor
    out = np.maximum(x.data, x.data.dtype.type(floor))
    return Tensor._from_op(out, (x,), lambda g: (g * mask,))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.sum(x.data, axis=axis)
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor._from_op(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    s = sum(x, axis)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return div(s, float(n))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def index(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(np.asarray(x.data[idx]), (x,), back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; input i occupies its own contiguous channel slice."""
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    spatial = xs[0].shape[1:]
    for t in xs[1:]:
        if t.shape[1:] != spatial:
            raise ShapeError(
                f"concat_channels spatial mismatch: {list(spatial)} vs {list(t.shape[1:])}"
            )
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([0] + [t.shape[0] for t in xs])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return Tensor._from_op(np.concatenate([t.data for t in xs], axis=0), tuple(xs), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean of each channel over every spatial position: [K, S...] -> [K]."""
    if x.ndim < 2 or int(np.prod(x.shape[1:])) == 0:
        raise ShapeError(f"global_avg_pool needs a non-empty spatial extent, got {list(x.shape)}")
    axes = tuple(range(1, x.ndim))
    n = int(np.prod(x.shape[1:]))
    out = x.data.sum(axis=axes) / n
    shape = x.shape

    def back(g):
        return (np.broadcast_to((g / n).reshape((-1,) + (1,) * len(axes)), shape).copy(),)

    return Tensor._from_op(out, (x,), back)


def dense(v: Tensor, W: Tensor, B: Tensor, activation: str = "none") -> Tensor:
    """``activation(W.T @ v + B)`` for v of length n, W of shape [n, k]."""
    if v.ndim != 1 or W.ndim != 2 or B.ndim != 1:
        raise ShapeError(f"dense expects v[n], W[n,k], B[k]; got {list(v.shape)}, {list(W.shape)}, {list(B.shape)}")
    if W.shape[0] != v.shape[0] or W.shape[1] != B.shape[0]:
        raise ShapeError(f"dense dimension mismatch: v{list(v.shape)} W{list(W.shape)} B{list(B.shape)}")

    def back(g):
        return W.data @ g, np.outer(v.data, g), g

    out = Tensor._from_op(v.data @ W.data + B.data, (v, W, B), back)
    return _activate(out, activation)


def softmax(v: Tensor, axis: int = 0) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    if v.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    z = v.data - v.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (v,), back)


def _activate(x: Tensor, activation: str) -> Tensor:
    if activation == "none":
        return x
    if activation == "relu":
        return relu(x)
    if activation == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")
