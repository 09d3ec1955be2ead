"""Strided, dilated convolution and separable resampling (rank 2 or 3)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .ops import _activate
from .tensor import ShapeError, Tensor, is_grad_enabled


@dataclass
class ConvParams:
    """Kernels ``[K, C_in, m, ...]``, bias ``[K]`` and the sampling geometry."""

    kernels: Tensor
    bias: Tensor
    stride: int = 1
    dilation: int = 1
    padding: str = "SAME"

    def __post_init__(self):
        k = self.kernels.shape
        if len(k) not in (4, 5):
            raise ShapeError(f"kernels must be [K, C_in, m, m(, m)], got {list(k)}")
        m = k[2]
        if any(e != m for e in k[2:]):
            raise ShapeError(f"kernels must be cubic/square, got {list(k)}")
        if m % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {m}")
        if k[0] < 1:
            raise ValueError("need at least one kernel")
        if self.bias.shape != (k[0],):
            raise ShapeError(f"bias shape {list(self.bias.shape)} does not match K={k[0]}")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be >= 1")
        if self.padding not in ("SAME", "VALID"):
            raise ValueError(f"padding must be SAME or VALID, got {self.padding!r}")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def size(self) -> int:
        return self.kernels.shape[2]

    @property
    def rank(self) -> int:
        return self.kernels.ndim - 2

    def parameters(self) -> list[Tensor]:
        return [self.kernels, self.bias]

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, size: int = 3, rank: int = 3,
             stride: int = 1, dilation: int = 1, padding: str = "SAME", dtype=np.float64) -> "ConvParams":
        """Glorot-uniform kernels, zero bias."""
        taps = size ** rank
        limit = np.sqrt(6.0 / (c_in * taps + c_out * taps))
        w = rng.uniform(-limit, limit, size=(c_out, c_in) + (size,) * rank).astype(dtype)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True),
                   stride, dilation, padding)


def same_margin(size: int, dilation: int) -> int:
    return ((size - 1) * dilation) // 2


def conv_output_shape(spatial: Sequence[int], size: int, stride: int, dilation: int, padding: str) -> tuple:
    extent = (size - 1) * dilation + 1
    pad = same_margin(size, dilation) if padding == "SAME" else 0
    out = tuple((n + 2 * pad - extent) // stride + 1 for n in spatial)
    if any(o < 1 for o in out):
        raise ShapeError(f"input spatial shape {list(spatial)} too small for effective kernel extent {extent}")
    return out


def _windows(xp: np.ndarray, size: int, stride: int, dilation: int, out: tuple) -> np.ndarray:
    """View [o.., m.., C] of a channels-last padded input; copying it yields the column matrix."""
    rank = xp.ndim - 1
    st = xp.strides
    shape = out + (size,) * rank + (xp.shape[-1],)
    strides = tuple(s * stride for s in st[:-1]) + tuple(s * dilation for s in st[:-1]) + (st[-1],)
    return as_strided(xp, shape=shape, strides=strides, writeable=False)


def conv(x: Tensor, p: ConvParams, activation: str = "none") -> Tensor:
    """``activation(w_j * x + b_j)`` for every kernel j, with stride and dilation.

    ``x`` is ``[C_in, S...]``; the result is ``[K, S'...]`` where ``S' = ceil(S/s)``
    under SAME padding and ``floor((S - (m-1)r - 1)/s) + 1`` under VALID.
    """
    rank = x.ndim - 1
    if rank != p.rank:
        raise ShapeError(f"input {list(x.shape)} has spatial rank {rank}, kernels {list(p.kernels.shape)} need {p.rank}")
    if x.shape[0] != p.in_channels:
        raise ShapeError(f"input {list(x.shape)} has {x.shape[0]} channels, kernels {list(p.kernels.shape)} expect {p.in_channels}")
    m, s, r = p.size, p.stride, p.dilation
    spatial = x.shape[1:]
    out_sp = conv_output_shape(spatial, m, s, r, p.padding)
    pad = same_margin(m, r) if p.padding == "SAME" else 0
    K, C = p.out_channels, p.in_channels
    n_out = int(np.prod(out_sp))
    taps = m ** rank
    # kernels reordered to [K, m.., C] to match the column layout
    w2 = np.ascontiguousarray(np.moveaxis(p.kernels.data, 1, -1)).reshape(K, taps * C)

    # columns are [N, taps*C] with channels fastest; BLAS prefers the long axis first
    xl = np.moveaxis(x.data, 0, -1)
    if m == 1 and s == 1:
        cols = np.ascontiguousarray(xl).reshape(n_out, C)
        direct = True
    else:
        xp = np.zeros(tuple(n + 2 * pad for n in spatial) + (C,), dtype=x.dtype)
        xp[tuple(slice(pad, pad + n) for n in spatial)] = xl
        direct = False
        cols = np.ascontiguousarray(_windows(xp, m, s, r, out_sp)).reshape(n_out, taps * C)
    y = cols @ w2.T
    y += p.bias.data
    y = np.ascontiguousarray(y.T).reshape((K,) + out_sp)

    keep = is_grad_enabled() and (x.requires_grad or p.kernels.requires_grad or p.bias.requires_grad)
    if not keep:
        cols = None

    def back(g):
        g2 = g.reshape(K, n_out)
        gw = gb = gx = None
        if p.kernels.requires_grad:
            gw = (g2 @ cols).reshape((K,) + (m,) * rank + (C,))
            gw = np.ascontiguousarray(np.moveaxis(gw, -1, 1))
        if p.bias.requires_grad:
            gb = g2.sum(axis=1)
        if x.requires_grad:
            if direct:
                gx = (w2.T @ g2).reshape(x.shape)
            else:
                gx = _conv_input_grad(g, p.kernels.data, s, r, out_sp, pad, spatial)
        return gx, gw, gb

    out = Tensor._from_op(y, (x, p.kernels, p.bias), back)
    return _activate(out, activation)


def _conv_input_grad(g, kernels, s, r, out_sp, pad, spatial):
    """Input gradient as a stride-1 correlation of the zero-stuffed output gradient
    with the flipped kernels; faster than scattering the column gradient back."""
    K, C, m = kernels.shape[0], kernels.shape[1], kernels.shape[2]
    rank = len(out_sp)
    halo = (m - 1) * r
    reach = tuple(s * (n - 1) + 1 for n in out_sp)
    gz = np.zeros(tuple(n + 2 * halo for n in reach) + (K,), dtype=g.dtype)
    gz[tuple(slice(halo, halo + n, s) for n in reach)] = np.moveaxis(g, 0, -1)
    full = tuple(n + halo for n in reach)
    flipped = np.flip(kernels, axis=tuple(range(2, 2 + rank)))
    wf = np.ascontiguousarray(np.moveaxis(flipped, 0, -1)).reshape(C, m ** rank * K)
    cols = np.ascontiguousarray(_windows(gz, m, 1, r, full)).reshape(-1, m ** rank * K)
    gfull = (cols @ wf.T).reshape(full + (C,))
    # positions of the padded input never reached by a window keep a zero gradient
    lo = tuple(slice(pad, min(pad + n, f)) for n, f in zip(spatial, full))
    gx = np.zeros((C,) + tuple(spatial), dtype=g.dtype)
    gx[(slice(None),) + tuple(slice(0, sl.stop - sl.start) for sl in lo)] = np.moveaxis(gfull[lo], -1, 0)
    return gx


def _axis_matrix(n_in: int, n_out: int, mode: str, dtype) -> np.ndarray:
    A = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    if mode == "nearest":
        A[rows, (rows * n_in) // n_out] = 1
        return A
    # half-pixel centres, clamped at the borders
    src = (rows + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    np.add.at(A, (rows, i0), 1 - w)
    np.add.at(A, (rows, i1), w)
    return A


def _apply_axis(d: np.ndarray, A: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(A, d, axes=([1], [axis])), 0, axis)


def resample(x: Tensor, target: Sequence[int], mode: str = "nearest") -> Tensor:
    """Channel-wise nearest or (tri)linear interpolation to ``target`` spatial shape.

    Linear mode uses half-pixel sample centres, so exact 2x downsampling is a
    2x2(x2) box average.  Identity when ``target`` equals the input shape.
    """
    if mode not in ("nearest", "trilinear", "linear"):
        raise ValueError(f"unknown resample mode {mode!r}")
    target = tuple(int(t) for t in target)
    src = x.shape[1:]
    if len(target) != len(src):
        raise ShapeError(f"target rank {len(target)} does not match input spatial rank {len(src)}")
    if any(t < 1 for t in target):
        raise ShapeError(f"target extents must be >= 1, got {list(target)}")
    if target == src:
        return x
    kind = "nearest" if mode == "nearest" else "linear"
    mats = {ax: _axis_matrix(n, t, kind, x.dtype) for ax, (n, t) in enumerate(zip(src, target), start=1) if n != t}

    d = x.data
    for ax, A in mats.items():
        if kind == "nearest":
            d = np.take(d, A.argmax(axis=1), axis=ax)
        else:
            d = _apply_axis(d, A, ax)

    def back(g):
        for ax, A in mats.items():
            g = _apply_axis(g, A.T, ax)
        return (g,)

    return Tensor._from_op(np.ascontiguousarray(d), (x,), back)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float64) -> tuple[Tensor, Tensor]:
    """Glorot-uniform weight ``[n_in, n_out]`` and zero bias."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    W = Tensor(rng.uniform(-limit, limit, size=(n_in, n_out)).astype(dtype), requires_grad=True)
    B = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
    return W, B


def shape_after(spatial: Sequence[int], strides: Optional[Sequence[int]]) -> tuple:
    out = tuple(spatial)
    for s in strides or ():
        out = tuple(-(-n // s) for n in out)
    return out
