"""Differentiable primitives.

Each function takes :class:`Tensor` (or array-like) inputs, computes the
forward value with numpy and registers a vector-Jacobian product on the
active :class:`Tape`. Image tensors are NCHW.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, record


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return record(a.data + b.data, "add", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return record(a.data - b.data, "sub", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return record(a.data * b.data, "mul", (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return record(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return record(a.data @ b.data, "matmul", (a, b),
                  lambda g: (g @ b.data.T, a.data.T @ g))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,),
                  lambda g: (g * mask,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero wherever a bound is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data > lo
    if hi is not None:
        mask &= x.data < hi
    return record(out.astype(x.dtype), "clamp", (x,), lambda g: (g * mask,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from None
    return record(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return record(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inverse),))


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return record(np.array(x.data.sum(), dtype=x.dtype), "sum", (x,),
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return record(np.array(x.data.mean(), dtype=x.dtype), "mean", (x,),
                  lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),))


def abs_sum(x) -> Tensor:
    """L1 norm, ``sum(|x|)``; subgradient 0 at 0."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return record(np.array(np.abs(x.data).sum(), dtype=x.dtype), "abs_sum", (x,),
                  lambda g: (g * sign,))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.array(np.mean(diff * diff), dtype=diff.dtype)

    def vjp(g):
        ga = g * (2.0 / n) * diff
        return ga, -ga

    return record(out, "mse", (a, b), vjp)


def tile2d(x, height: int, width: int) -> Tensor:
    """Repeat the last two axes periodically and crop to ``height x width``."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    reps_h, reps_w = -(-height // h), -(-width // w)
    lead = (1,) * (x.data.ndim - 2)
    full = np.tile(x.data, lead + (reps_h, reps_w))
    out = full[..., :height, :width]

    def vjp(g):
        padded = np.zeros(full.shape, dtype=g.dtype)
        padded[..., :height, :width] = g
        folded = padded.reshape(x.shape[:-2] + (reps_h, h, reps_w, w))
        return (folded.sum(axis=(-4, -2)),)

    return record(np.ascontiguousarray(out), "tile2d", (x,), vjp)


def conv2d(x, w, stride: int = 1) -> Tensor:
    """Valid cross-correlation of NCHW ``x`` with OIHW ``w``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if h < kh or wd < kw:
        raise ValueError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    s = int(stride)
    ho, wo = (h - kh) // s + 1, (wd - kw) // s + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # rows: (n, ho, wo); cols: (c, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gx = np.zeros(x.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, :, i, j]
        return gx, gw

    return record(np.ascontiguousarray(out), "conv2d", (x, w), vjp)


def avgpool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` mean pooling; trailing rows/cols are dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ValueError(f"avgpool2d: input {x.shape} smaller than window {k}")
    out = x.data[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        spread = np.repeat(np.repeat(g / (k * k), k, axis=2), k, axis=3)
        gx[:, :, :ho * k, :wo * k] = spread
        return (gx,)

    return record(out.astype(x.dtype), "avgpool2d", (x,), vjp)


def global_avgpool(x) -> Tensor:
    """NCHW -> NC mean over the spatial axes."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avgpool: expected NCHW input, got shape {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return record(out.astype(x.dtype), "global_avgpool", (x,),
                  lambda g: (np.broadcast_to((g / hw)[:, :, None, None], x.shape).astype(g.dtype),))
