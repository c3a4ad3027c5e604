"""Differentiable operator family. Every function takes/returns :class:`Tensor`."""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, emit

BCE_EPS = 1e-7


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, kind: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "add")
    return emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "sub")
    return emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a)
    _broadcast_shape(a, b, "mul")
    return emit(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return emit("scale", (a,), a.data * s, lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading axes: (..., m, k) @ (..., k, n)."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return emit("matmul", (a, b), out, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    # gradient at exactly 0 is 0
    return emit("relu", (x,), np.maximum(x.data, 0), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    with np.errstate(over="ignore"):
        y = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z))).astype(z.dtype)
    return emit("sigmoid", (x,), y, lambda g: (g * y * (1 - y),))


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis of ``x + mask``; use -inf in ``mask`` to exclude entries."""
    z = x.data if mask is None else x.data + mask
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return emit("softmax", (x,), y, backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part; compose with mul/add)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return emit("layer_norm", (x,), y, backward)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    nd = xs[0].data.ndim
    ax = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or any(t.shape[i] != xs[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return emit("concat", xs, out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    return emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return emit("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    return emit("broadcast_to", (x,), np.broadcast_to(x.data, shape).copy(), lambda g: (_unbroadcast(g, x.shape),))


def take_last(x: Tensor, axis: int) -> Tensor:
    """x[..., -1, ...] along ``axis`` (axis removed)."""
    ax = axis % x.data.ndim
    out = np.take(x.data, -1, axis=ax)

    def backward(g):
        full = np.zeros_like(x.data)
        idx = [slice(None)] * x.data.ndim
        idx[ax] = -1
        full[tuple(idx)] = g
        return (full,)

    return emit("take_last", (x,), out, backward)


def take_rows(x: Tensor, idx) -> Tensor:
    """x[idx] along the first axis; repeated indices accumulate their gradients."""
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return emit("take_rows", (x,), x.data[idx], backward)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop]."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice_last: [{start}:{stop}] outside last axis of shape {x.shape}")

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return emit("slice_last", (x,), x.data[..., start:stop], backward)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return emit("sum", (x,), np.asarray(out), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis, keepdims), 1.0 / float(n))


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Max over ``axis``; the gradient flows only to the saved argmax (first on ties)."""
    ax = axis % x.data.ndim
    arg = np.argmax(x.data, axis=ax)
    out = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return emit("max_reduce", (x,), out, backward)


# ---------------------------------------------------------------------------
# encodings and losses


def sinusoidal_table(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    rate = np.power(10000.0, -(2 * (i // 2)) / dim)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang)).astype(dtype)


def positional_encoding(positions, dim: int, dtype=np.float64) -> Tensor:
    """Non-learnable sinusoidal encoding of integer positions (constant tensor)."""
    p = np.asarray(positions, dtype=np.int64)
    if np.any(p < 0):
        raise ValueError("positions must be non-negative")
    table = sinusoidal_table(int(p.max(initial=0)) + 1, dim, dtype)
    return Tensor(table[p])


def _masked_mean_weights(shape, mask, dtype):
    w = np.ones(shape, dtype=dtype) if mask is None else np.broadcast_to(np.asarray(mask, dtype=dtype), shape)
    n = float(w.sum())
    if n <= 0:
        raise ValueError("loss has no contributing elements")
    return w, n


def binary_cross_entropy(p: Tensor, target, mask=None, eps: float = BCE_EPS) -> Tensor:
    """Mean BCE over masked elements; probabilities clamped to [eps, 1 - eps].

    The gradient is evaluated at the clamped probability and passed straight through.
    """
    y = np.asarray(target, dtype=p.data.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"bce: prediction {p.shape} vs target {y.shape}")
    w, n = _masked_mean_weights(p.shape, mask, p.data.dtype)
    pc = np.clip(p.data, eps, 1 - eps)
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    out = np.asarray((w * loss).sum() / n, dtype=p.data.dtype)

    def backward(g):
        return (g * w * (pc - y) / (pc * (1 - pc)) / n,)

    return emit("bce", (p,), out, backward)


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    y = np.asarray(target, dtype=pred.data.dtype)
    if y.shape != pred.shape:
        raise ShapeError(f"l1: prediction {pred.shape} vs target {y.shape}")
    w, n = _masked_mean_weights(pred.shape, mask, pred.data.dtype)
    d = pred.data - y
    out = np.asarray((w * np.abs(d)).sum() / n, dtype=pred.data.dtype)
    return emit("l1", (pred,), out, lambda g: (g * w * np.sign(d) / n,))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def mlp(x: Tensor, layers: Sequence[tuple], final_act: bool = False) -> Tensor:
    """Stack of (w, b) linear layers with ReLU between them."""
    for i, (w, b) in enumerate(layers):
        x = linear(x, w, b)
        if i < len(layers) - 1 or final_act:
            x = relu(x)
    return x


def attention_scale(dh: int) -> float:
    return 1.0 / math.sqrt(dh)
