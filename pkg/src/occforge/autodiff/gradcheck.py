"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5, seed: int = 0) -> list[float]:
    """Relative error per requires-grad input of the scalar ``sum(fn(*inputs) * R)``.

    ``R`` is a fixed random projection so every output entry contributes.
    """
    with Tape():
        probe = fn(*inputs)
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    def loss_value():
        return float(np.sum(fn(*inputs).data * proj))

    with Tape() as tape:
        out = fn(*inputs)
        loss = ops.sum(ops.mul(out, Tensor(proj))) if out.data.ndim else ops.mul(out, Tensor(proj))
    grads = tape.backward(loss)
    errs = []
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = grads.get(t, np.zeros_like(t.data))
        errs.append(rel_error(analytic, numeric_grad(loss_value, t.data, h)))
    return errs
