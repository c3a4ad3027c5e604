"""Dense tensors recorded on an explicit reverse-mode tape.

Usage::

    with Tape() as tape:
        loss = ops.mean(ops.relu(ops.matmul(x, w)))
    grads = tape.backward(loss)   # {w: dL/dw, ...}

Operations executed outside an active tape, or on inputs that need no gradient,
produce constants and record nothing.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, o):
        from . import ops

        return ops.add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        from . import ops

        return ops.sub(self, o)

    def __mul__(self, o):
        from . import ops

        return ops.mul(self, o)

    __rmul__ = __mul__

    def __matmul__(self, o):
        from . import ops

        return ops.matmul(self, o)


@dataclass
class OpRecord:
    kind: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


_ACTIVE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("occforge_tape", default=None)


class Tape:
    """Topologically ordered op records; backward replays them in exact reverse order."""

    def __init__(self):
        self.records: list[OpRecord] = []
        self._done = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, kind: str, inputs: tuple, output: Tensor, backward) -> None:
        if self._done:
            raise TapeError("tape already consumed by backward(); call reset() first")
        output.node = len(self.records)
        self.records.append(OpRecord(kind, inputs, output, backward))

    def reset(self) -> None:
        for r in self.records:
            r.output.node = None
        self.records.clear()
        self._done = False

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar ``loss`` for every requires-grad leaf reached."""
        if self._done:
            raise TapeError("backward() already called on this tape; reset() before reuse")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node >= len(self.records) or self.records[loss.node].output is not loss:
            raise TapeError("loss was not produced on this tape")
        self._done = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records[: loss.node + 1]):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not isinstance(inp, Tensor) or not inp.tracked:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(f"{rec.kind}: gradient shape {gi.shape} != input shape {inp.shape}")
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
                if inp.node is None:
                    leaves[key] = inp
        return {t: grads[k] for k, t in leaves.items() if k in grads}


def active_tape() -> Optional[Tape]:
    return _ACTIVE.get()


def emit(kind: str, inputs: tuple, out_data: np.ndarray, backward) -> Tensor:
    """Wrap an op result; record it when a tape is active and some input is tracked."""
    out = Tensor(out_data)
    tape = _ACTIVE.get()
    if tape is not None and any(isinstance(i, Tensor) and i.tracked for i in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))
