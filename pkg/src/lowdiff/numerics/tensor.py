"""Dense tensors and a tape for reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Operations in :mod:`lowdiff.numerics.ops`
record themselves on the active :class:`Tape` whenever one of their inputs
requires a gradient; :func:`backward` then walks the tape once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class Tensor:
    """Immutable dense array, optionally tracked for gradients.

    ``name`` is set for parameters; gradients are reported by name.
    """

    __slots__ = ("data", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Optional[Tape] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(x, dtype=dtype)


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]
    shape: tuple
    name: Optional[str] = None


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the block are
    recorded if any of their inputs requires a gradient.
    """

    nodes: list = field(default_factory=list)
    _leaves: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def node_of(self, t: Tensor) -> Optional[int]:
        if t._tape is self:
            return t._node
        if t.requires_grad:
            key = id(t)
            if key not in self._leaves:
                self.nodes.append(Node("leaf", (), None, t.shape, t.name))
                self._leaves[key] = (len(self.nodes) - 1, t)
            return self._leaves[key][0]
        return None

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, backward_fn) -> Tensor:
        ids = tuple(self.node_of(t) for t in inputs)
        if all(i is None for i in ids):
            return out
        self.nodes.append(Node(kind, ids, backward_fn, out.shape))
        out.requires_grad = True
        out._tape = self
        out._node = len(self.nodes) - 1
        return out


_TAPE_STACK: list = []


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: produced non-finite values")


def emit(kind: str, inputs: Sequence[Tensor], data: np.ndarray, backward_fn) -> Tensor:
    """Wrap ``data`` as the output of primitive ``kind`` and record it."""
    check_finite(data, kind)
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradients of scalar ``loss`` w.r.t. every named leaf reachable from it.

    Leaves that the loss does not depend on get no entry.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        return {}
    top = loss._node
    grads: list = [None] * (top + 1)
    grads[top] = np.ones(loss.shape, dtype=loss.dtype)
    out: dict = {}
    for k in range(top, -1, -1):
        g = grads[k]
        if g is None:
            continue
        node = tape.nodes[k]
        if node.kind == "leaf":
            if node.name is not None:
                out[node.name] = g
            continue
        parts = node.backward_fn(g)
        for i, gi in zip(node.inputs, parts):
            if i is None or gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
        grads[k] = None
    return out
