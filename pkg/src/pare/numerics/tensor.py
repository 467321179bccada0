"""Dense tensor with define-by-run reverse-mode differentiation.

A :class:`Tensor` wraps a numpy buffer. Every differentiable op that touches a
tensor with ``requires_grad`` attaches a :class:`Node` to its output; the
nodes form a DAG that :func:`backward` walks in reverse topological order.
The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

_STATE = {
    "dtype": np.float32,
    "grad_enabled": True,
    "check_finite": False,
}


def default_dtype() -> type:
    return _STATE["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    The 64-bit mode exists for gradient checks only.
    """
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    prev = _STATE["dtype"]
    _STATE["dtype"] = dtype
    try:
        yield
    finally:
        _STATE["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = prev


@contextlib.contextmanager
def check_finite(enabled: bool = True) -> Iterator[None]:
    """Debug mode: every op output is checked for NaN/Inf and fails fast."""
    prev = _STATE["check_finite"]
    _STATE["check_finite"] = enabled
    try:
        yield
    finally:
        _STATE["check_finite"] = prev


def grad_enabled() -> bool:
    return _STATE["grad_enabled"]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


@dataclass(eq=False)
class Node:
    """One executed op: its inputs and the adjoint rule mapping dL/dout to dL/dinputs."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _STATE["dtype"]
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dims must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar; implementations live in ops ----------------------
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

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

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

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_output(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording a node when any input needs a gradient."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if _STATE["check_finite"] and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite value in output of shape {data.shape}")
    if _STATE["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward_fn)
    return out


class Graph:
    """Executed ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in t.node.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        self.tensors = order

    @property
    def ops(self) -> list[Node]:
        return [t.node for t in self.tensors if t.node is not None]

    def leaves(self) -> list[Tensor]:
        return [t for t in self.tensors if t.node is None and t.requires_grad]

    def __len__(self) -> int:
        return len(self.ops)


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) to every leaf that requires a gradient.

    Leaf ``.grad`` buffers accumulate (add) across calls; call ``zero_grad``
    between steps. Returns a map from leaf tensor to the gradient computed by
    this call.
    """
    if root.data.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward: root does not require grad (empty graph)")
    graph = Graph(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    result: dict[Tensor, np.ndarray] = {}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            result[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{t.node.op}: adjoint shape {pg.shape} != input shape {parent.shape}"
                )
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return result
