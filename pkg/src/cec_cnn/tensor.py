"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a :class:`Tensor` whose ``_node``
records the inputs and a backward closure. Nodes are stamped with a
monotonically increasing creation id, so replaying them in decreasing id
order is a valid reverse topological order of the tape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_creation_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up in a forward or backward pass."""


class TapeError(RuntimeError):
    """Raised on misuse of the autodiff tape (non-scalar root, double backward)."""


class TapeNode:
    __slots__ = ("op", "inputs", "backward_fn", "id", "consumed")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        # backward_fn(grad_out) -> tuple of grads (or None) aligned with inputs
        self.backward_fn = backward_fn
        self.id = next(_creation_counter)
        self.consumed = False


class Tensor:
    """A numpy array with optional gradient tracking."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[TapeNode] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar (kept small; the op library lives in ops.py) ------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def sum(self):
        from . import ops

        return ops.sum_all(self)

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        backward(self)


def check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {where}")


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result and, when any input tracks gradients, record it on the tape."""
    check_finite(data, f"{op} output")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._node = TapeNode(op, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients from multiple uses of a tensor accumulate. A tape may be
    replayed only once; intermediates are released afterwards.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires grad")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if loss._node.consumed:
        raise TapeError("backward already ran through this graph; rebuild it with a new forward pass")

    # collect every node reachable from the root
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.id in nodes:
            continue
        if node.consumed:
            raise TapeError("graph shares nodes with an already back-propagated graph")
        nodes[node.id] = t
        stack.extend(i for i in node.inputs if i.requires_grad)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        node = t._node
        g = grads.pop(id(t), None)
        node.consumed = True
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            check_finite(ig, f"gradient of {node.op}")
            if inp._node is None:
                # leaf: accumulate into .grad
                ig = np.asarray(ig, dtype=inp.data.dtype)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
        node.backward_fn = _released
    loss._node.consumed = True


def _released(_g):
    raise TapeError("tape node already released")


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)
