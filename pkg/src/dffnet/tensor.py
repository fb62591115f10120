"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays, float64 by default (float32 is allowed for
training speed; gradient checking requires float64). Every differentiable
operation records its parent tensors and a backward closure holding the
vector-Jacobian rule; calling ``backward()`` on a scalar output walks the
recorded graph in reverse topological order and accumulates gradients into
every reachable leaf. Fan-out accumulates additively.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Shape mismatch inside an operation; the message names the node."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class Tensor:
    """N-rank real array plus the bookkeeping needed for backpropagation.

    The wrapped array is treated as immutable by the graph: ops never write
    into their inputs, and reshape returns a new node viewing the same
    element count.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"expected scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op!r}{grad})"

    # -- graph construction --------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar root, accumulating leaf gradients."""
        if self.data.size != 1:
            raise ShapeError("backward", f"root must be scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        out = make_node(self.data + other.data, (self, other), "add")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(unbroadcast(g, other.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        out = make_node(self.data * other.data, (self, other), "mul")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(unbroadcast(g * self.data, other.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        out = make_node(-self.data, (self,), "neg")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(-g)

        out._backward = backward
        return out

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other, self.dtype)
        out = make_node(self.data - other.data, (self, other), "sub")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(unbroadcast(-g, other.shape))

        out._backward = backward
        return out

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other, self.dtype).__sub__(self)

    def __truediv__(self, scalar) -> "Tensor":
        if isinstance(scalar, Tensor):
            raise ShapeError("div", "tensor/tensor division is not supported")
        return self * (1.0 / float(scalar))

    def sum(self) -> "Tensor":
        out = make_node(self.data.sum(dtype=self.dtype), (self,), "sum")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype, copy=False))

        out._backward = backward
        return out

    def mean(self) -> "Tensor":
        return self.sum() / self.size

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError("reshape", str(exc)) from exc
        out = make_node(data, (self,), "reshape")

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g.reshape(self.shape))

        out._backward = backward
        return out


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_node(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    """Wrap an op result, inheriting requires_grad from its parents."""
    out = Tensor(data, op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def unbroadcast(g: np.ndarray, target_shape: tuple) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    if g.shape == target_shape:
        return g
    while g.ndim > len(target_shape):
        g = g.sum(axis=0)
    for axis, (have, want) in enumerate(zip(g.shape, target_shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def parameter(data: np.ndarray, dtype=None) -> Tensor:
    """Create a learnable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True)


def zero_grads(params: Iterable[Tensor] | Mapping[str, Tensor]) -> None:
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.zero_grad()
