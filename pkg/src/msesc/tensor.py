"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when it participates in a
tracked computation, remembers its parents plus a closure that pushes
the output gradient back to them.  ``Tensor.backward`` walks the graph in
reverse topological order.

Layer-level operations (convolution, pooling, normalization, losses) live
in :mod:`msesc.ops`; this module only holds the graph machinery and the
elementwise / shape primitives they are composed from.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- graph plumbing -------------------------------------------------
    @classmethod
    def _make(
        cls,
        data: np.ndarray,
        parents: Sequence[Tensor],
        backward: Callable[[np.ndarray], None],
    ) -> Tensor:
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node._route(g, grads)

    def _route(self, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
        sinks: list[tuple[Tensor, np.ndarray]] = []

        def collect(parent: Tensor, pg: np.ndarray) -> None:
            sinks.append((parent, pg))

        _ROUTER.append(collect)
        try:
            self._backward(g)
        finally:
            _ROUTER.pop()
        for parent, pg in sinks:
            if not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                pg = _unbroadcast(pg, parent.data.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- conveniences ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)

        def bw(g):
            send(self, g)
            send(other, g)

        return Tensor._make(self.data + other.data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._make(-self.data, (self,), lambda g: send(self, -g))

    def __sub__(self, other) -> Tensor:
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)

        def bw(g):
            send(self, g * other.data)
            send(other, g * self.data)

        return Tensor._make(self.data * other.data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)

        def bw(g):
            send(self, g / other.data)
            send(other, -g * self.data / (other.data * other.data))

        return Tensor._make(self.data / other.data, (self, other), bw)

    def __pow__(self, p: float) -> Tensor:
        def bw(g):
            send(self, g * p * self.data ** (p - 1))

        return Tensor._make(self.data**p, (self,), bw)

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other, self.dtype)
        if self.ndim != 2 or other.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul shapes {self.shape} and {other.shape} do not align")

        def bw(g):
            send(self, g @ other.data.T)
            send(other, self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), bw)

    # -- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            send(self, np.broadcast_to(g, self.shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(
            self.data.reshape(shape), (self,), lambda g: send(self, g.reshape(self.shape))
        )

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: send(self, g.transpose(inv))
        )

    def __getitem__(self, idx) -> Tensor:
        def bw(g):
            full = np.zeros_like(self.data)
            np.add.at(full, idx, g)
            send(self, full)

        return Tensor._make(self.data[idx], (self,), bw)

    # -- activations ------------------------------------------------------
    def relu(self) -> Tensor:
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), lambda g: send(self, g * mask))

    def sigmoid(self) -> Tensor:
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return Tensor._make(out, (self,), lambda g: send(self, g * out * (1.0 - out)))

    def softmax(self, axis: int = -1) -> Tensor:
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            send(self, out * (g - (g * out).sum(axis=axis, keepdims=True)))

        return Tensor._make(out, (self,), bw)

    def abs(self) -> Tensor:
        return Tensor._make(np.abs(self.data), (self,), lambda g: send(self, g * np.sign(self.data)))


# backward closures report parent gradients through the innermost router
_ROUTER: list[Callable[[Tensor, np.ndarray], None]] = []


def send(parent: Tensor, g: np.ndarray) -> None:
    """Hand ``g`` to ``parent`` from inside a backward closure."""
    if parent.requires_grad:
        _ROUTER[-1](parent, g)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=axis)):
            send(t, piece)

    return Tensor._make(data, tensors, bw)

