"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers how it was produced. Every
primitive records a backward closure; calling ``backward`` on a scalar
result walks the recorded graph in reverse topological order and
accumulates gradients into the leaf tensors (those created with
``requires_grad=True``).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    pass


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"non-finite value produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Node in the differentiation tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Callable[[np.ndarray], None] | None = None,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # ------------------------------------------------------------------
    # primitives
    # ------------------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data + other.data
        _finite_or_raise(out_data, "add")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data - other.data
        _finite_or_raise(out_data, "sub")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data * other.data
        _finite_or_raise(out_data, "mul")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        out_data = self.data / other.data
        _finite_or_raise(out_data, "div")

        def bwd(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accum(
                    _unbroadcast(-g * self.data / other.data**2, other.data.shape)
                )

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    def matmul(self, other: "Tensor") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[0]:
            raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
        out_data = a @ b
        _finite_or_raise(out_data, "matmul")

        def bwd(g):
            if self.requires_grad:
                if a.ndim == 1:
                    self._accum(b @ g)
                else:
                    self._accum(g @ b.T)
            if other.requires_grad:
                if a.ndim == 1:
                    other._accum(np.outer(a, g))
                else:
                    other._accum(a.T @ g)

        return Tensor(out_data, _parents=(self, other), _backward=bwd)

    __matmul__ = matmul

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * (1.0 - out_data**2))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def bwd(g):
            if self.requires_grad:
                self._accum(g * (self.data > 0.0))

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def square(self) -> "Tensor":
        out_data = self.data**2
        _finite_or_raise(out_data, "square")

        def bwd(g):
            if self.requires_grad:
                self._accum(g * 2.0 * self.data)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        _finite_or_raise(out_data, "sqrt")

        def bwd(g):
            if self.requires_grad:
                self._accum(g * 0.5 / out_data)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def abs(self) -> "Tensor":
        out_data = np.abs(self.data)
        sign = np.sign(self.data)  # subgradient 0 at 0

        def bwd(g):
            if self.requires_grad:
                self._accum(g * sign)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def sum(self, axis: int | None = None) -> "Tensor":
        out_data = self.data.sum(axis=axis)
        _finite_or_raise(np.atleast_1d(out_data), "sum")

        def bwd(g):
            if self.requires_grad:
                if axis is None:
                    self._accum(np.full_like(self.data, g))
                else:
                    self._accum(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def take_rows(self, indices: np.ndarray) -> "Tensor":
        """Gather rows; repeated indices accumulate gradient."""
        indices = np.asarray(indices, dtype=np.intp)
        out_data = self.data[indices]

        def bwd(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                np.add.at(acc, indices, g)
                self._accum(acc)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def slice_rows(self, start: int, stop: int) -> "Tensor":
        """Contiguous row slice; cheaper than ``take_rows`` on both passes."""
        out_data = self.data[start:stop]

        def bwd(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                acc[start:stop] = g
                self._accum(acc)

        return Tensor(out_data, _parents=(self,), _backward=bwd)

    def max_over_axis(self, axis: int) -> tuple["Tensor", np.ndarray]:
        """Max along an axis; gradient flows to the argmax entry only.

        Ties go to the lowest index (np.argmax convention). Returns the
        reduced tensor and the argmax array.
        """
        argmax = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(argmax, axis), axis).squeeze(axis)

        def bwd(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                np.put_along_axis(acc, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis)
                self._accum(acc)

        return Tensor(out_data, _parents=(self,), _backward=bwd), argmax

    def min_over_rows(self) -> tuple["Tensor", np.ndarray]:
        """Row-wise minimum of a 2D tensor, with one-hot subgradient."""
        if self.data.ndim != 2:
            raise ShapeMismatch(f"min_over_rows expects 2D, got {self.data.shape}")
        argmin = np.argmin(self.data, axis=1)
        out_data = self.data[np.arange(self.data.shape[0]), argmin]

        def bwd(g):
            if self.requires_grad:
                acc = np.zeros_like(self.data)
                acc[np.arange(self.data.shape[0]), argmin] = g
                self._accum(acc)

        return Tensor(out_data, _parents=(self,), _backward=bwd), argmin

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeMismatch("backward requires a scalar loss")
        _finite_or_raise(np.atleast_1d(self.data), "loss")

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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            if node.requires_grad and node.grad is not None:
                _finite_or_raise(node.grad, "backward")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant_matmul(matrix, x: Tensor) -> Tensor:
    """Multiply by a constant (possibly sparse) matrix: ``matrix @ x``."""
    out_data = matrix @ x.data
    _finite_or_raise(out_data, "constant_matmul")

    def bwd(g):
        if x.requires_grad:
            x._accum(matrix.T @ g)

    return Tensor(out_data, _parents=(x,), _backward=bwd)
