"""N-dimensional float32 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy float32 array. Operations on tracked
tensors record a ``TapeNode`` holding the inputs and a backward closure;
``Tensor.backward()`` walks the resulting DAG once in reverse topological
order and accumulates gradients additively, so fan-out (using the same
tensor twice) sums contributions.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DimMismatch, NoTape, NotScalar, ZeroDim


class TapeNode:
    """One recorded operation: kind, input tensors, backward closure.

    The closure captures whatever forward values the backward pass needs,
    receives the output gradient and adds each input's contribution into
    ``input.grad``.
    """

    __slots__ = ("op_kind", "inputs", "backward_fn")

    def __init__(self, op_kind: str, inputs: tuple["Tensor", ...],
                 backward_fn: Callable[[np.ndarray], None]):
        self.op_kind = op_kind
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Row-major float32 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, shape: Sequence[int], fill=0.0, requires_grad: bool = False):
        dims = [int(d) for d in shape]
        if any(d < 1 for d in dims):
            raise ZeroDim(f"invalid shape {dims}: every dimension must be >= 1")
        count = math.prod(dims)
        if np.isscalar(fill):
            data = np.full(dims, fill, dtype=np.float32)
        else:
            arr = np.array(fill, dtype=np.float32).reshape(-1)
            if arr.size != count:
                raise DimMismatch(
                    f"shape {dims} needs {count} values, got {arr.size}")
            data = arr.reshape(dims)
        self.data: np.ndarray = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None

    @classmethod
    def from_array(cls, array, requires_grad: bool = False) -> "Tensor":
        arr = np.asarray(array, dtype=np.float32)
        return cls(list(arr.shape), arr.reshape(-1).copy(), requires_grad)

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # fast path for op outputs: no validation, no copy
        t = object.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise DimMismatch(f"add: {self.shape} vs {other.shape}")
            a, b = self, other

            def backward(g: np.ndarray) -> None:
                if a.requires_grad:
                    a.grad += g
                if b.requires_grad:
                    b.grad += g

            return apply_op("add", (a, b), self.data + other.data, backward)
        c = float(other)
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g

        return apply_op("add_scalar", (a,), self.data + np.float32(c), backward)

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise DimMismatch(f"mul: {self.shape} vs {other.shape}")
            a, b = self, other
            a_data, b_data = self.data, other.data

            def backward(g: np.ndarray) -> None:
                if a.requires_grad:
                    a.grad += g * b_data
                if b.requires_grad:
                    b.grad += g * a_data

            return apply_op("mul", (a, b), a_data * b_data, backward)
        c = np.float32(float(other))
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g * c

        return apply_op("mul_scalar", (a,), self.data * c, backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other) -> "Tensor":
        return (-self) + float(other)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g  # scalar g broadcasts over the input shape

        # accumulate in float64, round once: keeps scalar losses accurate
        # enough for finite-difference checks
        total = np.float32(self.data.sum(dtype=np.float64))
        return apply_op("sum", (a,), np.asarray(total).reshape(()), backward)

    def mean(self) -> "Tensor":
        return self.sum() * (1.0 / self.size)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        dims = [int(d) for d in shape]
        if math.prod(dims) != self.size:
            raise DimMismatch(f"reshape {list(self.shape)} -> {dims}")
        a = self
        old_shape = self.shape

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g.reshape(old_shape)

        return apply_op("reshape", (a,), self.data.reshape(dims), backward)

    def transpose(self, *axes: int) -> "Tensor":
        perm = tuple(axes)
        inv = tuple(np.argsort(perm))
        a = self

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                a.grad += g.transpose(inv)

        return apply_op("transpose", (a,), self.data.transpose(perm), backward)

    # -- reverse-mode sweep -------------------------------------------------

    def backward(self) -> None:
        """Propagate gradients from this scalar to every tracked tensor."""
        if self.data.size != 1:
            raise NotScalar(f"backward() needs a scalar, got shape {self.shape}")
        if self.node is None and not self.requires_grad:
            raise NoTape("backward() on a value with no recorded computation")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, emitted = stack.pop()
            if emitted:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    stack.append((inp, False))
        for t in topo:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += np.ones_like(self.data)
        for t in reversed(topo):
            if t.node is not None:
                t.node.backward_fn(t.grad)


def apply_op(op_kind: str, inputs: Sequence[Tensor], data: np.ndarray,
             backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording a tape node when any input is tracked."""
    out = Tensor._wrap(np.asarray(data, dtype=np.float32))
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op_kind, tuple(inputs), backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimMismatch(f"matmul: inner dimensions {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b_data.T
        if b.requires_grad:
            b.grad += a_data.T @ g

    return apply_op("matmul", (a, b), a_data @ b_data, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: [N,p,q] @ [N,q,r] -> [N,p,r]."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimMismatch(f"bmm needs rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimMismatch(f"bmm: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad += g @ b_data.transpose(0, 2, 1)
        if b.requires_grad:
            b.grad += a_data.transpose(0, 2, 1) @ g

    return apply_op("bmm", (a, b), a_data @ b_data, backward)


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float) -> Tensor:
    """Central-difference gradient of a scalar-valued function at ``x``.

    Independent of the tape: evaluates ``f`` at 2n perturbed copies of ``x``.
    The effective step is measured in float64 from the actually stored
    float32 values, which removes most representation error.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    flat = x.data.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += np.float32(h)
        minus = flat.copy()
        minus[i] -= np.float32(h)
        span = float(plus[i]) - float(minus[i])
        fp = _scalar(f(Tensor(list(x.shape), plus)))
        fm = _scalar(f(Tensor(list(x.shape), minus)))
        out[i] = (fp - fm) / span
    return Tensor(list(x.shape), out.astype(np.float32))


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)
