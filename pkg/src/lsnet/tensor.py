"""Minimal numpy-backed tensor with reverse-mode automatic differentiation.

Covers exactly the operations the enhancement network needs.  Forward values,
gradients and optimizer updates are bit-deterministic: the graph is walked in
a fixed topological order and no nondeterministic reduction is used.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value is produced with debug checks on."""


# Build-wide precision switch.  float32 is the working precision; float64
# exists so finite-difference gradient checks can be made tight.
_state = {"dtype": np.float32, "grad_enabled": True, "debug_finite": False}


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _state["dtype"] = dt.type


@contextmanager
def use_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def set_debug_finite(flag: bool) -> None:
    """Enable a per-op sweep that rejects NaN/Inf outputs."""
    _state["debug_finite"] = bool(flag)


class Tensor:
    """An n-d array plus an optional gradient slot and a backward closure.

    The network uses (batch, channel, height, width) layouts for images and
    (batch, rows, cols) layouts for attention matrices; the class itself is
    shape-agnostic.  Tensors are immutable after construction except through
    the optimizer's explicit in-place update.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _state["dtype"]:
            arr = arr.astype(_state["dtype"])
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, name=""):
        return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad, name)

    @staticmethod
    def ones(shape, requires_grad=False, name=""):
        return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad, name)

    # -- bookkeeping -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    # -- graph plumbing ----------------------------------------------------------

    def backward(self) -> None:
        """Populate grads of every requires_grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._backward is None and not self.requires_grad:
            raise ValueError("backward() on a detached tensor: nothing depends on it")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        _check_same_shape(self, other, "add")
        out = _make(self.data + other.data, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g)

        return _attach(out, bw)

    def __sub__(self, other):
        other = _as_tensor(other)
        _check_same_shape(self, other, "sub")
        out = _make(self.data - other.data, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(-g)

        return _attach(out, bw)

    def __mul__(self, other):
        other = _as_tensor(other)
        _check_same_shape(self, other, "mul")
        out = _make(self.data * other.data, (self, other))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)

        return _attach(out, bw)

    def __neg__(self):
        out = _make(-self.data, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(-g)

        return _attach(out, bw)

    def scale(self, c: float) -> "Tensor":
        """Multiply by a python scalar without promoting the dtype."""
        c = self.data.dtype.type(c)
        out = _make(self.data * c, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g * c)

        return _attach(out, bw)

    def add_scalar(self, c: float) -> "Tensor":
        c = self.data.dtype.type(c)
        out = _make(self.data + c, (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g)

        return _attach(out, bw)

    # -- reductions -------------------------------------------------------------

    def sum(self) -> "Tensor":
        out = _make(self.data.sum(dtype=self.data.dtype).reshape(1), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(np.full_like(self.data, g.reshape(())))

        return _attach(out, bw)

    def mean(self) -> "Tensor":
        n = self.data.dtype.type(self.data.size)
        out = _make((self.data.sum(dtype=self.data.dtype) / n).reshape(1), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(np.full_like(self.data, g.reshape(()) / n))

        return _attach(out, bw)

    # -- shape manipulation --------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = _make(self.data.reshape(shape), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old))

        return _attach(out, bw)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out = _make(np.ascontiguousarray(self.data.transpose(axes)), (self,))

        def bw(g):
            if self.requires_grad:
                self._accumulate(np.ascontiguousarray(g.transpose(inv)))

        return _attach(out, bw)

    def slice_batch(self, start: int, stop: int) -> "Tensor":
        """Contiguous slice along axis 0; gradient routes back into place."""
        out = _make(np.ascontiguousarray(self.data[start:stop]), (self,))

        def bw(g):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[start:stop] = g
                self._accumulate(full)

        return _attach(out, bw)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


def _make(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    if _state["debug_finite"] and not np.isfinite(data).all():
        raise NumericError("non-finite value produced during forward pass")
    return out


def _attach(out: Tensor, bw) -> Tensor:
    if out.requires_grad:
        out._backward = bw
    return out


def _topo_order(root: Tensor) -> list:
    """Depth-first topological order with deterministic parent visitation."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        # reversed so parents are expanded left-to-right
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along an axis; gradient splits back to the inputs."""
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = _make(data, tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(np.ascontiguousarray(g[tuple(idx)]))

    return _attach(out, bw)
