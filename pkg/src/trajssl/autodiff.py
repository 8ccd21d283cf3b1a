"""Reverse-mode differentiation tape over numpy arrays.

The differentiable surface is deliberately small: exactly the operations the
reference encoder, SSL heads and losses are built from. Every operation
checks its output for NaN/Inf (see set_finite_checks) and raises
NumericalFault instead of propagating poison.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalFault, ShapeError

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-operation NaN/Inf guard; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    return prev


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A value on the tape. ``grad`` accumulates during backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None, _op: str = ""):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        if _FINITE_CHECKS and not np.all(np.isfinite(self.data)):
            raise NumericalFault(f"non-finite values out of op {_op or 'leaf'}")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    # -- helpers -----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def _ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x))

    def _lift_like(self, x) -> "Tensor":
        """Lift x to a Tensor; plain numbers adopt self's dtype so that f32
        graphs are not silently promoted to f64."""
        if isinstance(x, Tensor):
            return x
        if isinstance(x, (int, float)):
            return Tensor(np.asarray(x, dtype=self.data.dtype))
        return Tensor(np.asarray(x))

    @staticmethod
    def _make(data, parents, bwds, op):
        live = [(p, b) for p, b in zip(parents, bwds) if p.requires_grad]
        if not live:
            return Tensor(data, _op=op)

        def run(g):
            for p, b in live:
                p._ensure_grad()
                p.grad += b(g)

        return Tensor(data, requires_grad=True, _parents=tuple(p for p, _ in live), _bwd=run, _op=op)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        o = self._lift_like(other)
        return self._make(
            self.data + o.data,
            (self, o),
            (lambda g: _unbroadcast(g, self.data.shape), lambda g: _unbroadcast(g, o.data.shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self):
        return self._make(-self.data, (self,), (lambda g: -g,), "neg")

    def __sub__(self, other):
        o = self._lift_like(other)
        return self._make(
            self.data - o.data,
            (self, o),
            (lambda g: _unbroadcast(g, self.data.shape), lambda g: _unbroadcast(-g, o.data.shape)),
            "sub",
        )

    def __rsub__(self, other):
        return self._lift_like(other) - self

    def __mul__(self, other):
        o = self._lift_like(other)
        return self._make(
            self.data * o.data,
            (self, o),
            (
                lambda g: _unbroadcast(g * o.data, self.data.shape),
                lambda g: _unbroadcast(g * self.data, o.data.shape),
            ),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift_like(other)
        return self._make(
            self.data / o.data,
            (self, o),
            (
                lambda g: _unbroadcast(g / o.data, self.data.shape),
                lambda g: _unbroadcast(-g * self.data / (o.data * o.data), o.data.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return self._lift_like(other) / self

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return self._make(
            self.data ** p,
            (self,),
            (lambda g: g * p * self.data ** (p - 1),),
            "pow",
        )

    def __matmul__(self, other):
        o = self._lift(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ShapeError("matmul expects 2-D operands")
        if self.data.shape[1] != o.data.shape[0]:
            raise ShapeError(f"matmul inner dims {self.data.shape} @ {o.data.shape}")
        return self._make(
            self.data @ o.data,
            (self, o),
            (lambda g: g @ o.data.T, lambda g: self.data.T @ g),
            "matmul",
        )

    # -- elementwise functions -------------------------------------------------

    def relu(self):
        mask = self.data > 0
        return self._make(self.data * mask, (self,), (lambda g: g * mask,), "relu")

    def exp(self):
        out = np.exp(self.data)
        return self._make(out, (self,), (lambda g: g * out,), "exp")

    def log(self):
        return self._make(np.log(self.data), (self,), (lambda g: g / self.data,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return self._make(out, (self,), (lambda g: g * 0.5 / out,), "sqrt")

    def abs(self):
        s = np.sign(self.data)
        return self._make(np.abs(self.data), (self,), (lambda g: g * s,), "abs")

    # -- reductions and shape ---------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                return np.broadcast_to(g, self.data.shape).copy()
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, self.data.shape).copy()

        return self._make(out, (self,), (bwd,), "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._make(
            self.data.reshape(shape), (self,), (lambda g: g.reshape(self.data.shape),), "reshape"
        )

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ShapeError("T expects a 2-D tensor")
        return self._make(self.data.T.copy(), (self,), (lambda g: g.T,), "transpose")

    def __getitem__(self, key):
        def bwd(g):
            buf = np.zeros_like(self.data)
            np.add.at(buf, key, g)
            return buf

        return self._make(self.data[key], (self,), (bwd,), "getitem")

    # -- backward ----------------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ShapeError("seed gradient shape mismatch")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._ensure_grad()
        self.grad += seed
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_bwd(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor._make(data, tuple(tensors), tuple(make_bwd(i) for i in range(len(tensors))), "concat")
