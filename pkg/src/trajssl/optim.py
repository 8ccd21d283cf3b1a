"""Named parameter store, AdamW, and the momentum-branch EMA machinery."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import StoreMismatch


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True


class ParamStore:
    """Ordered mapping name -> Param. Values/grads/moments share one dtype.

    Buffers (trainable=False, e.g. batch-norm running statistics) carry no
    gradients or moments; the optimizer and EMA skip them.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}
        self.step = 0
        # frozen stores build constant graph leaves: no gradients ever flow
        self.frozen = False

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        zeros = np.zeros_like(value)
        p = Param(value, zeros, np.zeros_like(value), np.zeros_like(value), trainable)
        if not trainable:
            p.grad = p.m = p.v = np.zeros(0, dtype=self.dtype)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable_items(self):
        return [(n, p) for n, p in self._params.items() if p.trainable]

    def leaf(self, name: str) -> Tensor:
        """Fresh graph leaf whose grad buffer aliases this param's grad."""
        p = self._params[name]
        live = p.trainable and not self.frozen
        t = Tensor(p.value, requires_grad=live)
        if live:
            t.grad = p.grad
        return t

    def zero_grads(self):
        for _, p in self.trainable_items():
            p.grad[...] = 0.0

    def select(self, prefixes: tuple[str, ...]) -> "ParamStore":
        """View over the params whose names start with any prefix (shared Param objects)."""
        sub = ParamStore(self.dtype)
        sub._params = {n: p for n, p in self._params.items() if n.startswith(prefixes)}
        sub.frozen = self.frozen
        return sub

    def copy_from(self, other: "ParamStore"):
        _check_match(self, other)
        for n, p in self._params.items():
            p.value[...] = other[n].value

    def clone(self) -> "ParamStore":
        out = ParamStore(self.dtype)
        for n, p in self._params.items():
            out.add(n, p.value.copy(), trainable=p.trainable)
        out.step = self.step
        out.frozen = self.frozen
        return out


def _check_match(a: ParamStore, b: ParamStore):
    if set(a.names()) != set(b.names()):
        only_a = sorted(set(a.names()) - set(b.names()))
        only_b = sorted(set(b.names()) - set(a.names()))
        raise StoreMismatch(f"name sets differ (only left: {only_a}, only right: {only_b})")
    for n in a.names():
        if a[n].value.shape != b[n].value.shape:
            raise StoreMismatch(f"shape mismatch for {n}: {a[n].value.shape} vs {b[n].value.shape}")


def adamw_step(store: ParamStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0):
    """Decoupled weight decay, then bias-corrected Adam; zeroes gradients."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for _, p in store.trainable_items():
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.m *= b1
        p.m += (1.0 - b1) * p.grad
        p.v *= b2
        p.v += (1.0 - b2) * p.grad * p.grad
        p.value -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
        p.grad[...] = 0.0


def ema_update(online: ParamStore, momentum: ParamStore, m: float):
    """momentum <- m*momentum + (1-m)*online over trainable params.

    m=1 is an exact no-op. Buffers (running statistics) are left alone: each
    branch maintains its own.
    """
    _check_match(online, momentum)
    if m == 1.0:
        return
    for n, p in momentum.items():
        if not p.trainable:
            continue
        p.value *= m
        p.value += (1.0 - m) * online[n].value


@dataclass(frozen=True)
class EmaSchedule:
    """Cosine ramp of the EMA momentum from m0 at step 0 to 1.0 at total_steps."""

    m0: float = 0.996
    total_steps: int = 1

    def __post_init__(self):
        if not (0.0 <= self.m0 <= 1.0) or self.total_steps < 1:
            raise ValueError("need m0 in [0,1] and total_steps >= 1")


def momentum_at(schedule: EmaSchedule, k: int) -> float:
    """m(k) = 1 - (1 - m0) * (cos(pi*k/K) + 1) / 2, clamped to 1 past K."""
    if k >= schedule.total_steps:
        return 1.0
    if k < 0:
        raise ValueError("step must be non-negative")
    frac = k / schedule.total_steps
    return 1.0 - (1.0 - schedule.m0) * (math.cos(math.pi * frac) + 1.0) / 2.0
