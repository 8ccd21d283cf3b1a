"""Central finite-difference gradient oracle and relative-error report."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .optim import ParamStore


def finite_diff_grad(loss_fn: Callable[[], float], store: ParamStore, h: float = 1e-5,
                     names: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Estimate d(loss)/d(param) by central differences, per element.

    ``loss_fn`` must be a deterministic function of the store values. The
    store is restored exactly afterwards.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    out: dict[str, np.ndarray] = {}
    use = list(names) if names is not None else [n for n, p in store.trainable_items()]
    for name in use:
        p = store[name]
        g = np.zeros_like(p.value, dtype=np.float64)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out[name] = g
    return out


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                       floor: float = 1e-3) -> float:
    """max over elements of |a-n| / max(|a|, |n|, floor).

    The floored denominator keeps the check meaningful across scales: for
    gradients above the floor this is plain relative error; below it the
    comparison degrades to absolute error at the floor scale, which is what
    central differences can actually resolve there (their noise floor is
    eps*|L|/h, far above 1e-5 * |g| for near-zero gradients). A wrong sign
    or factor on any gradient larger than ~1e-8 still fails a 1e-5 bound.
    """
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


@dataclass
class GradCheckResult:
    suite: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def check_store_gradients(loss_fn: Callable[[], float], backward_fn: Callable[[], None],
                          store: ParamStore, suite: str, tolerance: float = 1e-5,
                          h: float = 1e-5, names: Iterable[str] | None = None) -> GradCheckResult:
    """Run backward once, compare the populated grads against finite differences."""
    store.zero_grads()
    backward_fn()
    use = list(names) if names is not None else [n for n, p in store.trainable_items()]
    analytic = {n: store[n].grad.astype(np.float64).copy() for n in use}
    store.zero_grads()
    numeric = finite_diff_grad(loss_fn, store, h=h, names=use)
    return GradCheckResult(suite, max_relative_error(analytic, numeric), tolerance)
