"""Differentiable layers: dense, batch/layer norm, scaled dot-product attention.

Layers operate on tape Tensors; parameters live in a ParamStore under dotted
names. The ``init_*`` helpers register parameters, the ``apply_*`` helpers
read them back as graph leaves.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .errors import BatchTooSmall, ShapeError
from .optim import ParamStore

BN_MOMENTUM = 0.1
NORM_EPS = 1e-5
MASK_NEG = -1e9


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b with x:(n,in), w:(in,out), b:(out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: {x.data.shape} @ {w.data.shape}")
    out = x @ w
    return out if b is None else out + b


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, train: bool, momentum: float = BN_MOMENTUM,
               eps: float = NORM_EPS) -> Tensor:
    """Per-feature normalization over the batch axis (axis 0).

    Train mode normalizes by batch statistics and updates the running buffers
    in place (unbiased variance, matching the usual convention); eval mode
    normalizes by the running buffers.
    """
    if x.data.ndim != 2:
        raise ShapeError("batch_norm expects (n, features)")
    n = x.data.shape[0]
    if train:
        if n < 2:
            raise BatchTooSmall("batch_norm train mode needs n >= 2")
        mu = x.mean(axis=0)
        xc = x - mu
        var = (xc * xc).mean(axis=0)
        xhat = xc / (var + eps).sqrt()
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data
        running_var *= 1.0 - momentum
        running_var += momentum * var.data * (n / max(1, n - 1))
    else:
        xhat = (x - running_mean) / np.sqrt(running_var + eps)
    return xhat * gamma + beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-row normalization over the last axis."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / (var + eps).sqrt()) * gamma + beta


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction as a constant shift)."""
    shifted = x - x.data.max(axis=axis, keepdims=True)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q k^T / sqrt(d)) v, with an optional additive logit mask."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention expects 2-D q, k, v")
    d = q.data.shape[1]
    if d == 0 or k.data.shape[1] != d or k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"attention dims: q{q.data.shape} k{k.data.shape} v{v.data.shape}")
    logits = (q @ k.T) * (1.0 / math.sqrt(d))
    if mask is not None:
        logits = logits + mask
    return softmax(logits, axis=-1) @ v


# ---------------------------------------------------------------------------
# Parameter registration / application helpers
# ---------------------------------------------------------------------------

def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_linear(store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    store.add(f"{name}.w", kaiming_uniform(rng, fan_in, (fan_in, fan_out)))
    store.add(f"{name}.b", np.zeros(fan_out))


def apply_linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(x, store.leaf(f"{name}.w"), store.leaf(f"{name}.b"))


def init_norm(store: ParamStore, name: str, dim: int, running: bool = False):
    store.add(f"{name}.scale", np.ones(dim))
    store.add(f"{name}.shift", np.zeros(dim))
    if running:
        store.add(f"{name}.running_mean", np.zeros(dim), trainable=False)
        store.add(f"{name}.running_var", np.ones(dim), trainable=False)


def apply_batch_norm(store: ParamStore, name: str, x: Tensor, train: bool) -> Tensor:
    return batch_norm(
        x,
        store.leaf(f"{name}.scale"),
        store.leaf(f"{name}.shift"),
        store[f"{name}.running_mean"].value,
        store[f"{name}.running_var"].value,
        train=train,
    )


def apply_layer_norm(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, store.leaf(f"{name}.scale"), store.leaf(f"{name}.shift"))
