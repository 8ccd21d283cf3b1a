"""Binary checkpoint container.

Layout (little-endian):
  magic "TSSL" | version u32 | tensor count u32 | flags u8 [| step u64]
  per tensor: name_len u16 | name utf-8 | dtype u8 (0=f32, 1=f64) | rank u8
              | dims u64[rank] | raw value data [| m data | v data]
Flag bit 0: AdamW moment tensors (and the store step counter) are included.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .errors import CheckpointMismatch
from .optim import ParamStore

MAGIC = b"TSSL"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_checkpoint(store: ParamStore, path, include_moments: bool = False) -> str:
    """Serialize the store; returns the checkpoint id (content hash)."""
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<II", VERSION, len(store.names()))
    buf += struct.pack("<B", 1 if include_moments else 0)
    if include_moments:
        buf += struct.pack("<Q", store.step)
    for name, p in store.items():
        raw = name.encode("utf-8")
        code = _CODES[np.dtype(store.dtype)]
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<BB", code, p.value.ndim)
        buf += struct.pack(f"<{p.value.ndim}Q", *p.value.shape)
        buf += np.ascontiguousarray(p.value, dtype=_DTYPES[code]).tobytes()
        if include_moments:
            for mom in (p.m, p.v):
                arr = mom if p.trainable else np.zeros_like(p.value)
                buf += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(buf)
    return hashlib.sha256(bytes(buf)).hexdigest()[:12]


def read_checkpoint(path):
    """Return (tensors, moments_or_None, step, checkpoint_id)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    ckpt_id = hashlib.sha256(raw).hexdigest()[:12]
    if raw[:4] != MAGIC:
        raise CheckpointMismatch(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {version}")
    off = 12
    (flags,) = struct.unpack_from("<B", raw, off)
    off += 1
    step = 0
    with_moments = bool(flags & 1)
    if with_moments:
        (step,) = struct.unpack_from("<Q", raw, off)
        off += 8
    tensors: dict[str, np.ndarray] = {}
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", raw, off)
        off += 8 * rank
        dt = _DTYPES[code]
        size = int(np.prod(dims)) if rank else 1
        nbytes = size * dt.itemsize

        def take():
            nonlocal off
            a = np.frombuffer(raw, dtype=dt, count=size, offset=off).reshape(dims)
            off += nbytes
            return a.copy()

        tensors[name] = take()
        if with_moments:
            moments[name] = (take(), take())
    return tensors, (moments if with_moments else None), step, ckpt_id


def checkpoint_id(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:12]


def load_checkpoint_into(store: ParamStore, path) -> str:
    """Load a checkpoint whose tensors exactly cover the store; returns id."""
    tensors, _, _, ckpt_id = read_checkpoint(path)
    missing = [n for n in store.names() if n not in tensors]
    if missing:
        raise CheckpointMismatch(f"{path}: missing tensors {missing}")
    for n, p in store.items():
        if tensors[n].shape != p.value.shape:
            raise CheckpointMismatch(
                f"{path}: shape mismatch for {n}: {tensors[n].shape} vs {p.value.shape}"
            )
        p.value[...] = tensors[n]
    return ckpt_id
