"""Downstream prediction head, fine-tuning from pre-trained weights, and
model-driven evaluation on standardized scenario banks."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .encoder import ReferenceEncoderConfig, encode, featurize_window, init_encoder, stack_windows
from .errors import CheckpointMismatch, EmptyEvaluation
from .layers import apply_layer_norm, apply_linear, init_linear, init_norm, softmax
from .metrics import MetricsReport, PredictionSet, evaluate_predictions
from .optim import ParamStore, adamw_step
from .sampling import DataBank
from .scenario import Scenario
from .synth import rng_stream

log = logging.getLogger("trajssl.finetune")

STREAM_FT_INIT = 0x21
STREAM_FT_EPOCH = 0x22


def init_prediction_head(store: ParamStore, embed_dim: int, num_modes: int, T_f: int,
                         rng: np.random.Generator):
    """2-layer head emitting K trajectories plus K mode logits."""
    init_linear(store, "head.fc1", embed_dim, embed_dim, rng)
    init_norm(store, "head.ln", embed_dim)
    init_linear(store, "head.fc2", embed_dim, num_modes * (T_f * 2) + num_modes, rng)


def apply_prediction_head(store: ParamStore, z: Tensor, num_modes: int, T_f: int):
    """(B, K, T_f, 2) trajectories and (B, K) logits."""
    h = apply_linear(store, "head.fc1", z)
    h = apply_layer_norm(store, "head.ln", h).relu()
    out = apply_linear(store, "head.fc2", h)
    B = out.data.shape[0]
    split = num_modes * T_f * 2
    traj = out[:, :split].reshape(B, num_modes, T_f, 2)
    logits = out[:, split:]
    return traj, logits


def build_model_store(enc_cfg: ReferenceEncoderConfig, num_modes: int, T_f: int,
                      seed: int, dtype) -> ParamStore:
    rng = rng_stream(seed, STREAM_FT_INIT)
    store = ParamStore(dtype)
    init_encoder(store, enc_cfg, rng)
    init_prediction_head(store, enc_cfg.embed_dim, num_modes, T_f, rng)
    return store


def init_from_pretrained(ckpt_path, store: ParamStore) -> str:
    """Load every ``encoder.*`` tensor from the checkpoint; reset optimizer state.

    Head weights keep their fresh initialization. Raises CheckpointMismatch
    naming any missing or mis-shaped tensor.
    """
    tensors, _, _, ckpt_id = read_checkpoint(ckpt_path)
    enc_names = [n for n in store.names() if n.startswith("encoder.")]
    missing = [n for n in enc_names if n not in tensors]
    if missing:
        raise CheckpointMismatch(f"{ckpt_path}: missing encoder tensors {missing}")
    for n in enc_names:
        p = store[n]
        if tensors[n].shape != p.value.shape:
            raise CheckpointMismatch(
                f"{ckpt_path}: shape mismatch for {n}: {tensors[n].shape} vs {p.value.shape}")
        p.value[...] = tensors[n]
    store.step = 0
    for _, p in store.trainable_items():
        p.m[...] = 0.0
        p.v[...] = 0.0
    return ckpt_id


# ---------------------------------------------------------------------------
# Downstream batches: observed window [0, T_h), future [T_h, T) of the target
# ---------------------------------------------------------------------------

@dataclass
class DownstreamBatch:
    inp: "object"             # EncoderInput over all context agents
    target_flat: np.ndarray   # (B,) index of each scenario's target agent row
    gt_future: np.ndarray     # (B, T_f, 2) in the target agent's frame
    future_valid: np.ndarray  # (B, T_f)
    scenarios: list[Scenario]
    # world->frame transforms of the target agents (for plotting/export)
    trans: np.ndarray
    rot: np.ndarray


def prepare_downstream_batch(scenarios: list[Scenario], enc_cfg: ReferenceEncoderConfig,
                             T_h: int) -> DownstreamBatch | None:
    """Featurize the observed window of every complete agent; returns None if
    no scenario in the chunk has a usable (target-complete) sample."""
    wfs, tgt_flat, gts, fvs, kept, trans, rots = [], [], [], [], [], [], []
    offset = 0
    for s in scenarios:
        ok = s.valid[:, :T_h].all(axis=1)
        rows = np.flatnonzero(ok)
        t_row = s.target_index()
        if t_row not in rows:
            continue
        future_valid = s.valid[t_row, T_h:]
        if not future_valid.any():
            continue
        wf = featurize_window(s, 0, T_h, rows, enc_cfg.k_map)
        pos_in_rows = int(np.flatnonzero(rows == t_row)[0])
        gt_world = s.xy[t_row, T_h:]
        gt_local = (gt_world - wf.trans[pos_in_rows]) @ wf.rot[pos_in_rows].T
        wfs.append(wf)
        tgt_flat.append(offset + pos_in_rows)
        gts.append(gt_local)
        fvs.append(future_valid)
        kept.append(s)
        trans.append(wf.trans[pos_in_rows])
        rots.append(wf.rot[pos_in_rows])
        offset += rows.size
    if not wfs:
        return None
    return DownstreamBatch(
        inp=stack_windows(wfs),
        target_flat=np.asarray(tgt_flat, dtype=np.intp),
        gt_future=np.stack(gts),
        future_valid=np.stack(fvs),
        scenarios=kept,
        trans=np.stack(trans),
        rot=np.stack(rots),
    )


def finetune_forward(prep: DownstreamBatch, store: ParamStore, enc_cfg: ReferenceEncoderConfig,
                     num_modes: int, T_f: int) -> tuple[Tensor, float, float]:
    """Winner-take-all L1 regression plus mode cross-entropy.

    The winning mode per sample has the smallest endpoint error at the last
    valid future step; the regression term covers valid steps only; the
    classification term is cross-entropy against the winning index.
    """
    z = encode(enc_cfg, store, prep.inp)
    z_t = z[prep.target_flat]
    traj, logits = apply_prediction_head(store, z_t, num_modes, T_f)

    B = prep.gt_future.shape[0]
    end = np.array([np.flatnonzero(v)[-1] for v in prep.future_valid])
    ends = traj.data[np.arange(B), :, end]                       # (B, K, 2)
    fde = np.linalg.norm(ends - prep.gt_future[np.arange(B), end][:, None, :], axis=2)
    winner = np.argmin(fde, axis=1)                              # (B,)

    traj_w = traj[np.arange(B), winner]                          # (B, T_f, 2)
    sel = np.nonzero(prep.future_valid)
    diff = traj_w[sel] - np.ascontiguousarray(prep.gt_future[sel], dtype=traj.data.dtype)
    reg = diff.abs().sum() * (1.0 / sel[0].size)

    shift = logits.data.max(axis=1, keepdims=True)
    lse = (logits - shift).exp().sum(axis=1, keepdims=True).log() + shift
    picked = logits[np.arange(B), winner]
    cls = (lse.reshape(B) - picked).mean()

    loss = reg + cls
    return loss, float(reg.item()), float(cls.item())


@dataclass
class FinetuneSettings:
    enc_cfg: ReferenceEncoderConfig
    num_modes: int = 6
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def finetune_step(prep: DownstreamBatch, store: ParamStore, cfg: FinetuneSettings, T_f: int):
    loss, reg, cls = finetune_forward(prep, store, cfg.enc_cfg, cfg.num_modes, T_f)
    store.zero_grads()
    loss.backward()
    adamw_step(store, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    return float(loss.item()), reg, cls


def run_finetune(bank: DataBank, cfg: FinetuneSettings, epochs: int, batch_size: int,
                 seed: int, out_dir, init_ckpt=None, dtype=np.float32,
                 ckpt_name: str = "finetune_final.tssl", log_name: str = "finetune_log.tsv"):
    """Fine-tune (or train from scratch when init_ckpt is None); returns
    (checkpoint_path, log_path, loaded_checkpoint_id_or_empty)."""
    os.makedirs(out_dir, exist_ok=True)
    std = bank.standard
    store = build_model_store(cfg.enc_cfg, cfg.num_modes, std.T_f, seed, dtype)
    loaded = ""
    if init_ckpt is not None:
        loaded = init_from_pretrained(init_ckpt, store)

    log_path = os.path.join(out_dir, log_name)
    ckpt_path = os.path.join(out_dir, ckpt_name)
    k = 0
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write("step\tepoch\tregression\tclassification\tloss\tlr\n")
        for epoch in range(epochs):
            erng = rng_stream(seed, STREAM_FT_EPOCH, epoch)
            order = erng.permutation(len(bank.scenarios))
            for lo in range(0, len(order), batch_size):
                chunk = [bank.scenarios[int(i)] for i in order[lo:lo + batch_size]]
                prep = prepare_downstream_batch(chunk, cfg.enc_cfg, std.T_h)
                if prep is None:
                    continue
                loss, reg, cls = finetune_step(prep, store, cfg, std.T_f)
                fh.write(f"{k}\t{epoch}\t{reg!r}\t{cls!r}\t{loss!r}\t{cfg.lr!r}\n")
                k += 1
            log.info("finetune epoch %d/%d done", epoch + 1, epochs)
    write_checkpoint(store, ckpt_path)
    return ckpt_path, log_path, loaded


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def predict_batch(prep: DownstreamBatch, store: ParamStore, enc_cfg: ReferenceEncoderConfig,
                  num_modes: int, T_f: int) -> list[PredictionSet]:
    z = encode(enc_cfg, store, prep.inp)
    z_t = z[prep.target_flat]
    traj, logits = apply_prediction_head(store, z_t, num_modes, T_f)
    probs = softmax(logits, axis=-1).data
    return [PredictionSet(traj.data[b], probs[b]) for b in range(prep.gt_future.shape[0])]


def evaluate_model(bank: DataBank, store: ParamStore, enc_cfg: ReferenceEncoderConfig,
                   num_modes: int, batch_size: int = 64, miss_threshold: float = 2.0,
                   ade_mode: str = "endpoint_winner") -> MetricsReport:
    """minADE / minFDE / MR of the target agents over a standardized bank."""
    if not bank.scenarios:
        raise EmptyEvaluation("empty scenario list")
    std = bank.standard
    preds, gts, valids = [], [], []
    for lo in range(0, len(bank.scenarios), batch_size):
        chunk = bank.scenarios[lo:lo + batch_size]
        prep = prepare_downstream_batch(chunk, enc_cfg, std.T_h)
        if prep is None:
            continue
        preds.extend(predict_batch(prep, store, enc_cfg, num_modes, std.T_f))
        gts.extend(list(prep.gt_future))
        valids.extend(list(prep.future_valid))
    if not preds:
        raise EmptyEvaluation("no scenario had a usable target agent")
    return evaluate_predictions(preds, gts, valids, miss_threshold, ade_mode)
