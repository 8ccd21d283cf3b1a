"""Pre-training pretext tasks and the two-branch training loop.

Two objectives share one encoder:
  * a contrastive loss over agent embeddings from two windows of the same
    scenario (positives: same agent across windows; negatives: every other
    agent, within the window and across windows, batch-wide);
  * an L1 reconstruction of a selected trajectory segment decoded from the
    input window's embeddings.

The online branch is gradient-trained; the momentum branch (encoder +
projector copies) only ever moves by EMA and supplies gradient-free targets.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .checkpoint import write_checkpoint
from .encoder import EncoderInput, ReferenceEncoderConfig, WindowFeatures, encode, featurize_window, init_encoder, stack_windows
from .errors import DegenerateEmbedding, EmptyTarget, ShapeError
from .layers import MASK_NEG, apply_batch_norm, apply_layer_norm, apply_linear, init_linear, init_norm
from .optim import EmaSchedule, ParamStore, adamw_step, ema_update, momentum_at
from .sampling import Batch, DataBank, SubScenarioPair, iter_epoch
from .synth import rng_stream

log = logging.getLogger("trajssl.pretext")

RECON_TARGETS = ("input_window", "entire_scenario", "complement_of_input", "other_window")
RECON_SOURCES = ("encoder", "projector")
MOMENTUM_PREFIXES = ("encoder.", "projector.")

STREAM_INIT = 0x11
STREAM_EPOCH = 0x12


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def init_heads(store: ParamStore, embed_dim: int, recon_width: int, rng: np.random.Generator):
    """Projector and contrastive predictor (batch-normalized) plus the
    trajectory decoder (layer-normalized), all 2-layer."""
    for head in ("projector", "predictor"):
        init_linear(store, f"{head}.fc1", embed_dim, embed_dim, rng)
        init_norm(store, f"{head}.bn", embed_dim, running=True)
        init_linear(store, f"{head}.fc2", embed_dim, embed_dim, rng)
    init_linear(store, "decoder.fc1", embed_dim, embed_dim, rng)
    init_norm(store, "decoder.ln", embed_dim)
    init_linear(store, "decoder.fc2", embed_dim, recon_width * 2, rng)


def apply_projector(store: ParamStore, z: Tensor, train: bool) -> Tensor:
    h = apply_linear(store, "projector.fc1", z)
    h = apply_batch_norm(store, "projector.bn", h, train).relu()
    return apply_linear(store, "projector.fc2", h)


def apply_predictor(store: ParamStore, z: Tensor, train: bool) -> Tensor:
    h = apply_linear(store, "predictor.fc1", z)
    h = apply_batch_norm(store, "predictor.bn", h, train).relu()
    return apply_linear(store, "predictor.fc2", h)


def apply_decoder(store: ParamStore, z: Tensor) -> Tensor:
    h = apply_linear(store, "decoder.fc1", z)
    h = apply_layer_norm(store, "decoder.ln", h).relu()
    return apply_linear(store, "decoder.fc2", h)


def make_momentum_store(online: ParamStore) -> ParamStore:
    """Exact copy of the online encoder + projector; never sees gradients."""
    mom = online.select(MOMENTUM_PREFIXES).clone()
    mom.frozen = True
    return mom


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def contrastive_loss(z_online: Tensor, z_momentum: np.ndarray, temperature: float) -> Tensor:
    """Batch-wide InfoNCE over cosine similarities.

    Row i's positive is momentum row i; the denominator pools the online
    rows j != i and every momentum row (including i). Gradients flow into
    z_online only; z_momentum is a detached array.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if z_momentum.shape != z_online.data.shape:
        raise ShapeError(f"embedding sets differ: {z_online.data.shape} vs {z_momentum.shape}")
    N = z_online.data.shape[0]

    mom_norms = np.linalg.norm(z_momentum, axis=1, keepdims=True)
    if np.any(np.linalg.norm(z_online.data, axis=1) == 0.0) or np.any(mom_norms == 0.0):
        raise DegenerateEmbedding("zero-norm embedding in contrastive loss")
    zm = (z_momentum / mom_norms).astype(z_online.data.dtype)

    zn = z_online / (z_online * z_online).sum(axis=1, keepdims=True).sqrt()
    sim_online = zn @ zn.T
    sim_cross = zn @ Tensor(np.ascontiguousarray(zm.T))

    inv_t = 1.0 / temperature
    diag_mask = np.where(np.eye(N, dtype=bool), MASK_NEG, 0.0).astype(z_online.data.dtype)
    logits = concat([sim_online + diag_mask, sim_cross], axis=1) * inv_t

    shift = logits.data.max(axis=1, keepdims=True)
    lse = (logits - shift).exp().sum(axis=1, keepdims=True).log() + shift
    idx = np.arange(N)
    pos = sim_cross[idx, idx] * inv_t
    return (lse.reshape(N) - pos).mean()


def reconstruction_loss(decoded: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Mean L1 distance (|dx| + |dy|) over valid (agent, step) entries only.

    Invalid entries are excluded by indexing, so whatever coordinates they
    carry can never reach the arithmetic.
    """
    if decoded.data.shape != target.shape or valid.shape != target.shape[:2]:
        raise ShapeError(f"decoded {decoded.data.shape} vs target {target.shape} vs valid {valid.shape}")
    sel = np.nonzero(valid)
    n = sel[0].size
    if n == 0:
        raise EmptyTarget("no valid step in reconstruction target")
    diff = decoded[sel] - np.ascontiguousarray(target[sel], dtype=decoded.data.dtype)
    return diff.abs().sum() * (1.0 / n)


def combined_loss(l_c, l_r, weight: float):
    """L = L_c + weight * L_r (either side may be a Tensor or a float)."""
    return l_c + weight * l_r


# ---------------------------------------------------------------------------
# Reconstruction target selection
# ---------------------------------------------------------------------------

def recon_step_indices(variant: str, T: int, T_h: int, t: int, t_prime: int) -> np.ndarray:
    if variant == "input_window":
        return np.arange(t, t + T_h)
    if variant == "entire_scenario":
        return np.arange(T)
    if variant == "complement_of_input":
        return np.concatenate([np.arange(0, t), np.arange(t + T_h, T)])
    if variant == "other_window":
        return np.arange(t_prime, t_prime + T_h)
    raise ValueError(f"unknown reconstruction target {variant!r}")


def recon_width(variant: str, T: int, T_h: int) -> int:
    return {"input_window": T_h, "entire_scenario": T,
            "complement_of_input": T - T_h, "other_window": T_h}[variant]


def select_recon_target(pair: SubScenarioPair, wf_a: WindowFeatures, variant: str):
    """Ground truth for the decoder: step indices' coordinates per eligible
    agent, expressed in the agent's window-a frame, plus their validity."""
    s = pair.scenario
    steps = recon_step_indices(variant, s.T, pair.window_a.horizon,
                               pair.window_a.start, pair.window_b.start)
    xy = s.xy[wf_a.rows][:, steps]
    valid = s.valid[wf_a.rows][:, steps]
    local = np.einsum("aij,atj->ati", wf_a.rot, xy - wf_a.trans[:, None, :])
    return local, valid


# ---------------------------------------------------------------------------
# Batch preparation and the training step
# ---------------------------------------------------------------------------

@dataclass
class PreparedBatch:
    inp_a: EncoderInput
    inp_b: EncoderInput
    target: np.ndarray        # (N, S, 2) in window-a agent frames
    target_valid: np.ndarray  # (N, S)
    N: int


def prepare_batch(batch: Batch, enc_cfg: ReferenceEncoderConfig, variant: str) -> PreparedBatch:
    wfs_a, wfs_b, tgts, tvs = [], [], [], []
    for pair in batch.pairs:
        s = pair.scenario
        wa = featurize_window(s, pair.window_a.start, pair.window_a.horizon,
                              pair.eligible_rows, enc_cfg.k_map)
        wb = featurize_window(s, pair.window_b.start, pair.window_b.horizon,
                              pair.eligible_rows, enc_cfg.k_map)
        tgt, tv = select_recon_target(pair, wa, variant)
        wfs_a.append(wa)
        wfs_b.append(wb)
        tgts.append(tgt)
        tvs.append(tv)
    target = np.concatenate(tgts)
    return PreparedBatch(stack_windows(wfs_a), stack_windows(wfs_b),
                         target, np.concatenate(tvs), target.shape[0])


@dataclass
class StepReport:
    step: int
    epoch: int
    l_c: float
    l_r: float
    loss: float
    m: float
    lr: float


@dataclass
class PretrainSettings:
    enc_cfg: ReferenceEncoderConfig
    temperature: float = 0.1
    recon_weight: float = 1.0
    recon_target: str = "other_window"
    recon_source: str = "encoder"
    tasks: str = "both"  # both | contrastive | reconstruction
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    ema_m0: float = 0.996
    ema_every_n_steps: int = 1


def pretrain_forward(prep: PreparedBatch, online: ParamStore, momentum: ParamStore,
                     cfg: PretrainSettings) -> tuple[Tensor, float, float]:
    """Combined loss of one batch: (loss tensor, contrastive value, recon value).

    Window a goes through the online branch (encoder, projector, predictor);
    window b through the frozen momentum branch (encoder, projector) whose
    output enters the loss as a constant. The decoder reads window a's
    embeddings (raw or projected per ``recon_source``).
    """
    z_a = encode(cfg.enc_cfg, online, prep.inp_a)

    l_c: Tensor | float = 0.0
    if cfg.tasks in ("both", "contrastive"):
        proj_a = apply_projector(online, z_a, train=True)
        pred_a = apply_predictor(online, proj_a, train=True)
        z_b = encode(cfg.enc_cfg, momentum, prep.inp_b)
        proj_b = apply_projector(momentum, z_b, train=True)
        l_c = contrastive_loss(pred_a, proj_b.data, cfg.temperature)

    src = z_a if cfg.recon_source == "encoder" else apply_projector(online, z_a, train=True)
    dec = apply_decoder(online, src)
    S = dec.data.shape[1] // 2
    l_r = reconstruction_loss(dec.reshape(prep.N, S, 2), prep.target, prep.target_valid)

    if cfg.tasks == "reconstruction":
        loss = combined_loss(0.0, l_r, cfg.recon_weight)
    elif cfg.tasks == "contrastive":
        loss = combined_loss(l_c, l_r, 0.0)
    else:
        loss = combined_loss(l_c, l_r, cfg.recon_weight)

    l_c_val = float(l_c.item()) if isinstance(l_c, Tensor) else float(l_c)
    return loss, l_c_val, float(l_r.item())


def pretrain_step(prep: PreparedBatch, online: ParamStore, momentum: ParamStore,
                  schedule: EmaSchedule, k: int, cfg: PretrainSettings) -> StepReport:
    """One optimizer step: forward, backward through the online branch only,
    AdamW, then the EMA move of the momentum branch at the scheduled m(k)."""
    loss, l_c_val, l_r_val = pretrain_forward(prep, online, momentum, cfg)
    m = momentum_at(schedule, k)
    online.zero_grads()
    loss.backward()
    adamw_step(online, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    if cfg.ema_every_n_steps > 0 and (k + 1) % cfg.ema_every_n_steps == 0:
        ema_update(online.select(MOMENTUM_PREFIXES), momentum, m)
    return StepReport(step=k, epoch=-1, l_c=l_c_val, l_r=l_r_val,
                      loss=float(loss.item()), m=m, lr=cfg.lr)


LOG_HEADER = "step\tepoch\tcontrastive\treconstruction\tloss\tema_momentum\tlr\n"


def format_log_row(r: StepReport) -> str:
    return f"{r.step}\t{r.epoch}\t{r.l_c!r}\t{r.l_r!r}\t{r.loss!r}\t{r.m!r}\t{r.lr!r}\n"


def pretrain_loop(bank: DataBank, settings: PretrainSettings, epochs: int, batch_size: int,
                  seed: int, out_dir, dtype=np.float32, checkpoint_every: int = 0):
    """Run the full pre-training schedule; returns (checkpoint_path, log_path).

    The final checkpoint holds the whole online store; fine-tuning picks out
    the ``encoder.*`` tensors.
    """
    os.makedirs(out_dir, exist_ok=True)
    std = bank.standard
    rng = rng_stream(seed, STREAM_INIT)
    online = ParamStore(dtype)
    init_encoder(online, settings.enc_cfg, rng)
    init_heads(online, settings.enc_cfg.embed_dim,
               recon_width(settings.recon_target, std.T, std.T_h), rng)
    momentum = make_momentum_store(online)

    steps_per_epoch = max(1, math.ceil(len(bank) / batch_size))
    schedule = EmaSchedule(m0=settings.ema_m0, total_steps=max(1, epochs * steps_per_epoch))

    log_path = os.path.join(out_dir, "pretrain_log.tsv")
    ckpt_path = os.path.join(out_dir, "pretrain_final.tssl")
    k = 0
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER)
        for epoch in range(epochs):
            erng = rng_stream(seed, STREAM_EPOCH, epoch)
            for batch in iter_epoch(bank, batch_size, erng):
                prep = prepare_batch(batch, settings.enc_cfg, settings.recon_target)
                report = pretrain_step(prep, online, momentum, schedule, k, settings)
                report.epoch = epoch
                fh.write(format_log_row(report))
                k += 1
            if checkpoint_every and (epoch + 1) % checkpoint_every == 0 and epoch + 1 < epochs:
                write_checkpoint(online, os.path.join(out_dir, f"pretrain_epoch{epoch + 1:04d}.tssl"))
            log.info("pretrain epoch %d/%d done (%d steps)", epoch + 1, epochs, k)
    write_checkpoint(online, ckpt_path)
    return ckpt_path, log_path
