"""Reference trajectory encoder: per-step MLP, valid-step mean pooling, and
one radius-masked attention round over the agents of each scenario window.

Any backbone satisfying the same contract can replace it: encode() maps a
window's agent states plus map context to one embedding row per agent, reads
parameters from a ParamStore under ``encoder.*``, and never looks at steps
outside the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import Tensor
from .layers import MASK_NEG, apply_linear, attention, init_linear
from .optim import ParamStore
from .scenario import Scenario


@dataclass(frozen=True)
class ReferenceEncoderConfig:
    embed_dim: int = 64
    hidden_dim: int = 64
    k_map: int = 4
    attention_radius: float = 50.0

    def __post_init__(self):
        if self.embed_dim < 8 or self.hidden_dim < 8:
            raise ValueError("embed_dim and hidden_dim must be >= 8")
        if self.k_map < 0:
            raise ValueError("k_map must be >= 0")

    @property
    def feature_dim(self) -> int:
        # (dx, dy, valid) per step plus k offsets to nearby map points
        return 3 + 2 * self.k_map


def init_encoder(store: ParamStore, cfg: ReferenceEncoderConfig, rng: np.random.Generator):
    init_linear(store, "encoder.step1", cfg.feature_dim, cfg.hidden_dim, rng)
    init_linear(store, "encoder.step2", cfg.hidden_dim, cfg.embed_dim, rng)
    init_linear(store, "encoder.attn_q", cfg.embed_dim, cfg.embed_dim, rng)
    init_linear(store, "encoder.attn_k", cfg.embed_dim, cfg.embed_dim, rng)


@dataclass
class WindowFeatures:
    """Per-agent features for one temporal window, in each agent's own frame
    anchored at the window's last step."""

    rows: np.ndarray        # (A,) track indices into scenario.tracks
    features: np.ndarray    # (A, T_h, F)
    valid: np.ndarray       # (A, T_h) bool
    trans: np.ndarray       # (A, 2) anchor positions (world)
    rot: np.ndarray         # (A, 2, 2) world->agent rotations
    end_pos: np.ndarray     # (A, 2) anchor positions (world), for the radius mask


def _agent_rotations(headings: np.ndarray) -> np.ndarray:
    """(A, 2, 2) rotations sending each heading to +x; identity when zero."""
    norms = np.linalg.norm(headings, axis=1)
    safe = np.where(norms < 1e-12, 1.0, norms)
    c = np.where(norms < 1e-12, 1.0, headings[:, 0] / safe)
    s = np.where(norms < 1e-12, 0.0, headings[:, 1] / safe)
    rot = np.empty((headings.shape[0], 2, 2))
    rot[:, 0, 0] = c
    rot[:, 0, 1] = s
    rot[:, 1, 0] = -s
    rot[:, 1, 1] = c
    return rot


def scenario_knn(scenario: Scenario, k: int) -> np.ndarray | None:
    """(A, T, k') indices of the k nearest map points per agent step,
    k' = min(k, map size); cached on the scenario (the selection depends only
    on world geometry, never on the window or frame)."""
    cache = scenario.__dict__.setdefault("_knn_cache", {})
    if k not in cache:
        m_pts = scenario.map_points
        if m_pts.shape[0] == 0:
            cache[k] = None
        else:
            kk = min(k, m_pts.shape[0])
            _, idx = cKDTree(m_pts).query(scenario.xy.reshape(-1, 2), k=kk)
            A, T = scenario.xy.shape[:2]
            cache[k] = np.asarray(idx, dtype=np.int32).reshape(A, T, kk)
    return cache[k]


def featurize_window(scenario: Scenario, start: int, horizon: int, rows,
                     k_map: int, knn: np.ndarray | None = None) -> WindowFeatures:
    """Build motion + map features for the given agents over [start, start+horizon).

    Map offsets are inputs only; nothing differentiates through them. Only
    steps inside the window are ever read, and invalid steps inside the
    window contribute zero features with a zero valid flag.
    """
    rows = np.asarray(rows, dtype=np.intp)
    stop = start + horizon
    xy = scenario.xy[rows, start:stop]          # (A, T_h, 2)
    valid = scenario.valid[rows, start:stop]    # (A, T_h)

    anchor = xy[:, -1]
    heading = xy[:, -1] - xy[:, -2]
    rot = _agent_rotations(heading)

    local = np.einsum("aij,atj->ati", rot, xy - anchor[:, None, :])
    disp = np.zeros_like(local)
    disp[:, 1:] = local[:, 1:] - local[:, :-1]
    # steps adjacent to an invalid step carry no trustworthy displacement
    ok_pair = valid[:, 1:] & valid[:, :-1]
    disp[:, 1:][~ok_pair] = 0.0
    disp[~valid] = 0.0

    parts = [disp, valid[:, :, None].astype(np.float64)]
    if k_map > 0:
        A, T_h = xy.shape[0], xy.shape[1]
        offsets = np.zeros((A, T_h, k_map, 2))
        m_pts = scenario.map_points
        if m_pts.shape[0] > 0:
            if knn is None:
                knn = scenario_knn(scenario, k_map)
            idx = knn[rows, start:stop]                       # (A, T_h, k')
            sel = m_pts[idx]                                  # (A, T_h, k', 2) world
            sel_local = np.einsum("aij,atkj->atki", rot, sel - anchor[:, None, None, :])
            offsets[:, :, :idx.shape[2]] = sel_local - local[:, :, None, :]
            offsets[~valid] = 0.0
        parts.append(offsets.reshape(A, T_h, 2 * k_map))
    features = np.concatenate(parts, axis=2)
    return WindowFeatures(rows=rows, features=features, valid=valid,
                          trans=anchor, rot=rot, end_pos=anchor)


@dataclass
class EncoderInput:
    """Flattened window features for a whole batch of scenario windows."""

    features: np.ndarray   # (N, T_h, F)
    valid: np.ndarray      # (N, T_h) bool
    groups: np.ndarray     # (N,) scenario index within the batch
    end_pos: np.ndarray    # (N, 2) world anchor positions


def stack_windows(windows: list[WindowFeatures]) -> EncoderInput:
    groups = np.concatenate([
        np.full(w.features.shape[0], gi, dtype=np.intp) for gi, w in enumerate(windows)
    ])
    return EncoderInput(
        features=np.concatenate([w.features for w in windows]),
        valid=np.concatenate([w.valid for w in windows]),
        groups=groups,
        end_pos=np.concatenate([w.end_pos for w in windows]),
    )


def encode(cfg: ReferenceEncoderConfig, store: ParamStore, inp: EncoderInput) -> Tensor:
    """(N, D) embeddings; deterministic and pure given (store, inp)."""
    N, T_h, F = inp.features.shape
    x = Tensor(np.ascontiguousarray(inp.features.reshape(N * T_h, F), dtype=store.dtype))
    h = apply_linear(store, "encoder.step1", x).relu()
    e = apply_linear(store, "encoder.step2", h)
    e3 = e.reshape(N, T_h, cfg.embed_dim)

    counts = np.maximum(inp.valid.sum(axis=1, keepdims=True), 1)
    weights = (inp.valid / counts).astype(store.dtype)
    pooled3 = e3 * weights[:, :, None]
    pooled = pooled3.sum(axis=1)

    q = apply_linear(store, "encoder.attn_q", pooled)
    k = apply_linear(store, "encoder.attn_k", pooled)
    same = inp.groups[:, None] == inp.groups[None, :]
    d2 = ((inp.end_pos[:, None, :] - inp.end_pos[None, :, :]) ** 2).sum(axis=2)
    within = d2 <= cfg.attention_radius ** 2
    mask = np.where(same & within, 0.0, MASK_NEG).astype(store.dtype)
    return attention(q, k, pooled, mask)
