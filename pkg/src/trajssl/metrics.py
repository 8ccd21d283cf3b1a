"""Multimodal prediction containers and the standard displacement metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyEvaluation

MISS_THRESHOLD_M = 2.0


@dataclass
class PredictionSet:
    """K candidate futures with mode probabilities, in the target's frame."""

    modes: np.ndarray  # (K, T_f, 2)
    probs: np.ndarray  # (K,)

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.modes.ndim != 3 or self.modes.shape[0] != self.probs.shape[0]:
            raise ValueError("modes (K,T_f,2) and probs (K,) disagree")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("mode probabilities must be non-negative and sum to 1")


@dataclass
class MetricsReport:
    min_ade: float
    min_fde: float
    miss_rate: float
    count: int


def _endpoint_index(valid: np.ndarray) -> int:
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        raise ValueError("no valid future step")
    return int(idx[-1])


def score_sample(pred: PredictionSet, gt: np.ndarray, valid: np.ndarray | None = None,
                 miss_threshold: float = MISS_THRESHOLD_M,
                 ade_mode: str = "endpoint_winner") -> tuple[float, float, bool]:
    """(minADE, minFDE, miss) for one target agent.

    The winning mode is the one with minimum endpoint error; minADE is that
    mode's mean per-step error (``ade_mode='best'`` switches to the minimum
    ADE over all modes instead). Invalid future steps are ignored.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.ones(gt.shape[0], dtype=bool)
    end = _endpoint_index(valid)
    fde = np.linalg.norm(pred.modes[:, end] - gt[end], axis=1)
    winner = int(np.argmin(fde))
    min_fde = float(fde[winner])

    dists = np.linalg.norm(pred.modes[:, valid] - gt[valid], axis=2)
    if ade_mode == "best":
        min_ade = float(dists.mean(axis=1).min())
    else:
        min_ade = float(dists[winner].mean())
    return min_ade, min_fde, min_fde > miss_threshold


def evaluate_predictions(preds: list[PredictionSet], gts: list[np.ndarray],
                         valids: list[np.ndarray] | None = None,
                         miss_threshold: float = MISS_THRESHOLD_M,
                         ade_mode: str = "endpoint_winner") -> MetricsReport:
    """Mean minADE/minFDE/MR over target agents (order-independent)."""
    if not preds:
        raise EmptyEvaluation("no prediction to evaluate")
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truths differ in length")
    ades, fdes, misses = [], [], []
    for i, (p, g) in enumerate(zip(preds, gts)):
        v = None if valids is None else valids[i]
        a, f, miss = score_sample(p, g, v, miss_threshold, ade_mode)
        ades.append(a)
        fdes.append(f)
        misses.append(miss)
    return MetricsReport(
        min_ade=float(np.mean(ades)),
        min_fde=float(np.mean(fdes)),
        miss_rate=float(np.mean(misses)),
        count=len(preds),
    )


def write_report(path, report: MetricsReport, config_hash: str, checkpoint_id: str,
                 effective_config: dict | None = None):
    """Delimited metrics file with provenance columns; deterministic bytes."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("minADE\tminFDE\tMR\tcount\tconfig_hash\tcheckpoint_id\n")
        fh.write(f"{report.min_ade!r}\t{report.min_fde!r}\t{report.miss_rate!r}\t"
                 f"{report.count}\t{config_hash}\t{checkpoint_id}\n")
        if effective_config is not None:
            fh.write("# config " + json.dumps(effective_config, sort_keys=True) + "\n")


def read_report(path) -> tuple[MetricsReport, str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
    vals = lines[1].rstrip("\n").split("\t")
    report = MetricsReport(float(vals[0]), float(vals[1]), float(vals[2]), int(vals[3]))
    return report, vals[4], vals[5]
