"""Static SVG rendering of scenarios and multimodal predictions.

Color convention: map polylines gray, observed history black, ground-truth
future pink, predicted modes blue (with probability labels).
"""

from __future__ import annotations

import numpy as np

from .metrics import PredictionSet
from .scenario import Scenario

MAP_COLOR = "#9e9e9e"
HISTORY_COLOR = "#000000"
FUTURE_COLOR = "#ff69b4"
PREDICTION_COLOR = "#1e6fd9"


def _runs(valid: np.ndarray):
    """Contiguous index runs where valid is true."""
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return
    start = prev = idx[0]
    for i in idx[1:]:
        if i != prev + 1:
            yield start, prev
            start = i
        prev = i
    yield start, prev


class _Canvas:
    def __init__(self, lo: np.ndarray, hi: np.ndarray, width: float = 800.0):
        span = np.maximum(hi - lo, 1e-6)
        self.scale = width / span.max()
        self.lo = lo
        self.height = span[1] * self.scale
        self.width = span[0] * self.scale

    def pt(self, p) -> str:
        x = (p[0] - self.lo[0]) * self.scale
        y = self.height - (p[1] - self.lo[1]) * self.scale
        return f"{x:.2f},{y:.2f}"

    def polyline(self, pts, color: str, width: float, opacity: float = 1.0) -> str:
        joined = " ".join(self.pt(p) for p in pts)
        return (f'<polyline points="{joined}" fill="none" stroke="{color}" '
                f'stroke-width="{width:.2f}" stroke-opacity="{opacity:.2f}"/>')


def export_svg(scenario: Scenario, out_path, T_h: int,
               prediction: PredictionSet | None = None,
               pred_trans: np.ndarray | None = None,
               pred_rot: np.ndarray | None = None) -> None:
    """Write one scene as SVG; predictions arrive in the target agent frame
    together with the (translation, rotation) that maps them back to world."""
    pools = [p.points for p in scenario.map]
    for tr in scenario.tracks:
        if tr.valid.any():
            pools.append(tr.xy[tr.valid])
    allpts = np.concatenate(pools) if pools else np.zeros((1, 2))
    margin = 10.0
    canvas = _Canvas(allpts.min(axis=0) - margin, allpts.max(axis=0) + margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{canvas.width:.0f}" '
        f'height="{canvas.height:.0f}" viewBox="0 0 {canvas.width:.2f} {canvas.height:.2f}">',
        f'<rect width="100%" height="100%" fill="white"/>',
    ]
    for p in scenario.map:
        parts.append(canvas.polyline(p.points, MAP_COLOR, 1.0, 0.8))

    t_row = scenario.target_index()
    for i, tr in enumerate(scenario.tracks):
        hist_v = tr.valid.copy()
        hist_v[T_h:] = False
        for a, b in _runs(hist_v):
            if b > a:
                parts.append(canvas.polyline(tr.xy[a:b + 1], HISTORY_COLOR,
                                             2.2 if i == t_row else 1.2))
        if i == t_row:
            fut_v = tr.valid.copy()
            fut_v[:T_h] = False
            for a, b in _runs(fut_v):
                if b > a:
                    parts.append(canvas.polyline(tr.xy[a:b + 1], FUTURE_COLOR, 2.2))

    if prediction is not None:
        if pred_trans is None or pred_rot is None:
            raise ValueError("predictions need their frame transform for plotting")
        for k in range(prediction.modes.shape[0]):
            world = prediction.modes[k] @ pred_rot + pred_trans
            parts.append(canvas.polyline(world, PREDICTION_COLOR, 1.6, 0.9))
            end = canvas.pt(world[-1]).split(",")
            parts.append(f'<text x="{end[0]}" y="{end[1]}" font-size="10" '
                         f'fill="{PREDICTION_COLOR}">{prediction.probs[k]:.2f}</text>')

    parts.append("</svg>")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
