"""Deterministic synthetic scenario generator for desk-scale experiments.

All randomness flows through counter-based Philox streams keyed by
(seed, scenario index), so generation is reproducible and order-independent:
the same (profile, seed, index) always yields the same scenario, whether
scenarios are produced serially or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import AgentTrack, Polyline, Scenario, resample_polyline, write_scenarios

LANE_WIDTH = 3.5
SCENE_BOUND = 500.0  # agents stay well inside this radius


def rng_stream(seed: int, *words: int) -> np.random.Generator:
    """Philox generator keyed by a 64-bit seed plus a packed stream id."""
    packed = 0
    for w in words:
        packed = ((packed << 20) ^ (int(w) & 0xFFFFF)) & 0xFFFFFFFFFFFFFFFF
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, packed], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class DatasetProfile:
    """Configuration of one synthetic data source."""

    name: str
    sample_rate: float
    T_h: int
    T_f: int
    map_resolution: float
    agent_count_range: tuple[int, int] = (3, 8)
    speed_range: tuple[float, float] = (5.0, 15.0)
    dropout_prob: float = 0.15
    lane_layouts: tuple[str, ...] = ("straight", "arc", "merge")

    def __post_init__(self):
        if self.agent_count_range[0] < 1 or self.agent_count_range[0] > self.agent_count_range[1]:
            raise ValueError("agent_count_range must be a non-empty positive range")
        if self.speed_range[0] <= 0 or self.speed_range[0] > self.speed_range[1]:
            raise ValueError("speed_range must be a non-empty positive range")
        if not (0.0 <= self.dropout_prob < 1.0):
            raise ValueError("dropout_prob must lie in [0, 1)")
        if not self.lane_layouts:
            raise ValueError("need at least one lane layout")

    @property
    def T(self) -> int:
        return self.T_h + self.T_f


STOCK_PROFILES: dict[str, DatasetProfile] = {
    # horizons mirror the three public motion datasets at 10 Hz:
    # 2s/3s, 5s/6s and 1s/8s of history/future respectively
    "argo-like": DatasetProfile("argo-like", 10.0, 20, 30, 1.0),
    "argo2-like": DatasetProfile("argo2-like", 10.0, 50, 60, 0.5),
    "womd-like": DatasetProfile("womd-like", 10.0, 10, 80, 2.0),
}


# ---------------------------------------------------------------------------
# Lane geometry. A "lane" is a dense centerline (points every ~0.5 m) with
# a cumulative arc-length table for interpolation.
# ---------------------------------------------------------------------------

class _Lane:
    def __init__(self, pts: np.ndarray):
        self.pts = np.asarray(pts, dtype=np.float64)
        seg = np.linalg.norm(np.diff(self.pts, axis=0), axis=1)
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.arc[-1])

    def at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.arc, s, side="right")) - 1
        i = min(max(i, 0), len(self.pts) - 2)
        d = self.arc[i + 1] - self.arc[i]
        a = 0.0 if d <= 0 else (s - self.arc[i]) / d
        return self.pts[i] + a * (self.pts[i + 1] - self.pts[i])

    def tangent(self, s: float) -> np.ndarray:
        i = int(np.searchsorted(self.arc, min(max(s, 0.0), self.length), side="right")) - 1
        i = min(max(i, 0), len(self.pts) - 2)
        t = self.pts[i + 1] - self.pts[i]
        n = np.linalg.norm(t)
        return t / n if n > 0 else np.array([1.0, 0.0])


def _offset_polyline(pts: np.ndarray, offset: float) -> np.ndarray:
    tang = np.gradient(pts, axis=0)
    norms = np.linalg.norm(tang, axis=1, keepdims=True)
    tang = tang / np.maximum(norms, 1e-12)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return pts + offset * normal


def _dense_line(a: np.ndarray, b: np.ndarray, step: float = 0.5) -> np.ndarray:
    n = max(2, int(np.ceil(np.linalg.norm(b - a) / step)) + 1)
    t = np.linspace(0.0, 1.0, n)[:, None]
    return a[None, :] * (1 - t) + b[None, :] * t


def _layout_straight(rng: np.random.Generator) -> list[np.ndarray]:
    theta = rng.uniform(0, 2 * np.pi)
    d = np.array([np.cos(theta), np.sin(theta)])
    normal = np.array([-d[1], d[0]])
    length = rng.uniform(140.0, 220.0)
    center = rng.uniform(-30.0, 30.0, size=2)
    n_lanes = int(rng.integers(2, 4))
    lanes = []
    for k in range(n_lanes):
        off = (k - (n_lanes - 1) / 2) * LANE_WIDTH
        a = center - 0.5 * length * d + off * normal
        b = center + 0.5 * length * d + off * normal
        lanes.append(_dense_line(a, b))
    return lanes


def _layout_arc(rng: np.random.Generator) -> list[np.ndarray]:
    radius = rng.uniform(50.0, 130.0)
    span = rng.uniform(np.radians(70), np.radians(160))
    phi0 = rng.uniform(0, 2 * np.pi)
    center = rng.uniform(-30.0, 30.0, size=2)
    n_lanes = int(rng.integers(2, 4))
    lanes = []
    for k in range(n_lanes):
        r = radius + (k - (n_lanes - 1) / 2) * LANE_WIDTH
        n = max(2, int(np.ceil(r * span / 0.5)) + 1)
        phi = phi0 + np.linspace(0.0, span, n)
        pts = center + r * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        lanes.append(pts)
    return lanes


def _layout_merge(rng: np.random.Generator) -> list[np.ndarray]:
    main = _layout_straight(rng)
    trunk = main[0]
    n = trunk.shape[0]
    half = n // 2
    # ramp starts offset sideways and blends onto the trunk by mid-lane
    tang = trunk[1] - trunk[0]
    tang = tang / np.linalg.norm(tang)
    normal = np.array([-tang[1], tang[0]])
    gap = rng.uniform(8.0, 14.0)
    blend = np.concatenate([np.linspace(1.0, 0.0, half), np.zeros(n - half)])
    ramp = trunk + (gap * blend)[:, None] * normal
    return main + [ramp]


_LAYOUTS = {"straight": _layout_straight, "arc": _layout_arc, "merge": _layout_merge}


# ---------------------------------------------------------------------------
# Agents: pure pursuit along a centerline with clipped speed noise
# ---------------------------------------------------------------------------

def _drive(rng: np.random.Generator, lanes: list[_Lane], lane_idx: int, base_speed: float,
           T: int, dt: float, allow_lane_change: bool) -> np.ndarray:
    lane = lanes[lane_idx]
    s = rng.uniform(0.0, max(1.0, 0.35 * lane.length))
    p = lane.at(s) + rng.uniform(-0.5, 0.5) * np.array([1.0, 1.0]) * 0.3
    h = lane.tangent(s)
    switch_step = -1
    if allow_lane_change and len(lanes) > 1 and rng.random() < 0.3:
        switch_step = int(rng.integers(T // 4, 3 * T // 4))
    out = np.empty((T, 2))
    lookahead = 5.0
    for t in range(T):
        out[t] = p
        if t == switch_step:
            lane_idx = (lane_idx + 1) % len(lanes)
            lane = lanes[lane_idx]
        v = base_speed * (1.0 + float(np.clip(rng.normal(0.0, 0.08), -0.2, 0.2)))
        if s < lane.length - 1.0:
            q = lane.at(s + lookahead)
            d = q - p
            nd = np.linalg.norm(d)
            if nd > 1e-9:
                h = 0.65 * h + 0.35 * d / nd
                h = h / np.linalg.norm(h)
        p = p + v * dt * h
        s = s + v * dt
    return out


def gen_scenario(profile: DatasetProfile, seed: int, index: int = 0) -> Scenario:
    """Generate one scenario; a pure function of (profile, seed, index)."""
    rng = rng_stream(seed, 0, index)
    layout = profile.lane_layouts[int(rng.integers(len(profile.lane_layouts)))]
    raw_lanes = _LAYOUTS[layout](rng)
    lanes = [_Lane(p) for p in raw_lanes]

    polylines = [Polyline("lane", p) for p in raw_lanes]
    polylines.append(Polyline("boundary", _offset_polyline(raw_lanes[0], -LANE_WIDTH / 2)))
    polylines.append(Polyline("boundary", _offset_polyline(raw_lanes[-1], LANE_WIDTH / 2)))
    polylines = [resample_polyline(p, profile.map_resolution) for p in polylines]

    T = profile.T
    dt = 1.0 / profile.sample_rate
    n_agents = int(rng.integers(profile.agent_count_range[0], profile.agent_count_range[1] + 1))
    tracks = []
    for a in range(n_agents):
        kind = "vehicle" if rng.random() < 0.8 else ("cyclist" if rng.random() < 0.5 else "pedestrian")
        base_speed = rng.uniform(*profile.speed_range)
        lane_idx = int(rng.integers(len(lanes)))
        xy = _drive(rng, lanes, lane_idx, base_speed, T, dt, allow_lane_change=a > 0)
        valid = np.ones(T, dtype=bool)
        if a > 0 and rng.random() < profile.dropout_prob:
            span = int(rng.integers(max(1, T // 10), max(2, T // 2)))
            start = int(rng.integers(0, T - span + 1))
            valid[start:start + span] = False
            xy = xy.copy()
            xy[~valid] = 0.0
        tracks.append(AgentTrack(f"a{a:02d}", kind, xy, valid))

    return Scenario(
        id=f"{profile.name}-{index:06d}",
        source=profile.name,
        sample_rate=profile.sample_rate,
        T=T,
        T_h=profile.T_h,
        T_f=profile.T_f,
        target_agent="a00",
        tracks=tracks,
        map=polylines,
    )


def gen_bank(profiles: list[DatasetProfile], counts: list[int], seed: int, out) -> int:
    """Write interchange records for each profile in sequence; returns total."""
    if len(profiles) != len(counts):
        raise ValueError("profiles and counts must have the same length")

    def _all():
        index = 0
        for profile, count in zip(profiles, counts):
            for _ in range(count):
                yield gen_scenario(profile, seed, index)
                index += 1

    return write_scenarios(out, _all())
