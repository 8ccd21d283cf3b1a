"""Scenario data model, neutral interchange format, and standardization ops.

Coordinates are meters in an arbitrary global frame, stored as float64.
All types are treated as immutable after construction (arrays are marked
read-only); the operations below are pure functions returning new objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Iterator

import numpy as np

from .errors import DegeneratePolyline, HorizonOverflow, ScenarioRejected

AGENT_TYPES = ("vehicle", "pedestrian", "cyclist", "unknown")
POLYLINE_TAGS = ("lane", "boundary", "other")


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _ro_bool(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=bool)
    a.setflags(write=False)
    return a


@dataclass
class Polyline:
    """A tagged 2-D polyline; ``points`` has shape (P, 2), P >= 2."""

    tag: str
    points: np.ndarray

    def __post_init__(self):
        if self.tag not in POLYLINE_TAGS:
            raise ValueError(f"unknown polyline tag {self.tag!r}")
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("polyline needs shape (P, 2) with P >= 2")
        if not np.all(np.isfinite(pts)):
            raise ValueError("polyline coordinates must be finite")
        self.points = _ro(pts)


@dataclass
class AgentTrack:
    """One agent's track over the scenario horizon.

    ``xy`` has shape (T, 2); ``valid`` has shape (T,). Steps flagged invalid
    carry no information (padding writes (0, 0) there, but readers must mask).
    """

    agent_id: str
    agent_type: str
    xy: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.agent_type not in AGENT_TYPES:
            raise ValueError(f"unknown agent type {self.agent_type!r}")
        xy = np.asarray(self.xy, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if xy.ndim != 2 or xy.shape[1] != 2:
            raise ValueError("track xy needs shape (T, 2)")
        if valid.shape != (xy.shape[0],):
            raise ValueError("track valid mask length must equal T")
        if not np.all(np.isfinite(xy)):
            raise ValueError("track coordinates must be finite")
        self.xy = _ro(xy)
        self.valid = _ro_bool(valid)


@dataclass
class Scenario:
    """One traffic scene: agent tracks plus map polylines."""

    id: str
    source: str
    sample_rate: float
    T: int
    T_h: int
    T_f: int
    target_agent: str
    tracks: list[AgentTrack]
    map: list[Polyline] = field(default_factory=list)

    def __post_init__(self):
        if self.T != self.T_h + self.T_f:
            raise ValueError(f"T={self.T} must equal T_h+T_f={self.T_h + self.T_f}")
        for tr in self.tracks:
            if tr.xy.shape[0] != self.T:
                raise ValueError(f"track {tr.agent_id} horizon {tr.xy.shape[0]} != T={self.T}")
        if self.target_index() < 0:
            raise ValueError(f"target agent {self.target_agent!r} not among tracks")

    def target_index(self) -> int:
        for i, tr in enumerate(self.tracks):
            if tr.agent_id == self.target_agent:
                return i
        return -1

    @cached_property
    def xy(self) -> np.ndarray:
        """Stacked positions, shape (A, T, 2)."""
        return _ro(np.stack([tr.xy for tr in self.tracks]))

    @cached_property
    def valid(self) -> np.ndarray:
        """Stacked validity masks, shape (A, T)."""
        return _ro_bool(np.stack([tr.valid for tr in self.tracks]))

    @cached_property
    def map_points(self) -> np.ndarray:
        """All map vertices pooled, shape (M, 2); empty (0, 2) without a map."""
        if not self.map:
            return _ro(np.zeros((0, 2)))
        return _ro(np.concatenate([p.points for p in self.map]))


@dataclass(frozen=True)
class StandardProfile:
    """Target representation every dataset is standardized to."""

    sample_rate: float
    T_h: int
    T_f: int
    map_resolution: float

    def __post_init__(self):
        if self.T_h < 2 or self.T_f < 1:
            raise ValueError("need T_h >= 2 and T_f >= 1")
        if self.T_f < self.T_h:
            raise ValueError("non-overlapping window sampling needs T_f >= T_h")
        if self.map_resolution <= 0:
            raise ValueError("map resolution must be positive")

    @property
    def T(self) -> int:
        return self.T_h + self.T_f


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def resample_polyline(p: Polyline, delta: float) -> Polyline:
    """Re-space a polyline so consecutive vertices sit roughly ``delta`` apart.

    Segments longer than 1.5*delta are subdivided into equal parts (the new
    vertices lie exactly on the original segment); runs of vertices closer
    than 0.5*delta are merged. Original endpoints are always kept exactly,
    and the operation is an exact no-op on its own output.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    pts = np.asarray(p.points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    if pts.shape[0] < 2 or float(seg.sum()) == 0.0:
        raise DegeneratePolyline(f"polyline has no extent (n={pts.shape[0]})")

    lo, hi = 0.5 * delta, 1.5 * delta
    out = [pts[0]]
    i = 0
    last = pts.shape[0] - 1
    while i < last:
        j = i + 1
        d = float(np.linalg.norm(pts[j] - out[-1]))
        while d < lo and j < last:
            j += 1
            d = float(np.linalg.norm(pts[j] - out[-1]))
        if j == i + 1 and d > hi:
            # subdivision points lie exactly on the input segment
            k = int(np.ceil(d / delta))
            for m in range(1, k):
                out.append(pts[i] + (m / k) * (pts[j] - pts[i]))
        out.append(pts[j])
        i = j
    # keep the final vertex exact; fold a too-short tail into it
    while len(out) >= 3 and float(np.linalg.norm(out[-1] - out[-2])) < lo:
        del out[-2]
    return Polyline(tag=p.tag, points=np.array(out))


def rigid_transform(anchor_xy: np.ndarray, heading: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (translation, rotation) mapping world coords into the frame
    whose origin is ``anchor_xy`` and whose +x axis is ``heading``.

    Zero-length headings fall back to the identity rotation. Apply as
    ``(p - translation) @ rotation.T``.
    """
    n = float(np.hypot(heading[0], heading[1]))
    if n < 1e-12:
        rot = np.eye(2)
    else:
        c, s = heading[0] / n, heading[1] / n
        rot = np.array([[c, s], [-s, c]])
    return np.asarray(anchor_xy, dtype=np.float64), rot


def apply_rigid(points: np.ndarray, translation: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Transform points of shape (..., 2) into the frame from rigid_transform."""
    return (np.asarray(points, dtype=np.float64) - translation) @ rotation.T


# ---------------------------------------------------------------------------
# Standardization operations
# ---------------------------------------------------------------------------

def pad_scenario(s: Scenario, T_target: int) -> Scenario:
    """Append invalid (0, 0) steps so every track reaches ``T_target`` steps."""
    if s.T > T_target:
        raise HorizonOverflow(f"scenario {s.id}: T={s.T} > target {T_target}")
    if s.T == T_target:
        return s
    extra = T_target - s.T
    tracks = [
        AgentTrack(
            agent_id=tr.agent_id,
            agent_type=tr.agent_type,
            xy=np.concatenate([tr.xy, np.zeros((extra, 2))]),
            valid=np.concatenate([tr.valid, np.zeros(extra, dtype=bool)]),
        )
        for tr in s.tracks
    ]
    return replace(s, T=T_target, T_f=T_target - s.T_h, tracks=tracks)


def filter_complete_tracks(s: Scenario, original_T: int | None = None) -> Scenario:
    """Keep only tracks valid at every step below ``original_T`` (default s.T).

    Raises ScenarioRejected when the target agent itself is incomplete.
    """
    cut = s.T if original_T is None else original_T
    kept = [tr for tr in s.tracks if bool(tr.valid[:cut].all())]
    if not any(tr.agent_id == s.target_agent for tr in kept):
        raise ScenarioRejected(f"scenario {s.id}: target agent track is incomplete")
    return replace(s, tracks=kept)


def normalize_frame(s: Scenario, anchor: str, anchor_step: int) -> Scenario:
    """Express the whole scene in the anchor agent's frame at ``anchor_step``.

    The anchor's position at anchor_step becomes the origin and its heading
    (displacement from anchor_step-1 to anchor_step) becomes +x. Invalid
    steps stay (0, 0)/invalid.
    """
    idx = next((i for i, tr in enumerate(s.tracks) if tr.agent_id == anchor), None)
    if idx is None:
        raise ValueError(f"anchor {anchor!r} not in scenario {s.id}")
    if anchor_step < 1 or anchor_step >= s.T:
        raise ValueError("anchor_step must allow a preceding step")
    a = s.tracks[idx]
    if not (a.valid[anchor_step] and a.valid[anchor_step - 1]):
        raise ValueError("anchor must be valid at anchor_step and anchor_step-1")
    trans, rot = rigid_transform(a.xy[anchor_step], a.xy[anchor_step] - a.xy[anchor_step - 1])

    tracks = []
    for tr in s.tracks:
        xy = np.zeros_like(tr.xy)
        xy[tr.valid] = apply_rigid(tr.xy[tr.valid], trans, rot)
        tracks.append(AgentTrack(tr.agent_id, tr.agent_type, xy, tr.valid.copy()))
    polylines = [Polyline(p.tag, apply_rigid(p.points, trans, rot)) for p in s.map]
    return replace(s, tracks=tracks, map=polylines)


def truncate_scenario(s: Scenario, T_target: int) -> Scenario:
    """Keep only the earliest ``T_target`` steps of every track."""
    if s.T <= T_target:
        return s
    tracks = [
        AgentTrack(tr.agent_id, tr.agent_type, tr.xy[:T_target], tr.valid[:T_target])
        for tr in s.tracks
    ]
    T_h = min(s.T_h, T_target - 1)
    return replace(s, T=T_target, T_h=T_h, T_f=T_target - T_h, tracks=tracks)


def subsample_rate(s: Scenario, target_rate: float) -> Scenario:
    """Drop steps to convert an integer-multiple sample rate down to target."""
    if abs(s.sample_rate - target_rate) < 1e-9:
        return s
    ratio = s.sample_rate / target_rate
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise ScenarioRejected(
            f"scenario {s.id}: rate {s.sample_rate} not an integer multiple of {target_rate}"
        )
    tracks = [
        AgentTrack(tr.agent_id, tr.agent_type, tr.xy[::stride], tr.valid[::stride])
        for tr in s.tracks
    ]
    T = tracks[0].xy.shape[0]
    T_h = max(1, min(T - 1, -(-s.T_h // stride)))
    return replace(s, sample_rate=target_rate, T=T, T_h=T_h, T_f=T - T_h, tracks=tracks)


def standardize_scenario(s: Scenario, std: StandardProfile) -> Scenario:
    """Full standardization pipeline: rate, horizon, completeness, map."""
    s = subsample_rate(s, std.sample_rate)
    s = truncate_scenario(s, std.T)
    s = filter_complete_tracks(s)
    s = pad_scenario(s, std.T)
    polylines = [resample_polyline(p, std.map_resolution) for p in s.map]
    return replace(s, T_h=std.T_h, T_f=std.T_f, map=polylines)


# ---------------------------------------------------------------------------
# Interchange format: one JSON object per line
# ---------------------------------------------------------------------------

def scenario_to_record(s: Scenario) -> dict:
    return {
        "id": s.id,
        "source": s.source,
        "sample_rate_hz": s.sample_rate,
        "T": s.T,
        "T_h": s.T_h,
        "T_f": s.T_f,
        "target_agent": s.target_agent,
        "agents": [
            {
                "id": tr.agent_id,
                "type": tr.agent_type,
                "xy": tr.xy.tolist(),
                "valid": tr.valid.tolist(),
            }
            for tr in s.tracks
        ],
        "map": [{"tag": p.tag, "points": p.points.tolist()} for p in s.map],
    }


def scenario_from_record(rec: dict) -> Scenario:
    tracks = [
        AgentTrack(
            agent_id=str(a["id"]),
            agent_type=str(a["type"]),
            xy=np.array(a["xy"], dtype=np.float64).reshape(-1, 2),
            valid=np.array(a["valid"], dtype=bool),
        )
        for a in rec["agents"]
    ]
    polylines = [Polyline(tag=str(m["tag"]), points=np.array(m["points"])) for m in rec.get("map", [])]
    return Scenario(
        id=str(rec["id"]),
        source=str(rec["source"]),
        sample_rate=float(rec["sample_rate_hz"]),
        T=int(rec["T"]),
        T_h=int(rec["T_h"]),
        T_f=int(rec["T_f"]),
        target_agent=str(rec["target_agent"]),
        tracks=tracks,
        map=polylines,
    )


def write_scenarios(path, scenarios: Iterable[Scenario]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_record(s), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def read_scenarios(path) -> Iterator[Scenario]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield scenario_from_record(json.loads(line))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad scenario record: {exc}") from exc
