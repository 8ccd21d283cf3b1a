"""Mixed data bank and two-window sub-scenario sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import EmptyBank, InfeasibleHorizon, PairRejected, ScenarioRejected
from .scenario import Scenario, StandardProfile, read_scenarios, standardize_scenario
from .synth import rng_stream

log = logging.getLogger("trajssl.sampling")

BANK_SHUFFLE_SEED = 0x0BA17


@dataclass
class DataBank:
    """Standardized scenarios mixed by direct concatenation (no balancing)."""

    scenarios: list[Scenario]
    standard: StandardProfile
    rejections: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scenarios)


def build_bank(inputs: Sequence, standard: StandardProfile, shuffle_seed: int = BANK_SHUFFLE_SEED) -> DataBank:
    """Read interchange files, standardize every scenario, shuffle once."""
    kept: list[Scenario] = []
    rejections: dict[str, int] = {}
    for path in inputs:
        for s in read_scenarios(path):
            try:
                kept.append(standardize_scenario(s, standard))
            except ScenarioRejected as exc:
                key = s.source or "unknown"
                rejections[key] = rejections.get(key, 0) + 1
                log.debug("rejected %s: %s", s.id, exc)
    if not kept:
        raise EmptyBank(f"no scenario survived standardization from {list(inputs)}")
    order = rng_stream(shuffle_seed, 1).permutation(len(kept))
    kept = [kept[i] for i in order]
    if rejections:
        log.info("bank rejections by source: %s", rejections)
    return DataBank(scenarios=kept, standard=standard, rejections=rejections)


@dataclass(frozen=True)
class SubScenario:
    scenario: Scenario
    start: int
    horizon: int

    @property
    def stop(self) -> int:
        return self.start + self.horizon


@dataclass(frozen=True)
class SubScenarioPair:
    """Two non-overlapping windows over one scenario.

    ``window_a`` is the reconstruction-input window (start t); ``window_b``
    provides the contrastive targets (start t'). ``eligible_rows`` indexes
    scenario.tracks for the agents valid at every step of both windows.
    """

    window_a: SubScenario
    window_b: SubScenario
    eligible_rows: tuple[int, ...]

    @property
    def scenario(self) -> Scenario:
        return self.window_a.scenario

    @property
    def eligible(self) -> tuple[str, ...]:
        return tuple(self.scenario.tracks[i].agent_id for i in self.eligible_rows)


@dataclass(frozen=True)
class Batch:
    """A list of pairs plus the flat agent order defining N."""

    pairs: tuple[SubScenarioPair, ...]
    # (pair index, track row) per flattened agent, in deterministic order
    agent_index: tuple[tuple[int, int], ...]

    @property
    def N(self) -> int:
        return len(self.agent_index)


def window_complete(s: Scenario, horizon: int) -> np.ndarray:
    """(A, T-horizon+1) bool: track fully valid on [t, t+horizon)."""
    v = s.valid.astype(np.int32)
    c = np.cumsum(v, axis=1)
    c = np.concatenate([np.zeros((v.shape[0], 1), dtype=np.int32), c], axis=1)
    counts = c[:, horizon:] - c[:, :-horizon]
    return counts == horizon


def _feasible_starts(t: int, n_starts: int, T_h: int) -> np.ndarray:
    starts = np.arange(n_starts)
    return starts[np.abs(starts - t) >= T_h]


def sample_pair(s: Scenario, T_h: int, rng: np.random.Generator) -> SubScenarioPair:
    """Draw (t, t') uniformly per the two-stage scheme, then agent eligibility.

    t is drawn uniformly over all window starts and t' uniformly over the
    starts at least T_h away; draws whose windows share no fully-valid agent
    are redrawn, falling back to exhaustive enumeration before rejecting the
    scenario outright.
    """
    if s.T < 2 * T_h:
        raise InfeasibleHorizon(f"scenario {s.id}: T={s.T} < 2*T_h={2 * T_h}")
    n_starts = s.T - T_h + 1
    ok = window_complete(s, T_h)

    def _pair(t: int, tp: int) -> SubScenarioPair | None:
        rows = np.flatnonzero(ok[:, t] & ok[:, tp])
        if rows.size == 0:
            return None
        return SubScenarioPair(
            window_a=SubScenario(s, int(t), T_h),
            window_b=SubScenario(s, int(tp), T_h),
            eligible_rows=tuple(int(r) for r in rows),
        )

    for _ in range(64):
        t = int(rng.integers(n_starts))
        feas = _feasible_starts(t, n_starts, T_h)
        if feas.size == 0:
            continue
        tp = int(feas[rng.integers(feas.size)])
        pair = _pair(t, tp)
        if pair is not None:
            return pair

    # rare: enumerate every feasible ordered pair before giving up
    good = [
        (t, tp)
        for t in range(n_starts)
        for tp in _feasible_starts(t, n_starts, T_h)
        if _pair(t, int(tp)) is not None
    ]
    if not good:
        raise PairRejected(f"scenario {s.id}: no eligible agent in any feasible pair")
    t, tp = good[int(rng.integers(len(good)))]
    return _pair(int(t), int(tp))


def assemble_batch(pairs: list[SubScenarioPair]) -> Batch:
    agent_index = tuple(
        (pi, row) for pi, pair in enumerate(pairs) for row in pair.eligible_rows
    )
    return Batch(pairs=tuple(pairs), agent_index=agent_index)


_assemble = assemble_batch


def make_batch(bank: DataBank, size: int, rng: np.random.Generator) -> Batch:
    """Sample ``size`` distinct scenarios and pair-sample each."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    idx = rng.choice(len(bank.scenarios), size=min(size, len(bank.scenarios)), replace=False)
    pairs = []
    for i in idx:
        try:
            pairs.append(sample_pair(bank.scenarios[int(i)], bank.standard.T_h, rng))
        except PairRejected:
            log.debug("skipping pair-rejected scenario %s", bank.scenarios[int(i)].id)
    if not pairs:
        raise PairRejected("every sampled scenario was pair-rejected")
    return _assemble(pairs)


def iter_epoch(bank: DataBank, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """Yield batches covering each bank scenario at most once (one epoch).

    Pair-rejected scenarios are skipped and counted; the final batch may be
    shorter but is never empty.
    """
    order = rng.permutation(len(bank.scenarios))
    pairs: list[SubScenarioPair] = []
    skipped = 0
    for i in order:
        try:
            pairs.append(sample_pair(bank.scenarios[int(i)], bank.standard.T_h, rng))
        except PairRejected:
            skipped += 1
            continue
        if len(pairs) == batch_size:
            yield _assemble(pairs)
            pairs = []
    if pairs:
        yield _assemble(pairs)
    if skipped:
        log.info("epoch skipped %d pair-rejected scenarios", skipped)
