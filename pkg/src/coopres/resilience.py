"""Cooperative-resilience scoring, ranking and preference-pair sampling.

For one indicator and one disruption window ``[t_d, t_end]``:

* ``t_f`` is the first minimiser of the disrupted series on the window,
  ``t_r = t_end``;
* the failure (recovery) profile is the mean disrupted/baseline ratio over
  ``[t_d, t_f)`` (``[t_f, t_r)``), so that ``profile * duration`` is the
  discrete integral of the ratio;
* ``rho_k = (t_d + FP * dt_f + RP * dt_r) / (t_d + dt_f + dt_r)``.

Per-indicator scores are combined across windows and then across indicators
with the harmonic mean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .gridworld import Disruption
from .indicators import IndicatorSet, compute_all
from .trajectory import Trajectory

EPS = 1e-6
RATIO_CAP = 10.0


class ResilienceError(ValueError):
    pass


@dataclass(frozen=True)
class DisruptionWindow:
    t_d: int
    t_end: int

    def __post_init__(self):
        if not 0 < self.t_d < self.t_end:
            raise ResilienceError(f"invalid window [{self.t_d}, {self.t_end}]")


def windows_from_schedule(schedule: Sequence[Disruption], horizon: int) -> list[DisruptionWindow]:
    """One window per disruption; each ends the step before the next one starts."""
    starts = sorted({ev.trigger_step for ev in schedule})
    ends = [s - 1 for s in starts[1:]] + [horizon]
    return [DisruptionWindow(s, e) for s, e in zip(starts, ends)]


@dataclass(frozen=True)
class IndicatorRecord:
    name: str
    window: int
    t_f: int
    t_r: int
    failure_profile: float
    recovery_profile: float
    rho_k: float


@dataclass(frozen=True)
class ResilienceBreakdown:
    records: tuple[IndicatorRecord, ...]
    rho_k: dict  # indicator name -> harmonic mean over windows
    rho: float


@dataclass(frozen=True)
class BaselineProfile:
    indicators: IndicatorSet
    n: int


def build_baseline(trajectories: Sequence[Trajectory]) -> BaselineProfile:
    """Pointwise mean indicator set over undisrupted episodes."""
    if not trajectories:
        raise ResilienceError("baseline needs at least one episode")
    sets = [compute_all(t) for t in trajectories]
    mean = np.mean([s.matrix() for s in sets], axis=0)
    return BaselineProfile(IndicatorSet.from_matrix(sets[0].names, mean), len(sets))


def ratios(baseline: np.ndarray, disrupted: np.ndarray, eps: float = EPS, cap: float = RATIO_CAP) -> np.ndarray:
    """Disrupted/baseline with the baseline floored at ``eps``.

    Where both series are below ``eps`` the ratio is 1: an indicator that is
    zero with and without the disruption has not degraded.
    """
    r = np.clip(disrupted / np.maximum(baseline, eps), 0.0, cap)
    both_zero = (baseline < eps) & (np.abs(disrupted) < eps)
    return np.where(both_zero, 1.0, r)


def profiles(baseline, disrupted, window: DisruptionWindow, eps: float = EPS, cap: float = RATIO_CAP):
    """Return ``(t_f, t_r, failure_profile, recovery_profile)``."""
    baseline = np.asarray(baseline, dtype=float)
    disrupted = np.asarray(disrupted, dtype=float)
    if baseline.shape != disrupted.shape or baseline.ndim != 1:
        raise ResilienceError(f"series shapes differ: {baseline.shape} vs {disrupted.shape}")
    n = len(disrupted)
    if window.t_d >= n:
        raise ResilienceError(f"window starts at {window.t_d} beyond series length {n}")
    t_d, t_r = window.t_d, min(window.t_end, n)
    last = min(window.t_end, n - 1)
    t_f = t_d + int(np.argmin(disrupted[t_d:last + 1]))
    r = ratios(baseline, disrupted, eps, cap)
    fp = float(r[t_d:t_f].mean()) if t_f > t_d else 1.0
    rp = float(r[t_f:t_r].mean()) if t_r > t_f else 1.0
    return t_f, t_r, fp, rp


def indicator_resilience(t_d: int, dt_f: int, dt_r: int, failure_profile: float, recovery_profile: float,
                         eps: float = EPS) -> float:
    if dt_f < 0 or dt_r < 0:
        raise ResilienceError("durations must be nonnegative")
    den = t_d + dt_f + dt_r
    if den == 0:
        raise ResilienceError("zero-length resilience window")
    rho = (t_d + failure_profile * dt_f + recovery_profile * dt_r) / den
    return max(rho, eps)


def aggregate(rhos) -> float:
    """Harmonic mean."""
    rhos = np.asarray(list(rhos), dtype=float)
    if rhos.size == 0:
        raise ResilienceError("cannot aggregate an empty list")
    if (rhos <= 0).any():
        raise ResilienceError("harmonic mean needs positive scores")
    return float(1.0 / np.mean(1.0 / rhos))


def score_indicators(disrupted: IndicatorSet, baseline: BaselineProfile,
                     windows: Sequence[DisruptionWindow]) -> ResilienceBreakdown:
    if disrupted.names != baseline.indicators.names:
        raise ResilienceError(f"indicator sets differ: {disrupted.names} vs {baseline.indicators.names}")
    if not windows:
        raise ResilienceError("need at least one disruption window")
    records = []
    per_indicator = {}
    for d, b in zip(disrupted.series, baseline.indicators.series):
        if len(d.values) != len(b.values):
            raise ResilienceError("trajectory horizon does not match the baseline")
        rks = []
        for w, win in enumerate(windows):
            t_f, t_r, fp, rp = profiles(b.values, d.values, win)
            rk = indicator_resilience(win.t_d, t_f - win.t_d, t_r - t_f, fp, rp)
            records.append(IndicatorRecord(d.name, w, t_f, t_r, fp, rp, rk))
            rks.append(rk)
        per_indicator[d.name] = aggregate(rks)
    return ResilienceBreakdown(tuple(records), per_indicator, aggregate(per_indicator.values()))


def score_trajectory(traj: Trajectory, baseline: BaselineProfile,
                     windows: Sequence[DisruptionWindow]) -> ResilienceBreakdown:
    return score_indicators(compute_all(traj), baseline, windows)


# --- ranking -------------------------------------------------------------

@dataclass(frozen=True)
class RankedEntry:
    trajectory_id: int
    rho: float
    rho_k: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RankedDataset:
    entries: tuple[RankedEntry, ...]
    windows: tuple[DisruptionWindow, ...] = ()

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.trajectory_id for e in self.entries]

    @property
    def rhos(self) -> np.ndarray:
        return np.array([e.rho for e in self.entries])

    def to_json(self) -> dict:
        return {
            "format": "coopres.ranking/1",
            "windows": [[w.t_d, w.t_end] for w in self.windows],
            "entries": [{"trajectory_id": e.trajectory_id, "rho": e.rho, "rho_k": e.rho_k} for e in self.entries],
        }

    @classmethod
    def from_json(cls, d: dict) -> "RankedDataset":
        return cls(
            tuple(RankedEntry(int(e["trajectory_id"]), float(e["rho"]), dict(e.get("rho_k", {}))) for e in d["entries"]),
            tuple(DisruptionWindow(a, b) for a, b in d.get("windows", [])),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RankedDataset":
        return cls.from_json(json.loads(Path(path).read_text()))


def rank(scored, windows: Sequence[DisruptionWindow] = ()) -> RankedDataset:
    """Sort ``(trajectory or id, rho[, rho_k])`` tuples by descending rho, ties by id."""
    entries = []
    for item in scored:
        obj, rho = item[0], item[1]
        rho_k = item[2] if len(item) > 2 else {}
        tid = obj.trajectory_id if isinstance(obj, Trajectory) else int(obj)
        if not np.isfinite(rho):
            raise ResilienceError(f"non-finite score for trajectory {tid}")
        entries.append(RankedEntry(tid, float(rho), dict(rho_k)))
    entries.sort(key=lambda e: (-e.rho, e.trajectory_id))
    return RankedDataset(tuple(entries), tuple(windows))


# --- preference pairs ----------------------------------------------------

@dataclass(frozen=True)
class PreferencePair:
    preferred: int
    other: int
    gap: float


SAMPLING = ("random", "ranked", "mixed")


def sample_pairs(ranked: RankedDataset, strategy: str, count: int, rng: np.random.Generator,
                 mix: float = 0.5, max_retries: int = 100) -> list[PreferencePair]:
    """Draw ``count`` preference pairs.

    ``random`` picks two distinct trajectories uniformly, ``ranked`` walks the
    adjacent pairs of the ranking (cyclically, from a random offset) and
    ``mixed`` takes the ranked route with probability ``mix``. Zero-gap pairs
    are skipped.
    """
    if strategy not in SAMPLING:
        raise ValueError(f"unknown sampling strategy {strategy!r}; expected one of {SAMPLING}")
    n = len(ranked)
    if n < 2:
        raise ResilienceError("need at least 2 trajectories to form pairs")
    if count < 1:
        raise ValueError("count must be positive")
    rho = ranked.rhos
    ids = ranked.ids
    adjacent = np.flatnonzero(rho[:-1] > rho[1:])
    if len(adjacent) == 0:
        raise ResilienceError("no informative pairs: all scores are equal")

    cursor = int(rng.integers(len(adjacent)))

    def ranked_pair():
        nonlocal cursor
        k = adjacent[cursor % len(adjacent)]
        cursor += 1
        return PreferencePair(ids[k], ids[k + 1], float(rho[k] - rho[k + 1]))

    def random_pair():
        for _ in range(max_retries):
            i, j = rng.choice(n, size=2, replace=False)
            if rho[i] != rho[j]:
                if rho[i] < rho[j]:
                    i, j = j, i
                return PreferencePair(ids[i], ids[j], float(rho[i] - rho[j]))
        raise ResilienceError(f"no informative random pair after {max_retries} draws")

    pairs = []
    for _ in range(count):
        if strategy == "ranked":
            pairs.append(ranked_pair())
        elif strategy == "random":
            pairs.append(random_pair())
        else:
            pairs.append(ranked_pair() if rng.random() < mix else random_pair())
    return pairs
