"""Collective well-being indicator series.

Every series has one value per state ``s_0 .. s_{H-1}`` (``H`` = horizon) and
is oriented so that higher is better. Episodes that end early are padded to
the horizon: consumption and equality hold their last value, availability
drops to 0 and satiation keeps decaying as if nobody eats again.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .trajectory import Trajectory


@dataclass(frozen=True)
class IndicatorSeries:
    name: str
    values: np.ndarray


@dataclass(frozen=True)
class IndicatorSet:
    series: tuple[IndicatorSeries, ...]

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.series]

    def matrix(self) -> np.ndarray:
        """(K, H) array, one row per indicator."""
        return np.stack([s.values for s in self.series])

    @classmethod
    def from_matrix(cls, names: Sequence[str], mat: np.ndarray) -> "IndicatorSet":
        return cls(tuple(IndicatorSeries(n, np.asarray(v, dtype=float)) for n, v in zip(names, mat)))

    def to_csv(self, path: Union[str, Path]) -> None:
        mat = self.matrix()
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", *self.names])
            for t in range(mat.shape[1]):
                w.writerow([t, *(repr(float(v)) for v in mat[:, t])])


def gini(x) -> float:
    """Gini coefficient ``sum_ij |x_i - x_j| / (2 n sum x)``; 0 for an all-zero vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("gini needs a non-empty 1-d vector")
    if (x < 0).any():
        raise ValueError("gini is undefined for negative entries")
    total = x.sum()
    if total == 0:
        return 0.0
    return float(np.abs(x[:, None] - x[None, :]).sum() / (2 * x.size * total))


def _gini_rows(X: np.ndarray) -> np.ndarray:
    """Row-wise gini of a (T, n) nonnegative matrix."""
    n = X.shape[1]
    total = X.sum(axis=1)
    diff = np.abs(X[:, :, None] - X[:, None, :]).sum(axis=(1, 2))
    out = np.zeros(len(X))
    nz = total > 0
    out[nz] = diff[nz] / (2 * n * total[nz])
    return out


def _pad_hold(x: np.ndarray, H: int) -> np.ndarray:
    if len(x) >= H:
        return x[:H]
    return np.concatenate([x, np.full(H - len(x), x[-1])])


def _pad_zero(x: np.ndarray, H: int) -> np.ndarray:
    if len(x) >= H:
        return x[:H]
    return np.concatenate([x, np.zeros(H - len(x))])


def cumulative_consumption(traj: Trajectory) -> list[IndicatorSeries]:
    H = traj.horizon
    eaten = traj.eaten_counts().astype(float)
    return [IndicatorSeries(f"consumption_{i}", _pad_hold(eaten[:, i], H)) for i in range(traj.n_agents)]


def resource_availability(traj: Trajectory) -> IndicatorSeries:
    return IndicatorSeries("availability", _pad_zero(traj.live_counts().astype(float), traj.horizon))


def equality_series(traj: Trajectory) -> IndicatorSeries:
    vals = 1.0 - _gini_rows(traj.eaten_counts().astype(float))
    return IndicatorSeries("equality", _pad_hold(vals, traj.horizon))


def satiation_values(last_eaten: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``1 / (1 + mean delay)``; an agent that never ate has delay ``t``."""
    delay = np.where(last_eaten >= 0, t[:, None] - last_eaten, t[:, None])
    return 1.0 / (1.0 + delay.mean(axis=1))


def satiation_series(traj: Trajectory) -> IndicatorSeries:
    H = traj.horizon
    last = traj.last_eaten()
    if len(last) < H:
        last = np.concatenate([last, np.repeat(last[-1:], H - len(last), axis=0)])
    last = last[:H]
    return IndicatorSeries("satiation", satiation_values(last, np.arange(H)))


def indicator_names(n_agents: int) -> list[str]:
    return [f"consumption_{i}" for i in range(n_agents)] + ["availability", "equality", "satiation"]


def compute_all(traj: Trajectory) -> IndicatorSet:
    """Per-agent consumption, availability, equality and satiation (K = n + 3)."""
    return IndicatorSet((
        *cumulative_consumption(traj),
        resource_availability(traj),
        equality_series(traj),
        satiation_series(traj),
    ))
