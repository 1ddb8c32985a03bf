"""Multi-disruption evaluation protocol, metrics, statistics and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .gridworld import (
    AgentFailure,
    AppleRemoval,
    Disruption,
    GridConfig,
    RegrowthScale,
    disruption_from_dict,
    disruption_to_dict,
    validate_schedule,
)
from .indicators import IndicatorSet, compute_all, indicator_names
from .resilience import BaselineProfile, score_indicators, windows_from_schedule
from .stats import benjamini_hochberg, bonferroni, mann_whitney_u
from .training import PolicySet, episode_seeds, rollout
from .trajectory import Trajectory

METRICS = ("rho", "total_consumption", "episode_length")


@dataclass
class EvalProtocol:
    n_episodes: int
    horizon: int
    schedule: tuple
    baseline_episodes: int = 20

    def __post_init__(self):
        self.schedule = tuple(disruption_from_dict(e) if isinstance(e, dict) else e for e in self.schedule)
        if self.n_episodes < 1 or self.baseline_episodes < 1:
            raise ValueError("episode counts must be positive")
        if not self.schedule:
            raise ValueError("the protocol needs at least one disruption")
        validate_schedule(self.schedule, self.horizon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [disruption_to_dict(e) for e in self.schedule]
        return d


def triple_disruption_protocol(n_episodes: int = 500, horizon: int = 5000, removal_prob: float = 0.5,
                               regrowth_factor: float = 0.1, regrowth_duration: int = 500,
                               failing_agent: int = 0, baseline_episodes: int = 20) -> EvalProtocol:
    """Removal at 1250, regrowth slowdown at 2500, agent failure 3750-3900 (scaled to ``horizon``)."""
    q = horizon // 4
    schedule = (
        AppleRemoval(removal_prob, q),
        RegrowthScale(regrowth_factor, regrowth_duration, 2 * q),
        AgentFailure(failing_agent, 3 * q, 3 * q + 150 * horizon // 5000),
    )
    return EvalProtocol(n_episodes, horizon, schedule, baseline_episodes)


def removal_protocol(n_episodes: int = 50, horizon: int = 2000, removal_step: int = 300,
                     removal_prob: float = 0.5, baseline_episodes: int = 20) -> EvalProtocol:
    return EvalProtocol(n_episodes, horizon, (AppleRemoval(removal_prob, removal_step),), baseline_episodes)


@dataclass(frozen=True)
class EpisodeMetrics:
    rho: float
    total_consumption: int
    episode_length: int
    last_apple: bool
    consumption: tuple  # per agent
    rho_k: dict = field(default_factory=dict)


@dataclass
class EvalResult:
    metrics: list
    position_maps: np.ndarray  # (n_agents, H, W) visit counts
    baseline: BaselineProfile
    protocol: EvalProtocol
    trajectories: Optional[list] = None


def _with_horizon(env: GridConfig, horizon: int) -> GridConfig:
    return GridConfig(**{**env.__dict__, "horizon": horizon})


def _baseline_job(args):
    policies, env, seed = args
    traj = rollout(policies, env, (), seed)
    return compute_all(traj).matrix()


def _episode_job(args):
    policies, env, schedule, seed, k, baseline, keep = args
    traj = rollout(policies, env, schedule, seed, trajectory_id=k)
    br = score_indicators(compute_all(traj), baseline, windows_from_schedule(schedule, env.horizon))
    counts = np.zeros((env.n_agents, env.height, env.width), dtype=np.int64)
    pos = traj.positions[1:].astype(np.int64)
    for i in range(env.n_agents):
        np.add.at(counts[i], (pos[:, i, 0], pos[:, i, 1]), 1)
    m = EpisodeMetrics(
        rho=br.rho,
        total_consumption=int(traj.consumed.sum()),
        episode_length=traj.n_steps,
        last_apple=traj.last_apple_eaten,
        consumption=tuple(int(c) for c in traj.consumed.sum(axis=0)),
        rho_k=br.rho_k,
    )
    return m, counts, (traj if keep else None)


def _map(fn, jobs, threads: int):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def run_protocol(policies: PolicySet, env: GridConfig, protocol: EvalProtocol, seed: int = 0,
                 threads: int = 1, keep_trajectories: bool = False) -> EvalResult:
    """Baseline episodes without disruption, then scored disrupted episodes.

    Episodes are seeded independently and results are gathered in episode
    order, so the output does not depend on ``threads``.
    """
    env = _with_horizon(env, protocol.horizon)
    base_seeds = episode_seeds(int(np.random.SeedSequence([seed, 0]).generate_state(1)[0]),
                               protocol.baseline_episodes)
    eval_seeds = episode_seeds(int(np.random.SeedSequence([seed, 1]).generate_state(1)[0]), protocol.n_episodes)
    mats = _map(_baseline_job, [(policies, env, s) for s in base_seeds], threads)
    names = indicator_names(env.n_agents)
    baseline = BaselineProfile(IndicatorSet.from_matrix(names, np.mean(mats, axis=0)), len(mats))
    jobs = [(policies, env, protocol.schedule, s, k, baseline, keep_trajectories) for k, s in enumerate(eval_seeds)]
    out = _map(_episode_job, jobs, threads)
    metrics = [m for m, _, _ in out]
    maps = np.sum([c for _, c, _ in out], axis=0)
    trajs = [t for _, _, t in out] if keep_trajectories else None
    return EvalResult(metrics, maps, baseline, protocol, trajs)


def last_apple_frequency(metrics: Sequence[EpisodeMetrics]) -> float:
    if not metrics:
        raise ValueError("no episodes")
    return sum(m.last_apple for m in metrics) / len(metrics)


@dataclass(frozen=True)
class StatTestResult:
    metric: str
    group_a: str
    group_b: str
    U: float
    p: float
    p_adjusted: float
    rejected: bool
    median_a: float
    median_b: float


def compare_groups(groups: dict, comparisons: Sequence[tuple[str, str]], metrics: Sequence[str] = METRICS,
                   alpha: float = 0.05, correction: str = "bh") -> list[StatTestResult]:
    """Mann-Whitney U per (comparison, metric); one correction over the whole family."""
    raw = []
    for a, b in comparisons:
        for metric in metrics:
            xa = [float(getattr(m, metric)) for m in groups[a]]
            xb = [float(getattr(m, metric)) for m in groups[b]]
            U, p = mann_whitney_u(xa, xb)
            raw.append((metric, a, b, U, p, float(np.median(xa)), float(np.median(xb))))
    if not raw:
        return []
    if correction == "bh":
        adj = benjamini_hochberg([r[4] for r in raw], alpha)
    elif correction == "bonferroni":
        adj = bonferroni([r[4] for r in raw], alpha)
    else:
        raise ValueError(f"unknown correction {correction!r}")
    return [StatTestResult(m, a, b, U, p, pa, rej, ma, mb) for (m, a, b, U, p, ma, mb), (pa, rej) in zip(raw, adj)]


def summarize(metrics: Sequence[EpisodeMetrics]) -> dict:
    out = {"n_episodes": len(metrics)}
    for name in METRICS:
        x = np.array([getattr(m, name) for m in metrics], dtype=float)
        out[name] = {"mean": float(x.mean()), "median": float(np.median(x)), "std": float(x.std())}
    out["last_apple_count"] = int(sum(m.last_apple for m in metrics))
    out["last_apple_frequency"] = last_apple_frequency(metrics)
    return out


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def export_report(out_dir: Union[str, Path], experiment_id: str, results: dict, tests: Sequence[StatTestResult],
                  config: dict) -> Path:
    """Write ``{out}/{experiment_id}/{policy}/metrics.csv, summary.json, posmap_agent{i}.csv``.

    Files are rendered in memory first and moved into place only once every
    one of them is ready, so a failure leaves no partial report behind.
    """
    if not results or any(not r.metrics for r in results.values()):
        raise ValueError("cannot export a report without episodes")
    config_text = _dumps(config)
    tag = f"# coopres {__version__} config_sha256={hashlib.sha256(config_text.encode()).hexdigest()}\n"
    files: dict[str, str] = {"config.json": config_text}
    test_rows = [asdict(t) for t in tests]
    top = {"version": __version__, "config": config, "groups": {}, "tests": test_rows,
           "notes": "rho per episode: harmonic mean over windows per indicator, then over indicators"}
    for name, res in results.items():
        summary = summarize(res.metrics)
        summary["protocol"] = res.protocol.to_dict()
        summary["baseline_episodes"] = res.baseline.n
        top["groups"][name] = summary
        files[f"{name}/summary.json"] = _dumps({
            "version": __version__,
            "config": config,
            "policy": name,
            "summary": summary,
            "tests": [t for t in test_rows if name in (t["group_a"], t["group_b"])],
        })
        buf = io.StringIO()
        buf.write(tag)
        n_agents = len(res.metrics[0].consumption)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", *METRICS, "last_apple", *[f"consumption_{i}" for i in range(n_agents)]])
        for k, m in enumerate(res.metrics):
            w.writerow([k, repr(m.rho), m.total_consumption, m.episode_length, int(m.last_apple), *m.consumption])
        files[f"{name}/metrics.csv"] = buf.getvalue()
        for i, grid in enumerate(res.position_maps):
            buf = io.StringIO()
            buf.write(tag)
            csv.writer(buf, lineterminator="\n").writerows(grid.tolist())
            files[f"{name}/posmap_agent{i}.csv"] = buf.getvalue()
    if tests:
        buf = io.StringIO()
        buf.write(tag)
        w = csv.DictWriter(buf, fieldnames=list(test_rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(test_rows)
        files["tests.csv"] = buf.getvalue()
    files["summary.json"] = _dumps(top)

    dest = Path(out_dir) / experiment_id
    try:
        dest.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=".report-", dir=dest.parent))
        for rel, text in files.items():
            p = staging / rel
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        if dest.exists():
            shutil.rmtree(dest)
        staging.rename(dest)
    except OSError as exc:
        raise OSError(f"could not write report to {dest}: {exc}") from exc
    return dest
