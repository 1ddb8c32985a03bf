"""Recorded episodes and their JSON-lines serialization.

A dataset file is a concatenation of trajectories. Each trajectory starts
with a ``header`` record (config, disruption schedule, seed, the nonzero
entries of the initial state encoding) followed by one ``step`` record per
environment step holding the encoding indices that flipped, the joint action
and the consumption flags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .gridworld import (
    Disruption,
    GridConfig,
    GridState,
    StepOutcome,
    apply_disruption,
    disruption_from_dict,
    disruption_to_dict,
    geometry,
    reset,
    step,
    validate_schedule,
)

FORMAT_TAG = "coopres.trajectory/1"


@dataclass
class Trajectory:
    """States ``s_0 .. s_T``, actions and consumption flags of ``T`` steps."""

    config: GridConfig
    positions: np.ndarray  # (T+1, n, 2)
    apples: np.ndarray  # (T+1, H, W) bool
    trees_alive: np.ndarray  # (T+1, n_trees) bool
    actions: np.ndarray  # (T, n)
    consumed: np.ndarray  # (T, n) bool
    schedule: tuple = ()
    seed: Optional[int] = None
    trajectory_id: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.actions)

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def n_agents(self) -> int:
        return self.config.n_agents

    @property
    def last_apple_eaten(self) -> bool:
        return bool(self.n_steps and self.consumed[-1].any() and not self.apples[-1].any())

    def live_counts(self) -> np.ndarray:
        return self.apples.reshape(len(self.apples), -1).sum(axis=1)

    def eaten_counts(self) -> np.ndarray:
        """(T+1, n) cumulative apples eaten, indexed by state."""
        out = np.zeros((self.n_steps + 1, self.n_agents), dtype=np.int64)
        np.cumsum(self.consumed, axis=0, out=out[1:])
        return out

    def last_eaten(self) -> np.ndarray:
        """(T+1, n) step of each agent's latest meal at every state, -1 if none."""
        T, n = self.n_steps, self.n_agents
        marks = np.full((T + 1, n), -1, dtype=np.int64)
        steps = np.arange(1, T + 1)[:, None]
        marks[1:] = np.where(self.consumed, steps, -1)
        return np.maximum.accumulate(marks, axis=0)

    def state(self, t: int) -> GridState:
        """Rebuild ``s_t`` (disruption side effects are not tracked)."""
        if not 0 <= t <= self.n_steps:
            raise IndexError(t)
        eaten = self.eaten_counts()[t]
        last = self.last_eaten()[t]
        n_live = int(self.apples[t].sum())
        return GridState(
            config=self.config,
            agent_positions=self.positions[t].astype(np.int64),
            apples=self.apples[t].copy(),
            trees_alive=self.trees_alive[t].copy(),
            t=t,
            terminated=n_live == 0 or t >= self.config.horizon,
            eaten=eaten,
            last_eaten=last,
        )

    def states(self) -> Iterator[GridState]:
        for t in range(self.n_steps + 1):
            yield self.state(t)


PolicyFn = Callable[[GridState, np.random.Generator], np.ndarray]
StepHook = Callable[[GridState, np.ndarray, GridState, StepOutcome], None]


def simulate(
    config: GridConfig,
    policy: PolicyFn,
    seed: int,
    schedule: Sequence[Disruption] = (),
    on_step: Optional[StepHook] = None,
    trajectory_id: int = 0,
) -> Trajectory:
    """Run one episode to termination.

    ``policy(state, rng)`` returns the joint action. Agents inside an active
    :class:`AgentFailure` window get uniform-random actions instead.
    ``on_step`` sees every transition (used by the trainer to collect rewards).
    """
    validate_schedule(schedule, config.horizon)
    state = reset(config, seed)
    env_rng = np.random.default_rng([seed, 1])
    act_rng = np.random.default_rng([seed, 2])
    fail_rng = np.random.default_rng([seed, 3])
    H, n = config.horizon, config.n_agents
    positions = np.empty((H + 1, n, 2), dtype=np.int16)
    apples = np.empty((H + 1, config.height, config.width), dtype=bool)
    trees = np.empty((H + 1, len(config.trees)), dtype=bool)
    actions = np.empty((H, n), dtype=np.int8)
    consumed = np.empty((H, n), dtype=bool)
    pending = list(schedule)
    k = 0
    while True:
        while pending and pending[0].trigger_step == state.t and not state.terminated:
            state = apply_disruption(state, pending.pop(0), env_rng)
        positions[k], apples[k], trees[k] = state.agent_positions, state.apples, state.trees_alive
        if state.terminated:
            break
        a = np.asarray(policy(state, act_rng), dtype=np.int64)
        failed = state.failed_agents()
        if failed:
            a = a.copy()
            a[failed] = fail_rng.integers(0, 5, size=len(failed))
        nxt, out = step(state, a, env_rng)
        actions[k], consumed[k] = a, out.consumed
        if on_step is not None:
            on_step(state, a, nxt, out)
        state = nxt
        k += 1
    return Trajectory(
        config=config,
        positions=positions[: k + 1].copy(),
        apples=apples[: k + 1].copy(),
        trees_alive=trees[: k + 1].copy(),
        actions=actions[:k].copy(),
        consumed=consumed[:k].copy(),
        schedule=tuple(schedule),
        seed=seed,
        trajectory_id=trajectory_id,
    )


def uniform_policy(state: GridState, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 5, size=state.config.n_agents)


# --- serialization -------------------------------------------------------

def _encoding_rows(traj: Trajectory) -> np.ndarray:
    """(T+1, D-1) boolean state encodings without the time entry."""
    cfg = traj.config
    hw = cfg.width * cfg.height
    T1 = traj.n_steps + 1
    enc = np.zeros((T1, (1 + cfg.n_agents) * hw), dtype=bool)
    enc[:, :hw] = traj.apples.reshape(T1, hw)
    flat = traj.positions[:, :, 0].astype(np.int64) * cfg.width + traj.positions[:, :, 1]
    for i in range(cfg.n_agents):
        enc[np.arange(T1), hw + i * hw + flat[:, i]] = True
    return enc


def trajectory_records(traj: Trajectory) -> Iterator[dict]:
    enc = _encoding_rows(traj)
    header = {
        "type": "header",
        "format": FORMAT_TAG,
        "trajectory_id": traj.trajectory_id,
        "seed": traj.seed,
        "config": traj.config.to_dict(),
        "schedule": [disruption_to_dict(ev) for ev in traj.schedule],
        "initial": np.flatnonzero(enc[0]).tolist(),
        "trees_alive": traj.trees_alive[0].astype(int).tolist(),
        "n_steps": traj.n_steps,
    }
    if traj.meta:
        header["meta"] = traj.meta
    yield header
    for t in range(traj.n_steps):
        rec = {
            "type": "step",
            "t": t,
            "changed": np.flatnonzero(enc[t] != enc[t + 1]).tolist(),
            "action": traj.actions[t].tolist(),
            "consumed": traj.consumed[t].astype(int).tolist(),
        }
        if (traj.trees_alive[t] != traj.trees_alive[t + 1]).any():
            rec["trees_alive"] = traj.trees_alive[t + 1].astype(int).tolist()
        yield rec


def write_jsonl(trajs: Iterable[Trajectory], path: Union[str, Path]) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for traj in trajs:
            for rec in trajectory_records(traj):
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


class DatasetParseError(ValueError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


def _build(header: dict, steps: list[dict]) -> Trajectory:
    cfg = GridConfig.from_dict(header["config"])
    hw = cfg.width * cfg.height
    T = len(steps)
    enc = np.zeros((1 + cfg.n_agents) * hw, dtype=bool)
    enc[header["initial"]] = True
    rows = np.empty((T + 1, enc.size), dtype=bool)
    rows[0] = enc
    trees = np.empty((T + 1, len(cfg.trees)), dtype=bool)
    trees[0] = np.array(header["trees_alive"], dtype=bool)
    actions = np.empty((T, cfg.n_agents), dtype=np.int8)
    consumed = np.empty((T, cfg.n_agents), dtype=bool)
    for t, rec in enumerate(steps):
        enc[rec["changed"]] ^= True
        rows[t + 1] = enc
        trees[t + 1] = np.array(rec["trees_alive"], dtype=bool) if "trees_alive" in rec else trees[t]
        actions[t] = rec["action"]
        consumed[t] = rec["consumed"]
    apples = rows[:, :hw].reshape(T + 1, cfg.height, cfg.width)
    planes = rows[:, hw:].reshape(T + 1, cfg.n_agents, hw)
    flat = planes.argmax(axis=2)
    positions = np.stack([flat // cfg.width, flat % cfg.width], axis=2).astype(np.int16)
    return Trajectory(
        config=cfg,
        positions=positions,
        apples=apples.copy(),
        trees_alive=trees,
        actions=actions,
        consumed=consumed,
        schedule=tuple(disruption_from_dict(d) for d in header["schedule"]),
        seed=header["seed"],
        trajectory_id=header["trajectory_id"],
        meta=dict(header.get("meta", {})),
    )


def read_jsonl(path: Union[str, Path]) -> list[Trajectory]:
    """Parse a dataset file; malformed input raises :class:`DatasetParseError`."""
    path = Path(path)
    out: list[Trajectory] = []
    header = None
    steps: list[dict] = []
    header_line = 0

    def flush():
        if header is None:
            return
        if len(steps) != header["n_steps"]:
            raise DatasetParseError(path, header_line, f"expected {header['n_steps']} steps, found {len(steps)}")
        try:
            out.append(_build(header, steps))
        except (KeyError, ValueError, IndexError, TypeError) as exc:
            raise DatasetParseError(path, header_line, f"bad trajectory: {exc}") from exc

    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["type"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetParseError(path, line_no, f"not a trajectory record ({exc})") from exc
            if kind == "header":
                flush()
                if rec.get("format") != FORMAT_TAG:
                    raise DatasetParseError(path, line_no, f"unsupported format {rec.get('format')!r}")
                header, steps, header_line = rec, [], line_no
            elif kind == "step":
                if header is None:
                    raise DatasetParseError(path, line_no, "step record before any header")
                if rec.get("t") != len(steps):
                    raise DatasetParseError(path, line_no, f"step out of order (t={rec.get('t')})")
                steps.append(rec)
            else:
                raise DatasetParseError(path, line_no, f"unknown record type {kind!r}")
    flush()
    return out
