"""Fully observable commons-harvest gridworld.

Apples live on fixed *sites* grouped into trees. An agent that walks onto a
live apple eats it; empty sites regrow with a probability that depends on how
many live apples sit within Chebyshev radius 2. With zero live neighbours a
site never regrows, so a fully harvested tree stays dead.

All randomness flows through explicit ``numpy.random.Generator`` objects, so a
(config, seed, actions, schedule) tuple replays bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

UP, DOWN, LEFT, RIGHT, STAY = range(5)
ACTION_NAMES = ("up", "down", "left", "right", "stay")
N_ACTIONS = 5
MOVES = np.array([(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)], dtype=np.int64)

# regrowth probability indexed by min(#live neighbours, 3)
DEFAULT_REGROWTH = (0.0, 0.005, 0.02, 0.05)
# Scarce regrowth for the large map: random foragers exhaust it within a few hundred steps.
SCARCE_REGROWTH = (0.0, 0.00025, 0.001, 0.0025)
REGROWTH_RADIUS = 2


class ConfigError(ValueError):
    """Invalid environment configuration."""


class UsageError(RuntimeError):
    """An operation was called on a state it does not apply to."""


@dataclass(frozen=True)
class TreeSpec:
    cells: tuple[tuple[int, int], ...]

    @classmethod
    def block(cls, top: int, left: int, height: int = 4, width: int = 4) -> "TreeSpec":
        return cls(tuple((r, c) for r in range(top, top + height) for c in range(left, left + width)))


@dataclass(frozen=True)
class GridConfig:
    width: int
    height: int
    n_agents: int
    trees: tuple[TreeSpec, ...]
    regrowth_table: tuple[float, ...] = DEFAULT_REGROWTH
    regrowth_cap: Optional[int] = None
    tree_death: bool = False
    horizon: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ConfigError(f"grid must be at least 4x4, got {self.height}x{self.width}")
        if self.n_agents < 1:
            raise ConfigError("need at least one agent")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        if len(self.regrowth_table) != 4:
            raise ConfigError("regrowth_table needs 4 buckets (0, 1, 2, >=3 neighbours)")
        if any(not 0.0 <= p <= 1.0 for p in self.regrowth_table):
            raise ConfigError("regrowth probabilities must lie in [0, 1]")
        seen = set()
        for tree in self.trees:
            for r, c in tree.cells:
                if not (0 <= r < self.height and 0 <= c < self.width):
                    raise ConfigError(f"tree cell {(r, c)} outside the grid")
                if (r, c) in seen:
                    raise ConfigError(f"tree cell {(r, c)} listed twice")
                seen.add((r, c))
        if self.regrowth_cap is not None and self.regrowth_cap < 0:
            raise ConfigError("regrowth_cap must be nonnegative")

    @property
    def n_sites(self) -> int:
        return sum(len(t.cells) for t in self.trees)

    @property
    def encoding_size(self) -> int:
        return (1 + self.n_agents) * self.width * self.height + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trees"] = [[list(c) for c in t.cells] for t in self.trees]
        d["regrowth_table"] = list(self.regrowth_table)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        d = dict(d)
        d["trees"] = tuple(TreeSpec(tuple(tuple(c) for c in cells)) for cells in d["trees"])
        d["regrowth_table"] = tuple(d.get("regrowth_table", DEFAULT_REGROWTH))
        return cls(**d)


def preset(name: str, **overrides) -> GridConfig:
    """``"8x8"``: one 16-apple tree, 2 agents. ``"16x16"``: 3 trees, 4 agents, cap 16, scarce regrowth."""
    if name == "8x8":
        base = GridConfig(width=8, height=8, n_agents=2, trees=(TreeSpec.block(2, 2),), horizon=1000)
    elif name == "16x16":
        trees = (TreeSpec.block(2, 2), TreeSpec.block(2, 10), TreeSpec.block(10, 6))
        base = GridConfig(width=16, height=16, n_agents=4, trees=trees, regrowth_cap=16,
                          tree_death=True, regrowth_table=SCARCE_REGROWTH, horizon=2000)
    else:
        raise ConfigError(f"unknown preset {name!r}; expected '8x8' or '16x16'")
    if "trees" in overrides and overrides["trees"] and not isinstance(overrides["trees"][0], TreeSpec):
        overrides["trees"] = tuple(TreeSpec(tuple(tuple(c) for c in cells)) for cells in overrides["trees"])
    if "regrowth_table" in overrides:
        overrides["regrowth_table"] = tuple(overrides["regrowth_table"])
    return replace(base, **overrides)


def load_config(path: Union[str, Path]) -> GridConfig:
    """Read a JSON file holding either a full config or ``{"preset": ..., "overrides": {...}}``."""
    d = json.loads(Path(path).read_text())
    if "preset" in d:
        return preset(d["preset"], **d.get("overrides", {}))
    return GridConfig.from_dict(d)


class _Geometry:
    """Per-config lookup tables shared by every state of that config."""

    def __init__(self, cfg: GridConfig):
        sites = [c for t in cfg.trees for c in t.cells]
        self.site_rc = np.array(sites, dtype=np.int64).reshape(-1, 2)
        self.site_tree = np.array([i for i, t in enumerate(cfg.trees) for _ in t.cells], dtype=np.int64)
        self.site_flat = self.site_rc[:, 0] * cfg.width + self.site_rc[:, 1]
        d = np.abs(self.site_rc[:, None, :] - self.site_rc[None, :, :]).max(axis=2)
        self.neighbours = ((d <= REGROWTH_RADIUS) & (d > 0)).astype(np.int64)
        self.table = np.array(cfg.regrowth_table, dtype=np.float64)
        is_site = np.zeros(cfg.width * cfg.height, dtype=bool)
        is_site[self.site_flat] = True
        self.free_cells = np.flatnonzero(~is_site)


@lru_cache(maxsize=32)
def geometry(cfg: GridConfig) -> _Geometry:
    return _Geometry(cfg)


@dataclass(frozen=True)
class AppleRemoval:
    """Remove each live apple with probability ``prob``; at least one survives."""

    prob: float
    trigger_step: int
    kind = "apple_removal"

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ConfigError("removal probability must lie in [0, 1]")


@dataclass(frozen=True)
class RegrowthScale:
    """Multiply regrowth probabilities by ``factor`` for ``duration`` steps."""

    factor: float
    duration: int
    trigger_step: int
    kind = "regrowth_scale"

    def __post_init__(self):
        if not 0.0 <= self.factor <= 1.0:
            raise ConfigError("regrowth factor must lie in [0, 1]")
        if self.duration < 1:
            raise ConfigError("duration must be positive")


@dataclass(frozen=True)
class AgentFailure:
    """Agent ``agent_id`` acts uniformly at random during ``[start, end)``."""

    agent_id: int
    start: int
    end: int
    kind = "agent_failure"

    def __post_init__(self):
        if not self.start < self.end:
            raise ConfigError("agent failure needs start < end")

    @property
    def trigger_step(self) -> int:
        return self.start


Disruption = Union[AppleRemoval, RegrowthScale, AgentFailure]
_DISRUPTIONS = {cls.kind: cls for cls in (AppleRemoval, RegrowthScale, AgentFailure)}


def disruption_to_dict(ev: Disruption) -> dict:
    return {"kind": ev.kind, **asdict(ev)}


def disruption_from_dict(d: dict) -> Disruption:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _DISRUPTIONS:
        raise ConfigError(f"unknown disruption kind {kind!r}")
    return _DISRUPTIONS[kind](**d)


def validate_schedule(schedule: Sequence[Disruption], horizon: int) -> None:
    triggers = [ev.trigger_step for ev in schedule]
    if triggers != sorted(triggers):
        raise ConfigError("disruptions must be ordered by trigger step")
    for ev in schedule:
        if not 0 < ev.trigger_step < horizon:
            raise ConfigError(f"{ev} triggers outside (0, horizon)")
        if isinstance(ev, AgentFailure) and ev.end > horizon:
            raise ConfigError(f"{ev} ends after the horizon")


@dataclass(frozen=True)
class GridState:
    """Joint environment state.

    Besides positions and apples the state carries the bookkeeping that
    reward features need (per-agent apples eaten, step of each agent's last
    meal) and the currently active disruption effects.
    """

    config: GridConfig
    agent_positions: np.ndarray  # (n_agents, 2) row, col
    apples: np.ndarray  # (height, width) bool
    trees_alive: np.ndarray  # (n_trees,) bool
    t: int
    terminated: bool
    eaten: np.ndarray  # (n_agents,) apples eaten so far
    last_eaten: np.ndarray  # (n_agents,) step of last meal, -1 if never
    regrowth_scale: float = 1.0
    regrowth_scale_until: int = 0
    failures: tuple = field(default=())  # AgentFailure events already triggered

    @property
    def n_apples(self) -> int:
        return int(self.apples.sum())

    def failed_agents(self) -> list[int]:
        return sorted({f.agent_id for f in self.failures if f.start <= self.t < f.end})


@dataclass(frozen=True)
class StepOutcome:
    consumed: np.ndarray  # (n_agents,) bool
    apples_regrown: int
    last_apple_eaten: bool


def reset(config: GridConfig, seed: int) -> GridState:
    """All apples live, agents on distinct non-site cells chosen uniformly."""
    geo = geometry(config)
    if len(geo.free_cells) < config.n_agents:
        raise ConfigError(
            f"{config.n_agents} agents do not fit on {len(geo.free_cells)} free cells"
        )
    rng = np.random.default_rng(seed)
    cells = rng.choice(geo.free_cells, size=config.n_agents, replace=False)
    pos = np.stack([cells // config.width, cells % config.width], axis=1).astype(np.int64)
    apples = np.zeros((config.height, config.width), dtype=bool)
    apples[geo.site_rc[:, 0], geo.site_rc[:, 1]] = True
    return GridState(
        config=config,
        agent_positions=pos,
        apples=apples,
        trees_alive=np.ones(len(config.trees), dtype=bool),
        t=0,
        terminated=config.n_sites == 0,
        eaten=np.zeros(config.n_agents, dtype=np.int64),
        last_eaten=np.full(config.n_agents, -1, dtype=np.int64),
    )


def _kill_empty_trees(cfg: GridConfig, geo: _Geometry, live: np.ndarray, trees_alive: np.ndarray) -> np.ndarray:
    if not cfg.tree_death:
        return trees_alive
    has_apple = np.bincount(geo.site_tree, weights=live, minlength=len(cfg.trees)) > 0
    return trees_alive & has_apple


def step(state: GridState, action: Sequence[int], rng: np.random.Generator) -> tuple[GridState, StepOutcome]:
    """Advance one step: move (shuffled priority), eat, regrow."""
    if state.terminated:
        raise UsageError("cannot step a terminated state")
    cfg = state.config
    action = np.asarray(action, dtype=np.int64)
    if action.shape != (cfg.n_agents,):
        raise UsageError(f"expected {cfg.n_agents} actions, got shape {action.shape}")
    if action.min() < 0 or action.max() >= N_ACTIONS:
        raise UsageError(f"actions must lie in [0, {N_ACTIONS})")
    geo = geometry(cfg)

    pos = state.agent_positions.copy()
    order = rng.permutation(cfg.n_agents)
    occupied = {(int(r), int(c)) for r, c in pos}
    for i in order:
        r, c = int(pos[i, 0]), int(pos[i, 1])
        dr, dc = MOVES[action[i]]
        nr = min(max(r + dr, 0), cfg.height - 1)
        nc = min(max(c + dc, 0), cfg.width - 1)
        if (nr, nc) != (r, c) and (nr, nc) not in occupied:
            occupied.discard((r, c))
            occupied.add((nr, nc))
            pos[i] = (nr, nc)

    apples = state.apples.copy()
    consumed = apples[pos[:, 0], pos[:, 1]]
    apples[pos[:, 0], pos[:, 1]] = False
    t = state.t + 1
    eaten = state.eaten + consumed
    last_eaten = np.where(consumed, t, state.last_eaten)

    live = apples[geo.site_rc[:, 0], geo.site_rc[:, 1]]
    trees_alive = _kill_empty_trees(cfg, geo, live, state.trees_alive)
    last_apple = bool(consumed.any()) and not live.any()

    # regrowth: one uniform per site every step keeps the stream aligned
    u = rng.random(len(live))
    scale = state.regrowth_scale if t <= state.regrowth_scale_until else 1.0
    counts = geo.neighbours @ live
    p = geo.table[np.minimum(counts, 3)] * scale
    occ = np.zeros((cfg.height, cfg.width), dtype=bool)
    occ[pos[:, 0], pos[:, 1]] = True
    candidate = ~live & ~occ[geo.site_rc[:, 0], geo.site_rc[:, 1]] & trees_alive[geo.site_tree]
    new = candidate & (u < p)
    if cfg.regrowth_cap is not None and new.any():
        room = max(cfg.regrowth_cap - int(live.sum()), 0)
        idx = np.flatnonzero(new)
        if len(idx) > room:
            # u/p is uniform on [0,1) given success, so this is a uniform subset
            keep = idx[np.argsort(u[idx] / p[idx], kind="stable")[:room]]
            new = np.zeros_like(new)
            new[keep] = True
    n_new = int(new.sum())
    if n_new:
        rc = geo.site_rc[new]
        apples[rc[:, 0], rc[:, 1]] = True

    n_live = int(live.sum()) + n_new
    nxt = GridState(
        config=cfg,
        agent_positions=pos,
        apples=apples,
        trees_alive=trees_alive,
        t=t,
        terminated=n_live == 0 or t >= cfg.horizon,
        eaten=eaten,
        last_eaten=last_eaten,
        regrowth_scale=state.regrowth_scale,
        regrowth_scale_until=state.regrowth_scale_until,
        failures=state.failures,
    )
    return nxt, StepOutcome(consumed=consumed, apples_regrown=n_new, last_apple_eaten=last_apple)


def apply_disruption(state: GridState, event: Disruption, rng: np.random.Generator) -> GridState:
    """Apply ``event`` at its trigger step and return the new state."""
    if not isinstance(event, (AppleRemoval, RegrowthScale, AgentFailure)):
        raise UsageError(f"unknown disruption {event!r}")
    if event.trigger_step != state.t:
        raise UsageError(f"event triggers at {event.trigger_step}, state is at t={state.t}")
    cfg = state.config
    if isinstance(event, AppleRemoval):
        geo = geometry(cfg)
        live = state.apples[geo.site_rc[:, 0], geo.site_rc[:, 1]]
        live_idx = np.flatnonzero(live)
        u = rng.random(len(live_idx))
        removed = live_idx[u < event.prob]
        if len(live_idx) and len(removed) == len(live_idx):
            removed = np.delete(removed, rng.integers(len(removed)))
        apples = state.apples.copy()
        rc = geo.site_rc[removed]
        apples[rc[:, 0], rc[:, 1]] = False
        live_after = apples[geo.site_rc[:, 0], geo.site_rc[:, 1]]
        trees_alive = _kill_empty_trees(cfg, geo, live_after, state.trees_alive)
        return replace(state, apples=apples, trees_alive=trees_alive)
    if isinstance(event, RegrowthScale):
        return replace(state, regrowth_scale=event.factor, regrowth_scale_until=state.t + event.duration)
    if not 0 <= event.agent_id < cfg.n_agents:
        raise UsageError(f"agent {event.agent_id} does not exist")
    return replace(state, failures=state.failures + (event,))


def encode_state(state: GridState) -> np.ndarray:
    """Apples plane ++ one position plane per agent ++ t/horizon."""
    cfg = state.config
    hw = cfg.width * cfg.height
    out = np.zeros(cfg.encoding_size)
    out[:hw] = state.apples.ravel()
    flat = state.agent_positions[:, 0] * cfg.width + state.agent_positions[:, 1]
    out[hw + np.arange(cfg.n_agents) * hw + flat] = 1.0
    out[-1] = state.t / cfg.horizon
    return out
