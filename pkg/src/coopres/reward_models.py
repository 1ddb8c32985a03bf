"""State-only reward models ``R(s; theta)``.

Three parameterizations share one flat parameter vector layout:

``handcrafted``   linear in six hand-designed features, all in [0, 1]
``state_linear``  linear in :func:`~coopres.gridworld.encode_state`
``mlp``           ``encode_state -> 32 -> 32 -> 1`` with tanh hidden units

A model also carries an output normalization ``(shift, scale)``; every
public evaluation returns ``(raw - shift) / scale``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from . import _nn
from .gridworld import GridConfig, GridState, encode_state
from .indicators import satiation_values
from .trajectory import Trajectory

FORMAT_TAG = "coopres.reward_model/1"
KINDS = ("handcrafted", "state_linear", "mlp")
HANDCRAFTED_SCHEMA = "handcrafted/v1"
FEATURE_NAMES = (
    "apple_fraction",
    "apple_proximity",
    "agent_separation",
    "equality",
    "adjacent_fraction",
    "satiation",
)
N_FEATURES = len(FEATURE_NAMES)


class ShapeError(ValueError):
    pass


# --- features ------------------------------------------------------------

def handcrafted_batch(cfg: GridConfig, positions: np.ndarray, apples: np.ndarray, eaten: np.ndarray,
                      last_eaten: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(T, 6) feature matrix for a stack of states."""
    T = len(positions)
    n = cfg.n_agents
    diameter = (cfg.height - 1) + (cfg.width - 1)
    pos = positions.astype(np.int64)
    apples = apples.reshape(T, cfg.height, cfg.width)
    out = np.zeros((T, N_FEATURES))

    sites = np.array([c for tree in cfg.trees for c in tree.cells], dtype=np.int64).reshape(-1, 2)
    live = apples[:, sites[:, 0], sites[:, 1]]  # (T, S)
    n_sites = max(len(sites), 1)
    out[:, 0] = live.sum(axis=1) / n_sites

    # Manhattan distance from each agent to each site, masked to live apples
    d = np.abs(pos[:, :, None, :] - sites[None, None, :, :]).sum(axis=3).astype(float)  # (T, n, S)
    d = np.where(live[:, None, :], d, np.inf)
    nearest = d.min(axis=2) if len(sites) else np.full((T, n), np.inf)
    any_live = live.any(axis=1)
    prox = 1.0 - np.where(np.isfinite(nearest), nearest, 0.0).mean(axis=1) / diameter
    out[:, 1] = np.where(any_live, prox, 0.0)
    out[:, 4] = np.where(any_live, (nearest == 1).mean(axis=1), 0.0)

    if n > 1:
        iu = np.triu_indices(n, k=1)
        pd = np.abs(pos[:, :, None, :] - pos[:, None, :, :]).sum(axis=3)[:, iu[0], iu[1]]
        out[:, 2] = pd.min(axis=1) / diameter
    else:
        out[:, 2] = 1.0

    e = eaten.astype(float)
    total = e.sum(axis=1)
    g = np.zeros(T)
    nz = total > 0
    g[nz] = np.abs(e[nz, :, None] - e[nz, None, :]).sum(axis=(1, 2)) / (2 * n * total[nz])
    out[:, 3] = 1.0 - g
    out[:, 5] = satiation_values(last_eaten, np.asarray(t))
    return out


def features_handcrafted(state: GridState) -> np.ndarray:
    return handcrafted_batch(
        state.config,
        state.agent_positions[None],
        state.apples[None],
        state.eaten[None],
        state.last_eaten[None],
        np.array([state.t]),
    )[0]


def encode_batch(traj: Trajectory, index: np.ndarray) -> np.ndarray:
    """``encode_state`` for the states of ``traj`` at ``index`` (vectorized)."""
    cfg = traj.config
    hw = cfg.width * cfg.height
    X = np.zeros((len(index), cfg.encoding_size))
    X[:, :hw] = traj.apples[index].reshape(len(index), hw)
    pos = traj.positions[index].astype(np.int64)
    flat = pos[:, :, 0] * cfg.width + pos[:, :, 1]
    rows = np.arange(len(index))
    for i in range(cfg.n_agents):
        X[rows, hw + i * hw + flat[:, i]] = 1.0
    X[:, -1] = index / cfg.horizon
    return X


# --- model ---------------------------------------------------------------

@dataclass(frozen=True)
class RewardModel:
    kind: str
    theta: np.ndarray
    input_dim: int
    schema: str
    hidden: tuple[int, ...] = ()
    shift: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown reward model kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("normalization scale must be positive")
        if self.theta.shape != (self.layout.n_params,):
            raise ShapeError(f"expected {self.layout.n_params} parameters, got {self.theta.shape}")

    @property
    def layout(self) -> _nn.Layout:
        return _nn.Layout((self.input_dim, *self.hidden, 1))

    @property
    def is_linear(self) -> bool:
        return self.kind != "mlp"

    def with_theta(self, theta: np.ndarray) -> "RewardModel":
        return replace(self, theta=np.asarray(theta, dtype=float).copy())

    def raw(self, X: np.ndarray) -> np.ndarray:
        """Un-normalized outputs for an (N, d) input matrix."""
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ShapeError(f"model expects {self.input_dim} inputs, got {X.shape[1]}")
        out, _ = _nn.forward(self.layout, self.theta, X)
        return out[:, 0]

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return (self.raw(X) - self.shift) / self.scale

    def grad(self, X: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(upstream * self(X))`` w.r.t. ``theta``."""
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ShapeError(f"model expects {self.input_dim} inputs, got {X.shape[1]}")
        if self.is_linear:
            u = np.asarray(upstream, dtype=float)
            return np.concatenate([X.T @ u, [u.sum()]]) / self.scale
        _, acts = _nn.forward(self.layout, self.theta, X)
        return _nn.backward(self.layout, self.theta, acts, np.asarray(upstream, dtype=float)[:, None]) / self.scale

    def inputs(self, state: GridState) -> np.ndarray:
        if self.kind == "handcrafted":
            return features_handcrafted(state)
        if self.schema != state_schema(state.config):
            raise ShapeError(f"model schema {self.schema} does not match state {state_schema(state.config)}")
        return encode_state(state)

    def frozen_inputs(self, traj: Trajectory, steps: int) -> np.ndarray:
        """Inputs for the final state of ``traj`` held still while the clock runs on.

        Row ``k`` is the final state at time ``n_steps + k``: positions, apples
        and meal records stay put, so only time-dependent inputs change.
        """
        T = traj.n_steps
        t = T + np.arange(steps)
        idx = np.full(steps, T)
        if self.kind == "handcrafted":
            return handcrafted_batch(traj.config, traj.positions[idx], traj.apples[idx],
                                     traj.eaten_counts()[idx], traj.last_eaten()[idx], t)
        X = encode_batch(traj, idx[:1]).repeat(steps, axis=0)
        X[:, -1] = t / traj.config.horizon
        return X

    def trajectory_inputs(self, traj: Trajectory, stride: int = 1) -> np.ndarray:
        """Inputs for states ``s_0, s_stride, ...`` of a trajectory."""
        index = np.arange(0, traj.n_steps + 1, stride)
        if self.kind == "handcrafted":
            return handcrafted_batch(
                traj.config,
                traj.positions[index],
                traj.apples[index],
                traj.eaten_counts()[index],
                traj.last_eaten()[index],
                index,
            )
        if self.schema != state_schema(traj.config):
            raise ShapeError(f"model schema {self.schema} does not match trajectory {state_schema(traj.config)}")
        return encode_batch(traj, index)

    # serialization
    def to_json(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "kind": self.kind,
            "schema": self.schema,
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "params": self.theta.tolist(),
            "normalization": {"shift": self.shift, "scale": self.scale},
        }

    @classmethod
    def from_json(cls, d: dict) -> "RewardModel":
        if d.get("format") != FORMAT_TAG:
            raise ValueError(f"unsupported reward model format {d.get('format')!r}")
        return cls(
            kind=d["kind"],
            theta=np.array(d["params"], dtype=float),
            input_dim=int(d["input_dim"]),
            schema=d["schema"],
            hidden=tuple(d["hidden"]),
            shift=float(d["normalization"]["shift"]),
            scale=float(d["normalization"]["scale"]),
        )

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RewardModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def state_schema(cfg: GridConfig) -> str:
    return f"state/{cfg.height}x{cfg.width}/n{cfg.n_agents}"


def handcrafted_linear(w=None, b: float = 0.0) -> RewardModel:
    w = np.zeros(N_FEATURES) if w is None else np.asarray(w, dtype=float)
    return RewardModel("handcrafted", np.concatenate([w, [b]]), N_FEATURES, HANDCRAFTED_SCHEMA)


def state_linear(cfg: GridConfig, w=None, b: float = 0.0) -> RewardModel:
    d = cfg.encoding_size
    w = np.zeros(d) if w is None else np.asarray(w, dtype=float)
    return RewardModel("state_linear", np.concatenate([w, [b]]), d, state_schema(cfg))


def mlp(cfg: GridConfig, seed: int = 0, hidden: tuple[int, ...] = (32, 32)) -> RewardModel:
    layout = _nn.Layout((cfg.encoding_size, *hidden, 1))
    theta = layout.init(np.random.default_rng(seed))
    return RewardModel("mlp", theta, cfg.encoding_size, state_schema(cfg), tuple(hidden))


def init_model(kind: str, cfg: GridConfig, seed: int = 0) -> RewardModel:
    if kind == "handcrafted":
        return handcrafted_linear()
    if kind == "state_linear":
        return state_linear(cfg)
    if kind == "mlp":
        return mlp(cfg, seed)
    raise ValueError(f"unknown reward model kind {kind!r}; expected one of {KINDS}")


def weight_mask(model: RewardModel) -> np.ndarray:
    return model.layout.weight_mask()


# --- functional API ------------------------------------------------------

def reward(model: RewardModel, state: GridState) -> float:
    return float(model(model.inputs(state)[None])[0])


def reward_gradient(model: RewardModel, state: GridState) -> np.ndarray:
    return model.grad(model.inputs(state)[None], np.ones(1))


def trajectory_return(model: RewardModel, traj: Trajectory) -> float:
    """Sum of the (normalized) reward over every state ``s_0 .. s_T``."""
    return float(model(model.trajectory_inputs(traj)).sum())


def normalize(model: RewardModel, samples: Union[np.ndarray, Iterable[GridState]]) -> RewardModel:
    """Standardize outputs on a sample of states (or an input matrix)."""
    if isinstance(samples, np.ndarray):
        X = samples
    else:
        X = np.stack([model.inputs(s) for s in samples])
    if len(X) < 2:
        raise ValueError("normalization needs at least two samples")
    raw = model.raw(X)
    shift = float(raw.mean())
    std = float(raw.std())
    scale = std if std > 1e-12 * max(1.0, abs(shift)) else 1.0
    return replace(model, shift=shift, scale=scale)
