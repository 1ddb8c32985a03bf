"""Data collection and independent clipped-surrogate policy-gradient agents.

Every agent owns a softmax policy network and a state-value network over the
shared global observation (:func:`~coopres.gridworld.encode_state`). Nothing
is shared between agents; each one maximizes its own discounted reward as
composed by a :class:`RewardStrategy`.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import _nn
from .gridworld import (
    AgentFailure,
    AppleRemoval,
    Disruption,
    GridConfig,
    GridState,
    N_ACTIONS,
    StepOutcome,
    disruption_from_dict,
    disruption_to_dict,
    encode_state,
)
from .reward_models import RewardModel, encode_batch, reward
from .trajectory import Trajectory, simulate, uniform_policy

log = logging.getLogger(__name__)

POLICY_FORMAT = "coopres.policy_set/1"


class TrainingError(RuntimeError):
    pass


def episode_seeds(seed: int, n: int) -> list[int]:
    """``n`` independent episode seeds; the first k do not depend on ``n``."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)]


def collect_random_trajectories(env: GridConfig, n: int, horizon: Optional[int] = None,
                                schedule: Sequence[Disruption] = (), seed: int = 0) -> list[Trajectory]:
    """``n`` uniform-random episodes with ``schedule`` applied."""
    if n < 1:
        raise ValueError("n must be positive")
    if horizon is not None and horizon != env.horizon:
        env = GridConfig(**{**env.__dict__, "horizon": horizon})
    return [simulate(env, uniform_policy, s, schedule, trajectory_id=k)
            for k, s in enumerate(episode_seeds(seed, n))]


# --- reward strategies ---------------------------------------------------

STRATEGIES = ("individual", "resilience", "hybrid")


@dataclass(frozen=True)
class RewardStrategy:
    kind: str
    model: Optional[RewardModel] = None
    alpha: float = 1.0
    beta: float = 1.0
    consume_bonus: float = 1.0

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind != "individual" and self.model is None:
            raise ValueError(f"{self.kind} strategy needs a reward model")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.consume_bonus <= 0:
            raise ValueError("consume_bonus must be positive")

    def describe(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha, "beta": self.beta, "consume_bonus": self.consume_bonus,
                "model_kind": None if self.model is None else self.model.kind}


def compose_reward(strategy: RewardStrategy, state: GridState, outcome: StepOutcome) -> np.ndarray:
    """Per-agent rewards for the transition that produced ``state``."""
    eat = np.asarray(outcome.consumed, dtype=float)
    if strategy.kind == "individual":
        return strategy.consume_bonus * eat
    shared = reward(strategy.model, state)
    if strategy.kind == "resilience":
        return np.full(len(eat), shared)
    return strategy.alpha * shared + strategy.beta * eat


def trajectory_rewards(strategy: RewardStrategy, traj: Trajectory) -> np.ndarray:
    """(T, n) rewards of every step, equal to :func:`compose_reward` step by step."""
    eat = traj.consumed.astype(float)
    if strategy.kind == "individual":
        return strategy.consume_bonus * eat
    shared = strategy.model(strategy.model.trajectory_inputs(traj))[1:]
    if strategy.kind == "resilience":
        return np.repeat(shared[:, None], traj.n_agents, axis=1)
    return strategy.alpha * shared[:, None] + strategy.beta * eat


def depletion_value(strategy: RewardStrategy, traj: Trajectory, gamma: float) -> float:
    """Discounted shared reward of the depleted commons from the final step to the horizon.

    Depletion ends the episode but the commons stays empty, so the learner is
    charged the shared reward of the final state held still (its meal
    records age as the clock runs) for the remaining steps. Zero for the
    individual strategy and for episodes that did not deplete.
    """
    if strategy.kind == "individual" or not traj.last_apple_eaten:
        return 0.0
    remaining = traj.horizon - traj.n_steps
    if remaining <= 0:
        return 0.0
    shared = strategy.model(strategy.model.frozen_inputs(traj, remaining))
    weight = 1.0 if strategy.kind == "resilience" else strategy.alpha
    # value at the terminal step; the caller discounts it by one more step
    return weight * float(np.dot(gamma ** np.arange(remaining), shared))


# --- policies ------------------------------------------------------------

@dataclass
class PolicySet:
    """Per-agent policy and value parameters plus training statistics."""

    n_agents: int
    obs_dim: int
    hidden: int
    policy_params: list
    value_params: list
    gamma: float = 0.99
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if len(self.policy_params) != self.n_agents or len(self.value_params) != self.n_agents:
            raise ValueError("need one policy and one value network per agent")

    @property
    def policy_layout(self) -> _nn.Layout:
        return _nn.Layout((self.obs_dim, self.hidden, N_ACTIONS))

    @property
    def value_layout(self) -> _nn.Layout:
        return _nn.Layout((self.obs_dim, self.hidden, 1))

    @classmethod
    def init(cls, env: GridConfig, seed: int, hidden: int = 64, gamma: float = 0.99) -> "PolicySet":
        rng = np.random.default_rng(seed)
        obs = env.encoding_size
        pl = _nn.Layout((obs, hidden, N_ACTIONS))
        vl = _nn.Layout((obs, hidden, 1))
        pols = [pl.init(rng, out_scale=0.01) for _ in range(env.n_agents)]
        vals = [vl.init(rng) for _ in range(env.n_agents)]
        return cls(env.n_agents, obs, hidden, pols, vals, gamma)

    @classmethod
    def uniform(cls, env: GridConfig, hidden: int = 64, gamma: float = 0.99) -> "PolicySet":
        """Exactly uniform policies (zero output layer)."""
        ps = cls.init(env, 0, hidden, gamma)
        for i in range(ps.n_agents):
            W2, b2 = ps.policy_layout.unpack(ps.policy_params[i])[1]
            W2[:] = 0.0
            b2[:] = 0.0
        ps.stats["uniform"] = True
        return ps

    def probs(self, X: np.ndarray, agent: int) -> np.ndarray:
        logits, _ = _nn.forward(self.policy_layout, self.policy_params[agent], np.atleast_2d(X))
        return _softmax(logits)

    def values(self, X: np.ndarray, agent: int) -> np.ndarray:
        v, _ = _nn.forward(self.value_layout, self.value_params[agent], np.atleast_2d(X))
        return v[:, 0]

    def sampler(self):
        """Return ``policy(state, rng)`` that samples all agents in one pass."""
        pl = self.policy_layout
        layers = [pl.unpack(p) for p in self.policy_params]
        W1 = np.concatenate([l[0][0] for l in layers], axis=1)
        b1 = np.concatenate([l[0][1] for l in layers])
        W2 = np.stack([l[1][0] for l in layers])  # (n, hidden, A)
        b2 = np.stack([l[1][1] for l in layers])
        n, H = self.n_agents, self.hidden

        def act(state: GridState, rng: np.random.Generator) -> np.ndarray:
            h = np.tanh(encode_state(state) @ W1 + b1).reshape(n, H)
            logits = np.einsum("nh,nha->na", h, W2) + b2
            p = _softmax(logits)
            u = rng.random(n)
            a = (p.cumsum(axis=1) < u[:, None]).sum(axis=1)
            return np.minimum(a, N_ACTIONS - 1)

        return act

    def to_json(self) -> dict:
        return {
            "format": POLICY_FORMAT,
            "n_agents": self.n_agents,
            "obs_dim": self.obs_dim,
            "hidden": self.hidden,
            "gamma": self.gamma,
            "policy_params": [p.tolist() for p in self.policy_params],
            "value_params": [v.tolist() for v in self.value_params],
            "stats": self.stats,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PolicySet":
        if d.get("format") != POLICY_FORMAT:
            raise ValueError(f"unsupported policy format {d.get('format')!r}")
        return cls(d["n_agents"], d["obs_dim"], d["hidden"],
                   [np.array(p, dtype=float) for p in d["policy_params"]],
                   [np.array(v, dtype=float) for v in d["value_params"]],
                   d["gamma"], d.get("stats", {}))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PolicySet":
        return cls.from_json(json.loads(Path(path).read_text()))


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rollout(policies: PolicySet, env: GridConfig, schedule: Sequence[Disruption] = (), seed: int = 0,
            failure_override: Optional[AgentFailure] = None, trajectory_id: int = 0) -> Trajectory:
    """Sample one episode from the policies (agents in a failure window act randomly)."""
    if policies.n_agents != env.n_agents or policies.obs_dim != env.encoding_size:
        raise ValueError(f"policy set is for {policies.n_agents} agents / {policies.obs_dim} inputs, "
                         f"environment has {env.n_agents} / {env.encoding_size}")
    schedule = list(schedule)
    if failure_override is not None:
        schedule = sorted(schedule + [failure_override], key=lambda ev: ev.trigger_step)
    return simulate(env, policies.sampler(), seed, schedule, trajectory_id=trajectory_id)


# --- training ------------------------------------------------------------

@dataclass
class TrainConfig:
    episodes: int = 200
    horizon: int = 1000
    schedule: tuple = (AppleRemoval(0.5, 500),)
    gamma: float = 0.99
    clip: float = 0.2
    learning_rate: float = 3e-4
    entropy: float = 0.01
    batch_episodes: int = 8
    update_epochs: int = 4
    minibatch: int = 512
    hidden: int = 64
    absorbing_depletion: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1 or self.horizon < 1 or self.batch_episodes < 1 or self.update_epochs < 1:
            raise ValueError("counts must be positive")
        if not 0 < self.clip < 1:
            raise ValueError("clip ratio must lie in (0, 1)")
        if self.learning_rate < 0 or self.entropy < 0:
            raise ValueError("learning rate and entropy bonus must be nonnegative")
        self.schedule = tuple(disruption_from_dict(e) if isinstance(e, dict) else e for e in self.schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [disruption_to_dict(e) for e in self.schedule]
        return d


def _failure_mask(traj: Trajectory) -> np.ndarray:
    """(T, n) True where the logged action came from the policy."""
    mask = np.ones((traj.n_steps, traj.n_agents), dtype=bool)
    for ev in traj.schedule:
        if isinstance(ev, AgentFailure):
            mask[ev.start:ev.end, ev.agent_id] = False
    return mask


def _discounted(rewards: np.ndarray, gamma: float, bootstrap: float) -> np.ndarray:
    out = np.empty_like(rewards)
    g = bootstrap
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def _policy_grad(layout, theta, X, actions, old_logp, adv, clip, ent_coef):
    """Gradient of the negated clipped-surrogate-plus-entropy objective (mean over rows)."""
    logits, acts = _nn.forward(layout, theta, X)
    logp_all = logits - logits.max(axis=1, keepdims=True)
    logp_all = logp_all - np.log(np.exp(logp_all).sum(axis=1, keepdims=True))
    p = np.exp(logp_all)
    rows = np.arange(len(X))
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_logp)
    unclipped = np.where(adv >= 0, ratio <= 1 + clip, ratio >= 1 - clip)
    surrogate = np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)
    entropy = -(p * logp_all).sum(axis=1)
    coef = np.where(unclipped, ratio * adv, 0.0)
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    g_logits = coef[:, None] * (onehot - p) - ent_coef * p * (logp_all + entropy[:, None])
    N = len(X)
    loss = -(surrogate.mean() + ent_coef * entropy.mean())
    return loss, _nn.backward(layout, theta, acts, -g_logits / N)


def train_agents(env: GridConfig, strategy: RewardStrategy, config: TrainConfig,
                 init: Optional[PolicySet] = None) -> PolicySet:
    """Train one independent learner per agent; returns the trained set.

    Per batch of ``batch_episodes`` episodes: discounted returns (bootstrapped
    with the value net at the horizon) minus the value baseline give the
    advantages (a depleted episode is valued as an absorbing state, see
    :func:`depletion_value`), then ``update_epochs`` passes of shuffled minibatch Adam
    updates on the clipped surrogate with an entropy bonus.
    """
    env = GridConfig(**{**env.__dict__, "horizon": config.horizon})
    rng = np.random.default_rng([config.seed, 0])
    pols = init if init is not None else PolicySet.init(env, int(rng.integers(2 ** 63)), config.hidden, config.gamma)
    pols = PolicySet(pols.n_agents, pols.obs_dim, pols.hidden, [p.copy() for p in pols.policy_params],
                     [v.copy() for v in pols.value_params], config.gamma, {})
    n = env.n_agents
    pi_opt = [_nn.Adam(pols.policy_layout.n_params, config.learning_rate) for _ in range(n)]
    v_opt = [_nn.Adam(pols.value_layout.n_params, config.learning_rate) for _ in range(n)]
    seeds = episode_seeds(int(rng.integers(2 ** 63)), config.episodes)
    curve = []

    for start in range(0, config.episodes, config.batch_episodes):
        batch = []
        for k in range(start, min(start + config.batch_episodes, config.episodes)):
            traj = rollout(pols, env, config.schedule, seeds[k], trajectory_id=k)
            r = trajectory_rewards(strategy, traj)
            batch.append((traj, r))
            curve.append({
                "episode": k,
                "length": traj.n_steps,
                "consumption": int(traj.consumed.sum()),
                "last_apple": int(traj.last_apple_eaten),
                **{f"reward_{i}": float(r[:, i].sum()) for i in range(n)},
            })
        X = np.concatenate([encode_batch(t, np.arange(t.n_steps)) for t, _ in batch])
        finals = np.stack([encode_batch(t, np.array([t.n_steps]))[0] for t, _ in batch])
        truncated = np.array([t.n_steps >= env.horizon and t.apples[-1].any() for t, _ in batch])
        actions = np.concatenate([t.actions for t, _ in batch]).astype(np.int64)
        masks = np.concatenate([_failure_mask(t) for t, _ in batch])

        absorbed = np.array([depletion_value(strategy, t, config.gamma) if config.absorbing_depletion else 0.0
                             for t, _ in batch])
        for i in range(n):
            v_final = pols.values(finals, i) * truncated + absorbed
            returns = np.concatenate([
                _discounted(r[:, i], config.gamma, v_final[b]) for b, (_, r) in enumerate(batch)
            ])
            keep = np.flatnonzero(masks[:, i])
            Xi, ai, Gi = X[keep], actions[keep, i], returns[keep]
            adv = Gi - pols.values(Xi, i)
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            old_logp = np.log(pols.probs(Xi, i)[np.arange(len(Xi)), ai])
            for _ in range(config.update_epochs):
                order = rng.permutation(len(Xi))
                for s in range(0, len(order), config.minibatch):
                    mb = order[s:s + config.minibatch]
                    loss, g = _policy_grad(pols.policy_layout, pols.policy_params[i], Xi[mb], ai[mb],
                                           old_logp[mb], adv[mb], config.clip, config.entropy)
                    v, acts = _nn.forward(pols.value_layout, pols.value_params[i], Xi[mb])
                    err = v[:, 0] - Gi[mb]
                    gv = _nn.backward(pols.value_layout, pols.value_params[i], acts, err[:, None] / len(mb))
                    if not (np.isfinite(loss) and np.all(np.isfinite(g)) and np.all(np.isfinite(gv))):
                        raise TrainingError(f"non-finite loss for agent {i} at episode {start}")
                    pols.policy_params[i] = pi_opt[i].step(pols.policy_params[i], g)
                    pols.value_params[i] = v_opt[i].step(pols.value_params[i], gv)
        recent = curve[-len(batch):]
        log.info("episodes %d-%d: mean consumption %.1f, mean length %.0f", start, start + len(batch) - 1,
                 np.mean([c["consumption"] for c in recent]), np.mean([c["length"] for c in recent]))

    pols.stats = {"curve": curve, "config": config.to_dict(), "strategy": strategy.describe()}
    return pols


def write_curve(pols: PolicySet, path: Union[str, Path]) -> None:
    rows = pols.stats.get("curve", [])
    if not rows:
        raise ValueError("policy set has no training curve")
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
