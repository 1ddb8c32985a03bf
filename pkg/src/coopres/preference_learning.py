"""Fit reward models to resilience-ranked preference pairs.

Two objectives over trajectory returns ``G(tau) = sum_s R(s; theta)``:

MPL   ``sum max(0, delta_ij - (G_i - G_j))`` with ``delta_ij = 1`` (``fixed``)
      or ``|rho_i - rho_j|`` (``gap``)
PPL   ``-sum log sigmoid(G_i - G_j)``

Each objective pairs with the three sampling strategies of
:func:`coopres.resilience.sample_pairs`; MPL has two margin modes, so there
are 6 + 3 = 9 variants per reward parameterization.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .reward_models import RewardModel, weight_mask
from .resilience import PreferencePair, RankedDataset, sample_pairs
from .trajectory import Trajectory

log = logging.getLogger(__name__)

METHODS = ("mpl", "ppl")
MARGINS = ("fixed", "gap")
DEFAULT_LR = {"handcrafted": 0.05, "state_linear": 0.05, "mlp": 0.005}


class FitError(RuntimeError):
    pass


@dataclass
class PreferenceData:
    """Per-trajectory model inputs, keyed by trajectory id.

    Linear kinds only need each trajectory's summed inputs and length plus the
    first two moments of the per-state inputs (for output normalization). The
    MLP keeps the per-state input matrices, optionally thinned by ``stride``;
    a thinned trajectory's return is rescaled by its thinning factor.
    """

    kind: str
    ids: list
    lengths: np.ndarray  # states per trajectory (T + 1)
    sums: Optional[np.ndarray] = None  # (N, d) linear kinds
    moments: Optional[tuple] = None  # (mean (d,), second moment (d, d)) linear kinds
    X: Optional[np.ndarray] = None  # stacked per-state inputs, mlp
    segment: Optional[np.ndarray] = None  # trajectory index of each row of X
    weights: Optional[np.ndarray] = None  # per-trajectory rescaling, mlp

    def __post_init__(self):
        self.index = {tid: k for k, tid in enumerate(self.ids)}

    @classmethod
    def build(cls, model: RewardModel, trajectories: Sequence[Trajectory], stride: int = 1) -> "PreferenceData":
        ids = [t.trajectory_id for t in trajectories]
        lengths = np.array([t.n_steps + 1 for t in trajectories], dtype=float)
        if model.is_linear:
            d = model.input_dim
            sums = np.zeros((len(trajectories), d))
            m1 = np.zeros(d)
            m2 = np.zeros((d, d))
            for k, traj in enumerate(trajectories):
                X = model.trajectory_inputs(traj)
                sums[k] = X.sum(axis=0)
                m1 += sums[k]
                m2 += X.T @ X
            n = lengths.sum()
            return cls(model.kind, ids, lengths, sums=sums, moments=(m1 / n, m2 / n))
        blocks, seg, weights = [], [], []
        for k, traj in enumerate(trajectories):
            X = model.trajectory_inputs(traj, stride=stride)
            blocks.append(X)
            seg.append(np.full(len(X), k))
            weights.append(lengths[k] / len(X))
        return cls(model.kind, ids, lengths, X=np.concatenate(blocks), segment=np.concatenate(seg),
                   weights=np.array(weights))

    def returns(self, model: RewardModel) -> np.ndarray:
        if self.sums is not None:
            w, b = model.theta[:-1], model.theta[-1]
            return (self.sums @ w + self.lengths * (b - model.shift)) / model.scale
        r = model(self.X)
        return np.bincount(self.segment, weights=r, minlength=len(self.ids)) * self.weights

    def returns_grad(self, model: RewardModel, coef: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_k coef[k] * G_k`` w.r.t. ``theta``."""
        if self.sums is not None:
            return np.concatenate([self.sums.T @ coef, [self.lengths @ coef]]) / model.scale
        return model.grad(self.X, (coef * self.weights)[self.segment])

    def state_output_stats(self, model: RewardModel) -> tuple[float, float]:
        """Mean and standard deviation of raw per-state outputs."""
        if self.moments is not None:
            m1, m2 = self.moments
            w, b = model.theta[:-1], model.theta[-1]
            mean = float(m1 @ w + b)
            var = float(w @ m2 @ w - (m1 @ w) ** 2)
            return mean, float(np.sqrt(max(var, 0.0)))
        raw = model.raw(self.X)
        return float(raw.mean()), float(raw.std())

    def pair_index(self, pairs: Sequence[PreferencePair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        i = np.array([self.index[p.preferred] for p in pairs])
        j = np.array([self.index[p.other] for p in pairs])
        gap = np.array([p.gap for p in pairs], dtype=float)
        return i, j, gap


def _pair_coef(n: int, i: np.ndarray, j: np.ndarray, dloss_ddiff: np.ndarray) -> np.ndarray:
    coef = np.zeros(n)
    np.add.at(coef, i, dloss_ddiff)
    np.add.at(coef, j, -dloss_ddiff)
    return coef


def mpl_loss(model: RewardModel, pairs: Sequence[PreferencePair], data: PreferenceData,
             margin: str = "fixed") -> tuple[float, np.ndarray]:
    """Hinge loss and its subgradient (pairs exactly at the hinge count as inactive)."""
    if not pairs:
        raise ValueError("need at least one pair")
    if margin not in MARGINS:
        raise ValueError(f"unknown margin mode {margin!r}; expected one of {MARGINS}")
    G = data.returns(model)
    i, j, gap = data.pair_index(pairs)
    delta = np.ones(len(pairs)) if margin == "fixed" else np.abs(gap)
    slack = delta - (G[i] - G[j])
    active = slack > 0
    loss = math.fsum(slack[active])
    coef = _pair_coef(len(G), i, j, -active.astype(float))
    return loss, data.returns_grad(model, coef)


def ppl_loss(model: RewardModel, pairs: Sequence[PreferencePair], data: PreferenceData) -> tuple[float, np.ndarray]:
    """Bradley-Terry negative log-likelihood ``sum log(1 + exp(-(G_i - G_j)))``."""
    if not pairs:
        raise ValueError("need at least one pair")
    G = data.returns(model)
    i, j, _ = data.pair_index(pairs)
    x = G[i] - G[j]
    loss = math.fsum(np.logaddexp(0.0, -x))  # correctly rounded sum
    # d/dx log(1 + e^-x) = -sigmoid(-x)
    sig = np.exp(-np.logaddexp(0.0, x))
    coef = _pair_coef(len(G), i, j, -sig)
    return loss, data.returns_grad(model, coef)


@dataclass
class FitConfig:
    method: str = "mpl"
    margin: str = "fixed"
    sampling: str = "mixed"
    mix: float = 0.5
    pairs_per_epoch: int = 256
    epochs: int = 200
    learning_rate: Optional[float] = None  # None: per-kind default
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    heldout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid variants: {', '.join(variant_names())}")
        if self.margin not in MARGINS:
            raise ValueError(f"unknown margin {self.margin!r}; expected one of {MARGINS}")
        if self.epochs < 1 or self.pairs_per_epoch < 1:
            raise ValueError("epochs and pairs_per_epoch must be positive")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")

    @property
    def name(self) -> str:
        if self.method == "ppl":
            return f"ppl-{self.sampling}"
        return f"mpl-{self.margin}-{self.sampling}"

    @classmethod
    def from_name(cls, name: str, **kw) -> "FitConfig":
        parts = name.lower().split("-")
        if name.lower() not in variant_names():
            raise ValueError(f"unknown variant {name!r}; valid variants: {', '.join(variant_names())}")
        if parts[0] == "ppl":
            return cls(method="ppl", sampling=parts[1], **kw)
        return cls(method="mpl", margin=parts[1], sampling=parts[2], **kw)


def variant_names() -> list[str]:
    samplings = ("random", "ranked", "mixed")
    return [f"mpl-{m}-{s}" for m in MARGINS for s in samplings] + [f"ppl-{s}" for s in samplings]


@dataclass
class FitReport:
    model: RewardModel
    losses: list
    heldout_accuracy: float
    config: FitConfig
    n_train_pairs: int = 0
    n_heldout_pairs: int = 0

    def to_json(self) -> dict:
        return {
            "format": "coopres.fit_report/1",
            "variant": self.config.name,
            "fit_config": asdict(self.config),
            "losses": self.losses,
            "final_loss": self.losses[-1],
            "heldout_accuracy": self.heldout_accuracy,
            "n_train_pairs": self.n_train_pairs,
            "n_heldout_pairs": self.n_heldout_pairs,
            "model_kind": self.model.kind,
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def pairwise_accuracy(model: RewardModel, pairs: Sequence[PreferencePair], data: PreferenceData) -> float:
    if not pairs:
        return float("nan")
    G = data.returns(model)
    i, j, _ = data.pair_index(pairs)
    return float(np.mean(G[i] > G[j]))


def fit(init: RewardModel, ranked: RankedDataset, data: PreferenceData, config: FitConfig) -> FitReport:
    """Full-batch (sub)gradient descent on freshly sampled pairs each epoch.

    The update uses the per-pair mean of the objective; weight decay touches
    weights only; the MLP gradient is clipped to ``config.clip_norm``. The
    returned model is normalized on the per-state outputs of ``data``.
    """
    if len(set(ranked.rhos.tolist())) < 2:
        raise FitError("need at least two distinct resilience scores")
    rng = np.random.default_rng(config.seed)
    lr = DEFAULT_LR[init.kind] if config.learning_rate is None else config.learning_rate
    mask = weight_mask(init)
    model = replace(init, shift=0.0, scale=1.0)
    theta = model.theta.copy()

    n_held = max(1, int(round(config.heldout_fraction * config.pairs_per_epoch)))
    heldout = sample_pairs(ranked, config.sampling, n_held, rng, mix=config.mix)
    held_keys = {(p.preferred, p.other) for p in heldout}

    losses = []
    n_train = 0
    for epoch in range(config.epochs):
        pairs = sample_pairs(ranked, config.sampling, config.pairs_per_epoch, rng, mix=config.mix)
        pairs = [p for p in pairs if (p.preferred, p.other) not in held_keys]
        if not pairs:
            raise FitError("every sampled pair collides with the held-out set")
        n_train += len(pairs)
        model = model.with_theta(theta)
        if config.method == "mpl":
            loss, grad = mpl_loss(model, pairs, data, config.margin)
        else:
            loss, grad = ppl_loss(model, pairs, data)
        loss /= len(pairs)
        grad = grad / len(pairs) + config.weight_decay * mask * theta
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise FitError(f"non-finite loss at epoch {epoch} (learning rate {lr} too high?)")
        if not init.is_linear:
            norm = np.linalg.norm(grad)
            if norm > config.clip_norm:
                grad *= config.clip_norm / norm
        theta = theta - lr * grad
        losses.append(loss)
        log.debug("epoch %d loss %.6g", epoch, loss)

    model = model.with_theta(theta)
    acc = pairwise_accuracy(model, heldout, data)
    mean, std = data.state_output_stats(model)
    scale = std if std > 1e-12 * max(1.0, abs(mean)) else 1.0
    model = replace(model, shift=mean, scale=scale)
    return FitReport(model, losses, acc, config, n_train, len(heldout))
