"""Experiment configuration and the five file-to-file pipeline stages.

Stages talk to each other only through files in the output directory::

    trajectories.jsonl      collect
    ranking.json            rank
    reward_model.json       learn (plus fit_report.json; sweep/ for --sweep)
    policies/{name}.json    train (plus policies/{name}_curve.csv)
    report/{experiment_id}/ eval

Each stage draws its seed from the master seed and the stage name, so a stage
can be rerun on its own and still reproduce the same bytes.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import __version__
from .evaluation import EvalProtocol, compare_groups, export_report, run_protocol, triple_disruption_protocol
from .gridworld import GridConfig, disruption_from_dict, disruption_to_dict, preset
from .preference_learning import FitConfig, FitError, PreferenceData, fit, variant_names
from .resilience import RankedDataset, ResilienceError, build_baseline, rank, score_trajectory, windows_from_schedule
from .reward_models import KINDS, RewardModel, init_model
from .training import PolicySet, RewardStrategy, TrainConfig, collect_random_trajectories, train_agents, write_curve
from .trajectory import read_jsonl, write_jsonl

log = logging.getLogger(__name__)

DATASET = "trajectories.jsonl"
RANKING = "ranking.json"
MODEL = "reward_model.json"
FIT_REPORT = "fit_report.json"


class PipelineError(RuntimeError):
    """Runtime failure of a stage (bad input file, failed fit, ...)."""


class ConfigUsageError(ValueError):
    """Invalid experiment configuration or command-line usage."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


DEFAULTS = {
    "experiment_id": "experiment",
    "master_seed": 0,
    "env": {"preset": "8x8", "overrides": {}},
    "collect": {
        "n": 500,
        "horizon": 1000,
        "schedule": [{"kind": "apple_removal", "prob": 0.5, "trigger_step": 500}],
    },
    "rank": {"baseline_episodes": 20},
    "learn": {"kind": "handcrafted", "variant": "mpl-fixed-mixed", "fit": {}, "mlp_stride": 10},
    "train": {"strategy": "hybrid", "alpha": 1.0, "beta": 1.0, "consume_bonus": 1.0, "config": {}},
    "eval": {
        "protocol": "triple",
        "n_episodes": 500,
        "horizon": 5000,
        "baseline_episodes": 20,
        "alpha": 0.05,
        "correction": "bh",
    },
}


@dataclass
class ExperimentConfig:
    """Whole-pipeline settings; every stage records :meth:`to_dict` in its outputs."""

    experiment_id: str = "experiment"
    master_seed: int = 0
    env: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["env"]))
    collect: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["collect"]))
    rank: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["rank"]))
    learn: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["learn"]))
    train: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["train"]))
    eval: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS["eval"]))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigUsageError(f"unknown config keys: {sorted(unknown)}")
        merged = _merge(DEFAULTS, d)
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigUsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigUsageError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        """Build every typed sub-config once so errors surface before any work."""
        try:
            self.grid()
            self.collect_schedule()
            self.fit_config()
            self.train_config()
            self.protocol()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigUsageError(f"invalid experiment config: {exc}") from exc
        if self.learn["kind"] not in KINDS:
            raise ConfigUsageError(f"unknown reward kind {self.learn['kind']!r}; expected one of {KINDS}")
        if self.train["strategy"] not in ("individual", "resilience", "hybrid"):
            raise ConfigUsageError(f"unknown strategy {self.train['strategy']!r}")
        if int(self.collect["n"]) < 2:
            raise ConfigUsageError("collect.n must be at least 2")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise ConfigUsageError("master_seed must be an unsigned 64-bit integer")

    # typed views ---------------------------------------------------------

    def grid(self) -> GridConfig:
        env = self.env
        if "preset" in env:
            return preset(env["preset"], **copy.deepcopy(env.get("overrides", {})))
        return GridConfig.from_dict(env)

    def collect_schedule(self) -> tuple:
        return tuple(disruption_from_dict(e) for e in self.collect["schedule"])

    def fit_config(self, variant: Optional[str] = None) -> FitConfig:
        name = variant or self.learn["variant"]
        return FitConfig.from_name(name, **{**self.learn.get("fit", {}), "seed": stage_seed(self.master_seed, "learn")})

    def train_config(self, name: str = "") -> TrainConfig:
        d = {"horizon": int(self.collect["horizon"]), "schedule": self.collect["schedule"], **self.train.get("config", {})}
        d["seed"] = stage_seed(self.master_seed, f"train/{name}")
        return TrainConfig(**d)

    def protocol(self) -> EvalProtocol:
        e = self.eval
        if e["protocol"] == "triple":
            return triple_disruption_protocol(int(e["n_episodes"]), int(e["horizon"]),
                                              baseline_episodes=int(e["baseline_episodes"]),
                                              **e.get("triple", {}))
        if e["protocol"] == "custom":
            return EvalProtocol(int(e["n_episodes"]), int(e["horizon"]), tuple(e["schedule"]),
                                int(e["baseline_episodes"]))
        raise ValueError(f"unknown protocol {e['protocol']!r}; expected 'triple' or 'custom'")


def stage_seed(master_seed: int, stage: str) -> int:
    """Seed for ``stage``: the stage name's CRC-32 mixed into the master seed."""
    ss = np.random.SeedSequence([int(master_seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigUsageError(f"{path} exists; pass --force to overwrite")


def _meta(cfg: ExperimentConfig, stage: str) -> dict:
    return {"version": __version__, "stage": stage, "config": cfg.to_dict()}


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- stages --------------------------------------------------------------

def run_collect(cfg: ExperimentConfig, out: Union[str, Path], force: bool = False) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / DATASET
    _guard(path, force)
    trajs = collect_random_trajectories(cfg.grid(), int(cfg.collect["n"]), int(cfg.collect["horizon"]),
                                        cfg.collect_schedule(), stage_seed(cfg.master_seed, "collect"))
    for t in trajs:
        t.meta.update(_meta(cfg, "collect"))
    write_jsonl(trajs, path)
    log.info("wrote %d trajectories to %s", len(trajs), path)
    return path


def run_rank(cfg: ExperimentConfig, out: Union[str, Path], dataset: Optional[Union[str, Path]] = None,
             force: bool = False) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RANKING
    _guard(path, force)
    dataset = Path(dataset) if dataset is not None else out / DATASET
    if not dataset.exists():
        raise PipelineError(f"dataset {dataset} not found (run collect first)")
    trajs = read_jsonl(dataset)
    if len(trajs) < 2:
        raise PipelineError(f"need >= 2 trajectories for ranking, {dataset} has {len(trajs)}")
    env = trajs[0].config
    schedule = trajs[0].schedule
    if not schedule:
        raise PipelineError("dataset trajectories carry no disruption schedule to score against")
    base = build_baseline(collect_random_trajectories(env, int(cfg.rank["baseline_episodes"]), env.horizon, (),
                                                      stage_seed(cfg.master_seed, "rank")))
    windows = windows_from_schedule(schedule, env.horizon)
    scored = []
    for t in trajs:
        br = score_trajectory(t, base, windows)
        scored.append((t, br.rho, br.rho_k))
    ranked = rank(scored, windows)
    _write_json(path, {**ranked.to_json(), **_meta(cfg, "rank"), "dataset": dataset.name})
    log.info("ranked %d trajectories; rho range [%.4f, %.4f]", len(ranked), ranked.rhos.min(), ranked.rhos.max())
    return path


def _load_ranking(out: Path, ranking: Optional[Union[str, Path]]):
    path = Path(ranking) if ranking is not None else out / RANKING
    if not path.exists():
        raise PipelineError(f"ranking {path} not found (run rank first)")
    try:
        d = json.loads(path.read_text())
        ranked = RankedDataset.from_json(d)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise PipelineError(f"{path}: malformed ranking ({exc})") from exc
    dataset = path.parent / d.get("dataset", DATASET)
    if not dataset.exists():
        raise PipelineError(f"dataset {dataset} referenced by {path} not found")
    return ranked, read_jsonl(dataset)


def _fit_one(cfg: ExperimentConfig, kind: str, variant: str, ranked, trajs, cache: dict):
    env = trajs[0].config
    init = init_model(kind, env, seed=stage_seed(cfg.master_seed, f"init/{kind}"))
    if kind not in cache:
        cache[kind] = PreferenceData.build(init, trajs, stride=int(cfg.learn.get("mlp_stride", 1)))
    return fit(init, ranked, cache[kind], cfg.fit_config(variant))


def run_learn(cfg: ExperimentConfig, out: Union[str, Path], ranking: Optional[Union[str, Path]] = None,
              force: bool = False) -> Path:
    """Fit the configured reward model; returns the model path."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / MODEL
    _guard(path, force)
    ranked, trajs = _load_ranking(out, ranking)
    try:
        rep = _fit_one(cfg, cfg.learn["kind"], cfg.learn["variant"], ranked, trajs, {})
    except (FitError, ResilienceError) as exc:
        raise PipelineError(f"fit failed: {exc}") from exc
    rep.model.save(path)
    _write_json(out / FIT_REPORT, {**rep.to_json(), **_meta(cfg, "learn")})
    log.info("%s/%s held-out accuracy %.3f", cfg.learn["kind"], rep.config.name, rep.heldout_accuracy)
    return path


def run_sweep(cfg: ExperimentConfig, out: Union[str, Path], ranking: Optional[Union[str, Path]] = None,
              force: bool = False, kinds: Sequence[str] = KINDS) -> Path:
    """Fit every variant for every parameterization; a failed fit is recorded and skipped."""
    out = Path(out)
    sweep = out / "sweep"
    table = sweep / "comparison.csv"
    _guard(table, force)
    sweep.mkdir(parents=True, exist_ok=True)
    ranked, trajs = _load_ranking(out, ranking)
    rows = []
    cache: dict = {}
    for kind in kinds:
        for variant in variant_names():
            name = f"{kind}_{variant}"
            try:
                rep = _fit_one(cfg, kind, variant, ranked, trajs, cache)
            except (FitError, ResilienceError, ValueError, FloatingPointError) as exc:
                log.warning("%s failed: %s", name, exc)
                rows.append({"kind": kind, "variant": variant, "status": "error", "final_loss": "",
                             "heldout_accuracy": "", "error": str(exc)})
                continue
            rep.model.save(sweep / f"{name}.json")
            _write_json(sweep / f"{name}_report.json", {**rep.to_json(), **_meta(cfg, "learn")})
            rows.append({"kind": kind, "variant": variant, "status": "ok", "final_loss": repr(rep.losses[-1]),
                         "heldout_accuracy": repr(rep.heldout_accuracy), "error": ""})
            log.info("%s: loss %.4g, held-out accuracy %.3f", name, rep.losses[-1], rep.heldout_accuracy)
    with table.open("w", newline="") as fh:
        fh.write(f"# coopres {__version__}\n")
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return table


def policy_path(out: Union[str, Path], name: str) -> Path:
    return Path(out) / "policies" / f"{name}.json"


def run_train(cfg: ExperimentConfig, out: Union[str, Path], model: Optional[Union[str, Path]] = None,
              strategy: Optional[str] = None, random_baseline: bool = False, name: Optional[str] = None,
              force: bool = False) -> Path:
    """Train one strategy (or emit the uniform policy) and save it under ``policies/``."""
    out = Path(out)
    env = cfg.grid()
    kind = "random" if random_baseline else (strategy or cfg.train["strategy"])
    name = name or kind
    path = policy_path(out, name)
    _guard(path, force)
    path.parent.mkdir(parents=True, exist_ok=True)
    if random_baseline:
        pols = PolicySet.uniform(env)
        pols.stats.update(_meta(cfg, "train"))
        pols.save(path)
        return path
    rm = None
    if kind != "individual":
        mpath = Path(model) if model is not None else out / MODEL
        if not mpath.exists():
            raise PipelineError(f"reward model {mpath} not found (run learn first)")
        try:
            rm = RewardModel.load(mpath)
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise PipelineError(f"{mpath}: malformed reward model ({exc})") from exc
    try:
        strat = RewardStrategy(kind, rm, float(cfg.train["alpha"]), float(cfg.train["beta"]),
                               float(cfg.train["consume_bonus"]))
    except ValueError as exc:
        raise ConfigUsageError(str(exc)) from exc
    pols = train_agents(env, strat, cfg.train_config(name))
    write_curve(pols, path.with_name(f"{name}_curve.csv"))
    pols.stats.update(_meta(cfg, "train"))
    pols.save(path)
    return path


def _is_baseline(pols: PolicySet) -> bool:
    return bool(pols.stats.get("uniform")) or pols.stats.get("strategy", {}).get("kind") == "individual"


def run_eval(cfg: ExperimentConfig, out: Union[str, Path], policies: Sequence[Union[str, Path]] = (),
             threads: int = 1, force: bool = False) -> Path:
    """Evaluate each policy file under the protocol, test trained vs baseline groups, write the report."""
    out = Path(out)
    report_root = out / "report"
    _guard(report_root / cfg.experiment_id, force)
    if not policies:
        policies = sorted((out / "policies").glob("*.json"))
    if not policies:
        raise PipelineError(f"no policy files given and none found in {out / 'policies'}")
    env = cfg.grid()
    protocol = cfg.protocol()
    groups, results, trained, baselines = {}, {}, [], []
    seed = stage_seed(cfg.master_seed, "eval")
    for p in policies:
        p = Path(p)
        try:
            pols = PolicySet.load(p)
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise PipelineError(f"cannot load policy {p}: {exc}") from exc
        if pols.n_agents != env.n_agents or pols.obs_dim != env.encoding_size:
            raise ConfigUsageError(f"{p} has {pols.n_agents} agents; the environment has {env.n_agents}")
        name = p.stem
        if name in results:
            raise ConfigUsageError(f"duplicate policy name {name!r}")
        # every group sees the same episode seeds
        results[name] = run_protocol(pols, env, protocol, seed=seed, threads=threads)
        groups[name] = results[name].metrics
        (baselines if _is_baseline(pols) else trained).append(name)
    if trained and baselines:
        comparisons = [(a, b) for a in trained for b in baselines]
    else:
        names = list(results)
        comparisons = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    tests = compare_groups(groups, comparisons, alpha=float(cfg.eval["alpha"]), correction=cfg.eval["correction"])
    config = {**cfg.to_dict(), "protocol": protocol.to_dict(), "version": __version__}
    return export_report(report_root, cfg.experiment_id, results, tests, config)
