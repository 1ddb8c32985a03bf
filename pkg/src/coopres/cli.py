"""Command-line entry point: ``coopres {collect,rank,learn,train,eval}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .gridworld import ConfigError
from .pipeline import (
    ConfigUsageError,
    ExperimentConfig,
    PipelineError,
    run_collect,
    run_eval,
    run_learn,
    run_rank,
    run_sweep,
    run_train,
)
from .trajectory import DatasetParseError

log = logging.getLogger("coopres")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment JSON config (default: the 8x8 setup)")
    common.add_argument("--seed", type=_seed, help="master seed, overrides the config's master_seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--threads", type=_positive, default=1, help="worker processes for evaluation")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="coopres", description="Resilience-aligned reward learning in a commons gridworld.")
    p.add_argument("--version", action="version", version=f"coopres {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("collect", parents=[common], help="collect random-policy trajectories")
    r = sub.add_parser("rank", parents=[common], help="score and rank a trajectory dataset")
    r.add_argument("dataset", nargs="?", type=Path, help="JSONL dataset (default: OUT/trajectories.jsonl)")
    l = sub.add_parser("learn", parents=[common], help="fit a reward model to the ranking")
    l.add_argument("ranking", nargs="?", type=Path, help="ranking JSON (default: OUT/ranking.json)")
    l.add_argument("--sweep", action="store_true", help="fit all 9 variants x 3 parameterizations")
    l.add_argument("--variant", help="override learn.variant, e.g. mpl-fixed-mixed or ppl-random")
    l.add_argument("--kind", help="override learn.kind (handcrafted, state_linear, mlp)")
    t = sub.add_parser("train", parents=[common], help="train policies under a reward strategy")
    t.add_argument("model", nargs="?", type=Path, help="reward model JSON (default: OUT/reward_model.json)")
    t.add_argument("--strategy", choices=("individual", "resilience", "hybrid"), help="override train.strategy")
    t.add_argument("--random", action="store_true", help="emit the uniform-random baseline without training")
    t.add_argument("--name", help="policy name (default: the strategy)")
    e = sub.add_parser("eval", parents=[common], help="evaluate policies under the disruption protocol")
    e.add_argument("policies", nargs="*", type=Path, help="policy files (default: OUT/policies/*.json)")
    return p


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    if args.seed is not None:
        cfg.master_seed = args.seed
    if getattr(args, "variant", None):
        cfg.learn["variant"] = args.variant
    if getattr(args, "kind", None):
        cfg.learn["kind"] = args.kind
    cfg.validate()
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        if args.command == "collect":
            path = run_collect(cfg, args.out, args.force)
        elif args.command == "rank":
            path = run_rank(cfg, args.out, args.dataset, args.force)
        elif args.command == "learn":
            if args.sweep:
                path = run_sweep(cfg, args.out, args.ranking, args.force)
            else:
                path = run_learn(cfg, args.out, args.ranking, args.force)
        elif args.command == "train":
            path = run_train(cfg, args.out, args.model, args.strategy, args.random, args.name, args.force)
        else:
            path = run_eval(cfg, args.out, args.policies, args.threads, args.force)
    except (ConfigUsageError, ConfigError) as exc:
        print(f"coopres: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, DatasetParseError, OSError, RuntimeError, ValueError) as exc:
        print(f"coopres: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
