"""Command line entry points: `strac train` and `strac report`.

Log verbosity comes from the STRAC_LOG environment variable
(debug | info | warning, default warning).
"""

from __future__ import annotations

import argparse
import logging
import os
from pathlib import Path

from .domains import load_config
from .harness import ExperimentConfig, Hyperparams, run_experiment
from .report import render_report

DEFAULT_MULTI_DOMAINS = "cafes,restaurants,laptops"


def _setup_logging() -> None:
    level = os.environ.get("STRAC_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s.strip() != "")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strac", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training experiment")
    train.add_argument("--mode", choices=("single", "multi"), default="single")
    train.add_argument(
        "--domains",
        default=None,
        help="comma-separated domain names (default: cafes, or all three in multi mode)",
    )
    train.add_argument("--profile", default="env1", help="environment profile name")
    train.add_argument("--dialogues", type=int, default=4000, help="training dialogues per domain")
    train.add_argument("--milestone-every", type=int, default=200)
    train.add_argument("--eval-dialogues", type=int, default=500)
    train.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9", help="comma-separated seeds")
    train.add_argument("--seed", type=int, default=None, help="single seed (overrides --seeds)")
    train.add_argument("--no-hierarchy", action="store_true", help="ablate the hierarchical composition")
    train.add_argument("--no-noise", action="store_true", help="ablate the noisy layers")
    train.add_argument("--serial", action="store_true", help="single-thread deterministic schedule")
    train.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    train.add_argument("--config", type=Path, default=None, help="JSON domains/profiles/hyperparams")

    report = sub.add_parser("report", help="render figures from a run directory")
    report.add_argument("--out", type=Path, required=True, help="run directory with curve files")
    report.add_argument("--fig-dir", type=Path, default=None, help="where to write figures")
    return parser


def _train(args: argparse.Namespace) -> int:
    domain_registry = {}
    profile_registry = {}
    hyper_kwargs = {}
    if args.config is not None:
        domain_registry, profile_registry, hyper_kwargs = load_config(args.config)
    domains = args.domains
    if domains is None:
        domains = DEFAULT_MULTI_DOMAINS if args.mode == "multi" else "cafes"
    seeds = (args.seed,) if args.seed is not None else _parse_seeds(args.seeds)
    config = ExperimentConfig(
        mode=args.mode,
        domains=tuple(d.strip() for d in domains.split(",") if d.strip()),
        profile=args.profile,
        dialogues=args.dialogues,
        milestone_every=args.milestone_every,
        eval_dialogues=args.eval_dialogues,
        seeds=seeds,
        hierarchical=not args.no_hierarchy,
        noisy=not args.no_noise,
        serial=args.serial,
        out_dir=args.out,
        hyper=Hyperparams(**hyper_kwargs),
        domain_registry=domain_registry,
        profile_registry=profile_registry,
    )
    records = run_experiment(config)
    final = max(r.dialogues for rs in records.values() for r in rs) if any(records.values()) else 0
    for seed, rs in sorted(records.items()):
        for r in rs:
            if r.dialogues == final:
                print(
                    f"seed {seed} | {r.domain}: success {r.success_rate:.3f}, "
                    f"reward {r.mean_reward:.2f}"
                )
    print(f"curves and checkpoints written to {args.out}")
    return 0


def _report(args: argparse.Namespace) -> int:
    written = render_report(args.out, args.fig_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    if args.command == "train":
        return _train(args)
    return _report(args)


if __name__ == "__main__":
    raise SystemExit(main())
