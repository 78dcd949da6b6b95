"""``diffrisk`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import PipelineConfig, load_config
from .errors import (
    ConfigurationError,
    DatasetParseError,
    DiffRiskError,
    InsufficientDataError,
    IntegrityError,
    TrainingDivergedError,
)
from .evaluation import POLICY_KINDS

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _global_flags(default=None) -> argparse.ArgumentParser:
    # subcommands repeat the global flags with suppressed defaults so either position works
    p = argparse.ArgumentParser(add_help=False, argument_default=default)
    p.add_argument("--config", help="pipeline config JSON (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", help="override the config output directory")
    p.add_argument("--quiet", action="store_true", help="only print warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="diffrisk", parents=[_global_flags()],
                                     description="PPO baseline, success filtering and diffusion distillation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-ppo", parents=[common], help="train the PPO baseline")
    p.add_argument("--tee", action="store_true",
                   help=f"also save successful training episodes to {pipeline.PPO_SUCCESSES}")

    p = sub.add_parser("collect", parents=[common], help="roll out the stochastic PPO policy")
    p.add_argument("--checkpoint", help=f"PPO checkpoint (default: <out-dir>/{pipeline.PPO_POLICY})")
    p.add_argument("--episodes", type=int, help="exact episode count; overrides the harvest rules")
    p.add_argument("--out", help=f"dataset path (default: <out-dir>/{pipeline.DATASET})")

    p = sub.add_parser("filter", parents=[common], help="keep successful episodes only")
    p.add_argument("--in", dest="inputs", nargs="+", help=f"input datasets (default: <out-dir>/{pipeline.DATASET})")
    p.add_argument("--out", help=f"output path (default: <out-dir>/{pipeline.DATASET_SUCC})")

    p = sub.add_parser("train-diffusion", parents=[common], help="fit the diffusion policy")
    p.add_argument("--data", help=f"successful-episode dataset (default: <out-dir>/{pipeline.DATASET_SUCC})")

    p = sub.add_parser("evaluate", parents=[common], help="success rate on held-out seeds")
    p.add_argument("--policy", dest="kinds", action="append", choices=POLICY_KINDS,
                   help="policy kind, repeatable (default: all configured kinds)")
    p.add_argument("--checkpoint", help="checkpoint path for a single --policy")
    p.add_argument("--episodes", type=int, help="number of evaluation seeds to use")

    p = sub.add_parser("report", parents=[common], help="comparison table from evaluation rows")
    p.add_argument("--rows", nargs="+", help="evaluation row files (default: <out-dir>/eval_*.json)")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    cfg.validate()
    return cfg


def _run(args, cfg: PipelineConfig) -> None:
    cmd = args.command
    if cmd == "train-ppo":
        info = pipeline.stage_train_ppo(cfg, tee=args.tee or None)
        print(f"train-ppo: {info['updates']} updates, {info['episodes']} episodes -> {info['checkpoint']}")
    elif cmd == "collect":
        info = pipeline.stage_collect(cfg, args.checkpoint, args.episodes, args.out)
        print(f"collect: {info['episodes']} episodes, {info['successes']} successful -> {info['path']}")
    elif cmd == "filter":
        info = pipeline.stage_filter(cfg, args.inputs, args.out)
        # the size warning itself is logged by the filter stage
        print(f"|D| = {info['episodes']}  |D_succ| = {info['successes']}")
    elif cmd == "train-diffusion":
        info = pipeline.stage_train_diffusion(cfg, args.data)
        print(f"train-diffusion: {info['episodes']} episodes, final loss {info['final_loss']} "
              f"-> {info['checkpoint']}")
    elif cmd == "evaluate":
        for row in pipeline.stage_evaluate(cfg, args.kinds, args.checkpoint, args.episodes):
            print(f"{row.policy}: {row.successes}/{row.n} = {row.rate:.3f} "
                  f"[{row.ci_low:.3f}, {row.ci_high:.3f}]")
    elif cmd == "report":
        _, txt = pipeline.stage_report(cfg, args.rows)
        print(txt, end="")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, (DatasetParseError, IntegrityError, InsufficientDataError)):
        return EXIT_DATA
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, DiffRiskError):
        return exc.exit_code
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = resolve_config(args)
        _run(args, cfg)
    except (DiffRiskError, OSError) as exc:
        code = exit_code_for(exc) if isinstance(exc, DiffRiskError) else EXIT_DATA
        print(f"diffrisk {stage}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
