#!/usr/bin/env python
"""
Command-line interface for slotpolicy
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from . import tensor as T
from .config import Config, describe_keys, load_config, write_run_manifest
from .dataset import DatasetManifest, dataset_stats, generate_dataset
from .errors import ConfigError
from .evaluation import (ExpertController, PolicyController, ZeroController, comparison_table,
                         decompose_rollout, directional_notes, evaluate, overall_summary)
from .sim import MiniShape
from .trainer import Trainer

logger = logging.getLogger(__name__)

# flag dest -> config key; flags left unset never override the file
FLAG_KEYS = {
    "seed": "run.seed", "out": "run.out", "workers": "run.workers", "precision": "run.precision",
    "dataset": "data.dataset", "task": "data.task", "level": "data.level", "episodes": "data.episodes",
    "shard_episodes": "data.shard_episodes", "split_ratio": "data.split_ratio", "preset": "data.preset",
    "jitter": "data.jitter",
    "encoder_kind": "encoder.kind",
    "steps": "train.steps", "batch_size": "train.batch_size", "lr": "train.lr",
    "encoder_checkpoint": "train.encoder_checkpoint", "resume": "train.resume", "pooled": "train.pooled",
    "policy_checkpoint": "eval.policy_checkpoint", "eval_task": "eval.task", "levels": "eval.levels",
    "n": "eval.n", "repeats": "eval.repeats", "seed_base": "eval.seed_base", "mode": "eval.mode",
    "frames": "eval.frames",
}


def _shared_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument('--config', help='INI config file')
    shared.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override any config key (repeatable)')
    shared.add_argument('--seed', type=int, help='Root seed of the run')
    shared.add_argument('--out', help='Output directory for all artifacts')
    shared.add_argument('--workers', type=int, help='Worker processes (default: SLURM_CPUS_ON_NODE or cores)')
    shared.add_argument('--precision', choices=['f32', 'f64'], help='Engine precision')
    verbosity = shared.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='Debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='Warnings and errors only')
    return shared


def build_parser() -> argparse.ArgumentParser:
    shared = _shared_parser()
    parser = argparse.ArgumentParser(
        prog='slotpolicy',
        description='Object-centric slot encoders and GMM behavior cloning on the MiniShape tabletop',
        epilog=describe_keys(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f'slotpolicy {__version__}')
    subparsers = parser.add_subparsers(dest='command', help='Command to execute')

    def sub(name: str, help_text: str) -> argparse.ArgumentParser:
        return subparsers.add_parser(name, help=help_text, parents=[shared], epilog=describe_keys(),
                                     formatter_class=argparse.RawDescriptionHelpFormatter)

    gen = sub('gen-data', 'Collect expert demonstrations into shards under --out')
    gen.add_argument('--task', help='Task or comma list (push, pick, place)')
    gen.add_argument('--level', help='Generalization level (none, L1, L2, L3)')
    gen.add_argument('--episodes', type=int, help='Successful episodes per task')
    gen.add_argument('--shard-episodes', type=int, help='Episodes per shard file')
    gen.add_argument('--split-ratio', type=float, help='Training fraction of the hash split')
    gen.add_argument('--preset', choices=['full', 'reduced'], help='Scene preset')
    gen.add_argument('--jitter', type=float, help='Expert waypoint jitter')

    for name, help_text in (('pretrain', 'Pretrain the encoder on reconstruction'),
                            ('train-policy', 'Behavior cloning with a frozen encoder')):
        p = sub(name, help_text)
        p.add_argument('--dataset', help='Dataset directory (with manifest.json)')
        p.add_argument('--task', help='Task or comma list to train on')
        p.add_argument('--pooled', action='store_const', const='true', help='Use every task in the dataset')
        p.add_argument('--steps', type=int, help='Total optimisation steps')
        p.add_argument('--batch-size', type=int, help='Batch size')
        p.add_argument('--lr', type=float, help='Base learning rate')
        p.add_argument('--resume', help='Checkpoint to resume from')
        if name == 'pretrain':
            p.add_argument('--encoder-kind', choices=['savi', 'holistic'], help='Encoder architecture')
        else:
            p.add_argument('--encoder-checkpoint', help='Pretrained encoder checkpoint (required)')

    ev = sub('eval', 'Success rates over repeated seeded rollouts')
    ev.add_argument('--policy-checkpoint', help='Policy checkpoint or comma list')
    ev.add_argument('--controller', choices=['policy', 'expert', 'zero'], default='policy',
                    help='Controller to evaluate (default: policy)')
    ev.add_argument('--task', dest='eval_task', help='Task to evaluate')
    ev.add_argument('--level', dest='levels', help="Level, comma list or 'all'")
    ev.add_argument('--n', type=int, help='Rollouts per repeat')
    ev.add_argument('--repeats', type=int, help='Repeats with fresh seeds')
    ev.add_argument('--seed-base', type=int, help='First rollout seed')
    ev.add_argument('--mode', choices=['deterministic', 'stochastic'], help='Action sampling mode')
    ev.add_argument('--preset', choices=['full', 'reduced'], help='Scene preset')

    dec = sub('decompose', 'Dump input, reconstruction and per-slot images of one rollout')
    dec.add_argument('--policy-checkpoint', help='Policy checkpoint')
    dec.add_argument('--task', dest='eval_task', help='Task')
    dec.add_argument('--level', dest='levels', help='Level')
    dec.add_argument('--rollout-seed', type=int, default=0, help='Rollout seed (default: 0)')
    dec.add_argument('--frames', help='Comma list of frame indices')
    dec.add_argument('--predicted', action='store_true', help='Also dump the predicted next frame')

    st = sub('stats', 'Print dataset manifest totals as JSON')
    st.add_argument('--dataset', help='Dataset directory')
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    overrides = list(args.set)
    for dest, key in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.command == 'pretrain':
        overrides.append("train.phase=pretrain")
    elif args.command == 'train-policy':
        overrides.append("train.phase=bc")
    return load_config(args.config, overrides).validate()


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def _gen_data(config: Config) -> int:
    data = config.data
    print(f"Generating {data.episodes} episodes per task for {', '.join(data.tasks)} (level {data.level})...")
    manifest = generate_dataset(config.run.out, data.tasks, level=data.level, episodes=data.episodes,
                                seed=config.run.seed, shard_episodes=data.shard_episodes,
                                split_ratio=data.split_ratio, preset=data.preset, jitter=data.jitter,
                                sim_config=config.sim, workers=config.run.workers)
    stats = dataset_stats(manifest)
    print(f"\nDataset saved to: {config.run.out}")
    print(f"Shards: {stats['shards']}  Episodes: {stats['episodes']}  Frames: {stats['frames']}")
    return 0


def _train(config: Config) -> int:
    trainer = Trainer(config)
    if config.train.resume:
        trainer.resume(config.train.resume)
    losses = trainer.fit()
    out = Path(config.run.out)
    print(f"\n{trainer.phase} finished at step {trainer.step}")
    if losses:
        print(f"Final training loss: {losses[-1]:.5f}")
    val = trainer.open_store("val")
    if len(val):
        print(f"Validation loss: {trainer.validation_loss(val):.5f}")
    print(f"Checkpoint saved to: {out / (trainer.checkpoint_stem() + '_last.spck')}")
    return 0


def _controllers(config: Config, kind: str) -> List:
    if kind == 'expert':
        return [ExpertController(config.eval.task, config.sim)]
    if kind == 'zero':
        return [ZeroController()]
    if not config.eval.checkpoints:
        raise ConfigError("eval.policy_checkpoint is required to evaluate a policy (--policy-checkpoint)")
    return [PolicyController.from_checkpoint(path, mode=config.eval.mode) for path in config.eval.checkpoints]


def _eval(config: Config, kind: str) -> int:
    ev = config.eval
    out = Path(config.run.out)
    reports = []
    for controller in _controllers(config, kind):
        for level in ev.level_list:
            report = evaluate(controller, ev.task, level, n=ev.n, repeats=ev.repeats, seed_base=ev.seed_base,
                              workers=config.run.workers, sim_config=config.sim, preset=config.data.preset)
            stem = f"report_{ev.task}_{level}_{report.encoder}"
            report.save(out / f"{stem}.json")
            report.write_episodes_csv(out / f"{stem}_episodes.csv")
            reports.append(report)
    table = comparison_table(reports)
    (out / "table.txt").write_text(table + "\n")
    (out / "summary.json").write_text(json.dumps(overall_summary(reports), indent=2, sort_keys=True) + "\n")
    directional_notes(reports)
    print(table)
    print(f"\nReports saved to: {out}")
    return 0


def _decompose(config: Config, seed: int, predicted: bool) -> int:
    ev = config.eval
    if not ev.checkpoints:
        raise ConfigError("eval.policy_checkpoint is required for decompose (--policy-checkpoint)")
    controller = PolicyController.from_checkpoint(ev.checkpoints[0], mode=ev.mode)
    env = MiniShape(config.sim, config.data.preset)
    dumps = decompose_rollout(controller, env, ev.task, ev.level_list[0], seed, config.run.out,
                              frames=ev.frame_list, predicted=predicted)
    print(f"Wrote {sum(len(d.paths) for d in dumps)} images for {len(dumps)} frames to {config.run.out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    _configure_logging(args)
    try:
        config = resolve_config(args)
        if config.run.precision:
            T.set_precision(config.run.precision)
        write_run_manifest(config, args.command, argv, __version__)
        if args.command == 'stats':
            manifest = DatasetManifest.load(config.data.dataset)
            print(json.dumps(dataset_stats(manifest), indent=2, sort_keys=True))
            return 0
        if args.command == 'gen-data':
            return _gen_data(config)
        if args.command in ('pretrain', 'train-policy'):
            return _train(config)
        if args.command == 'eval':
            return _eval(config, args.controller)
        if args.command == 'decompose':
            return _decompose(config, args.rollout_seed, args.predicted)
        return 1

    except ConfigError as e:
        print(f"ERROR: {e}", file=sys.stderr)
        return 2

    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130

    except Exception as e:
        print(f"ERROR: {e}", file=sys.stderr)
        logger.debug("Traceback", exc_info=True)
        return 1


if __name__ == '__main__':
    sys.exit(main())
