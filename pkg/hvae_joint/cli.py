"""
Command line for the pipeline: phantom-gen, ingest, train, sample, seg-train,
eval and experiment.

Settings precedence per key: dataclass default (which reads the environment
through settings) < --config file < explicit flag.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from hvae_joint import settings
from hvae_joint.checkpoints import load_checkpoint, model_from_checkpoint
from hvae_joint.config import from_mapping, load_config_file
from hvae_joint.dataset import ingest_external, load_dataset
from hvae_joint.errors import ConfigError, HvaeError, StorageError
from hvae_joint.experiment import ExperimentPlan, run_full_experiment
from hvae_joint.metrics import (
    dump_pairs,
    evaluate_generation,
    sample_pairs,
    tumor_colocalization,
    write_metrics_csv,
)
from hvae_joint.phantoms import PhantomConfig, generate_dataset
from hvae_joint.tensor import set_strict_finite
from hvae_joint.training import SegmenterConfig, TrainConfig, train_generative, train_segmenter

logger = logging.getLogger('hvae_joint.cli')


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
                        help='key=value config file; keys are config field names')
    common.add_argument('--seed', type=int, default=None, help='Random seed')
    common.add_argument('--out', type=str, default=None,
                        help=f"Output directory (default: {settings.OUT_DIR})")
    common.add_argument('--threads', type=int, default=None,
                        help='Worker threads; 1 is the bit-reproducible mode')
    common.add_argument('--log-level', type=str, default=settings.LOG_LEVEL,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')
    common.add_argument('--strict-finite', action='store_true',
                        help='Fail on the first operation that produces a non-finite value')
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog='hvae-joint',
                                     description='Joint image and mask generation with a Hamiltonian VAE')
    commands = parser.add_subparsers(dest='command', required=True)

    phantoms = commands.add_parser('phantom-gen', parents=[common], help='Generate phantom pairs')
    phantoms.add_argument('--n', type=int, default=settings.N_TRAIN, help='Number of pairs')
    phantoms.add_argument('--split', choices=['train', 'test'], default='train')
    phantoms.add_argument('--size', type=int, default=None, help='Square image extent in pixels')
    phantoms.add_argument('--format', choices=['pgm', 'pgm16', 'raw'], default=None, help='Image file format')
    phantoms.add_argument('--index-offset', type=int, default=None,
                          help='First sample index (default: 0 for train, n for test)')

    ingest = commands.add_parser('ingest', parents=[common], help='Build a manifest from external pairs')
    ingest.add_argument('--images', type=str, required=True, help='Directory of images')
    ingest.add_argument('--masks', type=str, required=True, help='Directory of masks')
    ingest.add_argument('--pattern', type=str, default='*', help='Glob applied in both directories')
    ingest.add_argument('--manifest', type=str, default=None, help='Manifest path to write')
    ingest.add_argument('--split', type=str, default='train')

    train = commands.add_parser('train', parents=[common], help='Train a VAE or HVAE')
    train.add_argument('--data', type=str, required=True, help='Training manifest')
    train.add_argument('--model', dest='model_kind', choices=['vae', 'hvae'], default=None)
    train.add_argument('--epochs', type=int, default=None)
    train.add_argument('--batch-size', type=int, default=None)
    train.add_argument('--lr', dest='learning_rate', type=float, default=None)
    train.add_argument('--latent-dim', type=int, default=None)
    train.add_argument('--hmc-steps', type=int, default=None)
    train.add_argument('--hmc-step-size', type=float, default=None)
    train.add_argument('--resume', type=str, default=None, help='Checkpoint to continue from')

    sample = commands.add_parser('sample', parents=[common], help='Sample pairs from a checkpoint')
    sample.add_argument('--checkpoint', type=str, required=True)
    sample.add_argument('--n', type=int, default=settings.EVAL_SUBSET)
    sample.add_argument('--threshold', type=float, default=settings.SAMPLE_THRESHOLD)

    seg = commands.add_parser('seg-train', parents=[common], help='Train the U-Net segmenter')
    seg.add_argument('--real', type=str, required=True, help='Manifest of real pairs')
    seg.add_argument('--synthetic', type=str, default=None, help='Manifest of synthetic pairs')
    seg.add_argument('--held-out', type=str, default=None, help='Manifest scored with Dice per epoch')
    seg.add_argument('--epochs', type=int, default=None)
    seg.add_argument('--batch-size', type=int, default=None)

    evaluate = commands.add_parser('eval', parents=[common], help='PSNR/SSIM of generated against reference')
    source = evaluate.add_mutually_exclusive_group(required=True)
    source.add_argument('--generated', type=str, help='Manifest of generated pairs')
    source.add_argument('--checkpoint', type=str, help='Sample the generated set from this checkpoint')
    evaluate.add_argument('--reference', type=str, required=True, help='Manifest of reference pairs')
    evaluate.add_argument('--n', type=int, default=settings.EVAL_SUBSET, help='Pairs sampled from --checkpoint')
    evaluate.add_argument('--runs', type=int, default=settings.RUNS)
    evaluate.add_argument('--subset', type=int, default=settings.EVAL_SUBSET)

    experiment = commands.add_parser('experiment', parents=[common], help='Run the full protocol')
    experiment.add_argument('--runs', type=int, default=None)
    experiment.add_argument('--counts', dest='synthetic_counts', type=str, default=None,
                            help='Comma-separated synthetic counts, e.g. 100,200')
    experiment.add_argument('--models', type=str, default=None, help='Comma-separated subset of vae,hvae')
    experiment.add_argument('--std-aug', action='store_true', default=None,
                            help='Add the rotation/flip augmentation arms')
    return parser


def _resolve(cls, args: argparse.Namespace, flags: Dict[str, Any]):
    """Dataclass default < config file < flags that were given."""
    base = cls()
    if args.config:
        base = from_mapping(cls, load_config_file(args.config), base=base)
    overrides = {key: value for key, value in flags.items() if value is not None}
    config = from_mapping(cls, overrides, base=base) if overrides else base
    config.validate()
    return config


def _out_dir(args: argparse.Namespace, default: Optional[str] = None) -> Path:
    return Path(args.out or default or settings.OUT_DIR)


def _no_config(args: argparse.Namespace) -> None:
    if args.config:
        raise ConfigError(f"'{args.command}' does not read a config file")


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    config = _resolve(PhantomConfig, args, {'seed': args.seed, 'height': args.size, 'width': args.size})
    generate_dataset(config, args.n, split=args.split, out_dir=_out_dir(args, settings.DATA_DIR),
                     fmt=args.format, index_offset=args.index_offset, threads=args.threads or 1)
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    _no_config(args)
    manifest_path = args.manifest or (str(_out_dir(args, settings.DATA_DIR) / 'manifest.csv') if args.out else None)
    manifest = ingest_external(args.images, args.masks, pattern=args.pattern,
                               manifest_path=manifest_path, split=args.split)
    logger.info(f"Manifest with {len(manifest)} pairs at {manifest.path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve(TrainConfig, args, {
        'seed': args.seed, 'threads': args.threads, 'model_kind': args.model_kind, 'epochs': args.epochs,
        'batch_size': args.batch_size, 'learning_rate': args.learning_rate, 'latent_dim': args.latent_dim,
        'hmc_steps': args.hmc_steps, 'hmc_step_size': args.hmc_step_size,
    })
    pairs = load_dataset(args.data, split=None)
    result = train_generative(pairs, config, _out_dir(args), resume=args.resume)
    logger.info(f"Checkpoint {result.checkpoint_path}, loss curve {result.loss_csv}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    _no_config(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else settings.SEED)
    pairs = sample_pairs(args.checkpoint, args.n, threshold=args.threshold, rng=rng)
    manifest = dump_pairs(pairs, _out_dir(args), prefix='sample')
    fraction = tumor_colocalization(pairs)
    logger.info(f"Sampled {len(pairs)} pairs to {manifest}; tumor colocalization "
                f"{'n/a' if fraction is None else f'{fraction:.3f}'}")
    return 0


def cmd_seg_train(args: argparse.Namespace) -> int:
    config = _resolve(SegmenterConfig, args, {'seed': args.seed, 'threads': args.threads,
                                              'epochs': args.epochs, 'batch_size': args.batch_size})
    real = load_dataset(args.real)
    synthetic = load_dataset(args.synthetic) if args.synthetic else None
    held_out = load_dataset(args.held_out) if args.held_out else None
    result = train_segmenter(real, synthetic, config, held_out=held_out, out_dir=_out_dir(args))
    logger.info(f"Final held-out DSC {result.final_dsc:.4f}; curve in {result.dsc_csv}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    _no_config(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else settings.SEED)
    if args.checkpoint:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        generated = sample_pairs(model, args.n, rng=rng)
        dump_pairs(generated, _out_dir(args) / 'samples', prefix='eval')
    else:
        generated = load_dataset(args.generated)
    reference = load_dataset(args.reference)
    report = evaluate_generation(generated, reference, args.runs, rng, subset=args.subset)
    write_metrics_csv(report, _out_dir(args) / 'metrics.csv')
    return 0


def _split_ints(raw: Optional[str]) -> Optional[tuple]:
    if raw is None:
        return None
    try:
        return tuple(int(part) for part in raw.split(',') if part.strip())
    except ValueError as e:
        raise ConfigError(f"Expected comma-separated integers, got '{raw}'") from e


def cmd_experiment(args: argparse.Namespace) -> int:
    models = tuple(part.strip() for part in args.models.split(',')) if args.models else None
    plan = _resolve(ExperimentPlan, args, {
        'seed': args.seed, 'out_dir': args.out, 'runs': args.runs,
        'synthetic_counts': _split_ints(args.synthetic_counts), 'models': models, 'std_aug': args.std_aug,
        'generative_threads': args.threads, 'segmenter_threads': args.threads,
    })
    result = run_full_experiment(plan)
    logger.info(f"Tables written to {result.table1} and {result.table2}")
    return 0


COMMANDS = {
    'phantom-gen': cmd_phantom_gen,
    'ingest': cmd_ingest,
    'train': cmd_train,
    'sample': cmd_sample,
    'seg-train': cmd_seg_train,
    'eval': cmd_eval,
    'experiment': cmd_experiment,
}


def configure_logging(level: str = settings.LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=settings.LOG_FORMAT,
        handlers=[logging.StreamHandler()],
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    if args.strict_finite:
        set_strict_finite(True)
    if args.threads is not None and args.threads < 1:
        logger.error(f"--threads must be >= 1, got {args.threads}")
        return ConfigError.exit_code

    try:
        return COMMANDS[args.command](args)
    except HvaeError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return StorageError.exit_code


def run(argv: Optional[List[str]] = None) -> None:
    sys.exit(main(argv))


if __name__ == '__main__':
    run()
