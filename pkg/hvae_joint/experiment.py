"""
The two-phase protocol end to end: phantoms, generative training, synthetic
sets, segmenter arms over independent runs, and the two summary tables.

Artifacts live under ``<out_dir>/<plan hash>/``. Finished stages are
recorded in the key=value index.txt, so a rerun of an unchanged plan reuses them.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from dotenv import dotenv_values, set_key

from hvae_joint import settings
from hvae_joint.checkpoints import load_checkpoint, model_from_checkpoint
from hvae_joint.config import fingerprint, to_mapping
from hvae_joint.dataset import augment_pairs, load_dataset
from hvae_joint.errors import ConfigError, HvaeError, StorageError
from hvae_joint.items import SamplePair
from hvae_joint.metrics import (
    MetricSummary,
    dump_pairs,
    evaluate_generation,
    sample_pairs,
    tumor_colocalization,
    write_metrics_csv,
)
from hvae_joint.phantoms import PhantomConfig, generate_dataset
from hvae_joint.training import SegmenterConfig, TrainConfig, train_generative, train_segmenter

logger = logging.getLogger(__name__)

TABLE1_FIELDS = ('arm', 'model', 'synthetic', 'dsc_mean', 'dsc_std', 'runs')
TABLE2_FIELDS = ('model', 'psnr_mean', 'psnr_std', 'ssim_mean', 'ssim_std', 'runs', 'psnr_inf')
RUN_FIELDS = ('run', 'dsc')


@dataclass(frozen=True)
class ExperimentPlan:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    generative: TrainConfig = field(default_factory=TrainConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    models: Tuple[str, ...] = ('vae', 'hvae')
    n_train: int = settings.N_TRAIN
    n_test: int = settings.N_TEST
    synthetic_counts: Tuple[int, ...] = settings.SYNTHETIC_COUNTS
    runs: int = settings.RUNS
    std_aug: bool = False
    std_aug_factors: Tuple[int, ...] = settings.STD_AUG_FACTORS
    eval_subset: int = settings.EVAL_SUBSET
    threshold: float = settings.SAMPLE_THRESHOLD
    seed: int = settings.SEED
    out_dir: str = settings.OUT_DIR

    def validate(self) -> None:
        self.phantom.validate()
        self.segmenter.validate()
        if not self.models or any(kind not in ('vae', 'hvae') for kind in self.models):
            raise ConfigError(f"models must be a non-empty subset of vae,hvae, got {self.models}")
        if len(set(self.models)) != len(self.models):
            raise ConfigError(f"models repeat: {self.models}")
        for kind in self.models:
            replace(self.generative, model_kind=kind).validate()
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError(f"n_train and n_test must be >= 1, got {self.n_train}, {self.n_test}")
        counts = self.synthetic_counts
        if not counts or any(c < 1 for c in counts) or list(counts) != sorted(set(counts)):
            raise ConfigError(f"synthetic_counts must be positive, distinct and sorted, got {counts}")
        if self.runs < 1:
            raise ConfigError(f"runs must be >= 1, got {self.runs}")
        if self.std_aug and any(f < 2 for f in self.std_aug_factors):
            raise ConfigError(f"std_aug_factors must be >= 2, got {self.std_aug_factors}")
        if self.eval_subset < 1:
            raise ConfigError(f"eval_subset must be >= 1, got {self.eval_subset}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        try:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"Output directory {self.out_dir} is not writable: {e}") from e

    def fingerprint(self) -> str:
        """Hash of everything that shapes the results; output directory and thread counts excluded."""
        return fingerprint(replace(self, out_dir='', generative=replace(self.generative, threads=1),
                                   segmenter=replace(self.segmenter, threads=1)))


@dataclass
class ExperimentResult:
    directory: Path
    table1: Path
    table2: Path
    dsc: Dict[str, MetricSummary] = field(default_factory=dict)
    colocalization: Dict[str, Optional[float]] = field(default_factory=dict)


class _Stages:
    """Runs named stages once per experiment hash and records provenance."""

    def __init__(self, directory: Path, experiment: str):
        self.directory = directory
        self.experiment = experiment
        self.index = directory / 'index.txt'
        try:
            self.index.touch()
        except OSError as e:
            raise StorageError(f"Stage index under {directory} is not usable: {e}") from e
        self.hits = 0
        self.misses = 0

    def is_done(self, stage: str) -> bool:
        """A stage is done once the index names its artifact."""
        return bool(dotenv_values(self.index, interpolate=False).get(f"stage.{stage}"))

    def run(self, stage: str, artifact: Path, build: Callable[[], None]) -> Path:
        if self.is_done(stage) and artifact.exists():
            self.hits += 1
            logger.info(f"Stage {stage}: cache hit ({artifact})")
            return artifact
        self.misses += 1
        logger.info(f"Stage {stage}: running")
        try:
            build()
        except HvaeError as e:
            raise type(e)(f"Stage '{stage}' failed: {e}") from e
        set_key(str(self.index), f"stage.{stage}", str(artifact.relative_to(self.directory)), quote_mode='never')
        logger.info(f"Stage {stage}: wrote {artifact}")
        return artifact


def _write_rows(path: Path, fields, rows) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {e}") from e


def _read_run_values(path: Path) -> List[float]:
    try:
        with open(path, newline='', encoding='utf-8') as f:
            return [float(row['dsc']) for row in csv.DictReader(f)]
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}") from e


def _arm_seed(plan: ExperimentPlan, *keys: int) -> np.random.Generator:
    return np.random.default_rng([plan.seed, *keys])


def run_full_experiment(plan: ExperimentPlan) -> ExperimentResult:
    """
    Run every stage of the protocol and write the summary tables.

    Returns:
        ExperimentResult naming the experiment directory and both tables

    Raises:
        HvaeError: The first failing stage, with its name in the message
    """
    plan.validate()
    experiment = plan.fingerprint()[:12]
    directory = Path(plan.out_dir) / experiment
    directory.mkdir(parents=True, exist_ok=True)
    stages = _Stages(directory, experiment)
    set_key(str(stages.index), 'plan', plan.fingerprint(), quote_mode='never')
    for key, value in to_mapping(replace(plan, out_dir='')).items():
        set_key(str(stages.index), f"plan.{key}", value or '-', quote_mode='never')
    logger.info(f"Experiment {experiment} in {directory}")

    data_dir = directory / 'data'
    stages.run('phantoms-train', data_dir / 'train.csv',
               lambda: generate_dataset(plan.phantom, plan.n_train, 'train', data_dir, index_offset=0,
                                        threads=plan.generative.threads))
    stages.run('phantoms-test', data_dir / 'test.csv',
               lambda: generate_dataset(plan.phantom, plan.n_test, 'test', data_dir, index_offset=plan.n_train,
                                        threads=plan.generative.threads))
    train_pairs = load_dataset(data_dir / 'train.csv')
    test_pairs = load_dataset(data_dir / 'test.csv')

    pools: Dict[str, List[SamplePair]] = {}
    for model_index, kind in enumerate(plan.models):
        config = replace(plan.generative, model_kind=kind)
        model_dir = directory / 'models' / kind
        checkpoint_path = stages.run(f"train-{kind}", model_dir / f"{kind}.ckpt",
                                     lambda: train_generative(train_pairs, config, model_dir))

        sample_dir = directory / 'samples' / kind

        def draw() -> None:
            model = model_from_checkpoint(load_checkpoint(checkpoint_path))
            pairs = sample_pairs(model, plan.synthetic_counts[-1], plan.threshold,
                                 _arm_seed(plan, 1, model_index))
            dump_pairs(pairs, sample_dir, prefix=kind)

        manifest = stages.run(f"sample-{kind}", sample_dir / f"{kind}.csv", draw)
        pools[kind] = load_dataset(manifest)

    arms: List[Tuple[str, str, int, Callable[[int], List[SamplePair]]]] = [
        ('reference', 'real', 0, lambda run: []),
    ]
    for model_index, kind in enumerate(plan.models):
        for count in plan.synthetic_counts:
            def synthetic(run: int, kind=kind, count=count, model_index=model_index) -> List[SamplePair]:
                order = _arm_seed(plan, 2, model_index, run).permutation(len(pools[kind]))
                return [pools[kind][int(i)] for i in order[:count]]
            arms.append((f"{kind}+{count}", kind, count, synthetic))
    if plan.std_aug:
        for factor in plan.std_aug_factors:
            def augmented(run: int, factor=factor) -> List[SamplePair]:
                return augment_pairs(train_pairs, factor, _arm_seed(plan, 3, factor, run))[len(train_pairs):]
            arms.append((f"std-aug-x{factor}", 'std-aug', (factor - 1) * len(train_pairs), augmented))

    result = ExperimentResult(directory=directory, table1=directory / 'table1.csv',
                              table2=directory / 'table2.csv')
    table1 = []
    for arm, model_name, synthetic_count, extra in arms:
        arm_dir = directory / 'arms' / arm

        def train_arm(arm_dir=arm_dir, extra=extra) -> None:
            rows = []
            for run in range(plan.runs):
                seg_config = replace(plan.segmenter, seed=plan.segmenter.seed + run)
                trained = train_segmenter(train_pairs, extra(run) or None, seg_config, held_out=test_pairs,
                                          out_dir=arm_dir, name=f"run{run:02d}")
                rows.append({'run': run, 'dsc': repr(trained.final_dsc)})
            _write_rows(arm_dir / 'runs.csv', RUN_FIELDS, rows)

        runs_csv = stages.run(f"arm-{arm}", arm_dir / 'runs.csv', train_arm)
        summary = MetricSummary(_read_run_values(runs_csv))
        result.dsc[arm] = summary
        table1.append({'arm': arm, 'model': model_name, 'synthetic': synthetic_count,
                       'dsc_mean': repr(summary.mean), 'dsc_std': repr(summary.std), 'runs': summary.n})
    _write_rows(result.table1, TABLE1_FIELDS, table1)

    table2 = []
    for model_index, kind in enumerate(plan.models):
        report = evaluate_generation(pools[kind], test_pairs, plan.runs, _arm_seed(plan, 4, model_index),
                                     subset=plan.eval_subset)
        write_metrics_csv(report, directory / 'metrics' / f"{kind}.csv")
        psnr, ssim = report.summary('psnr_db'), report.summary('ssim')
        table2.append({'model': kind, 'psnr_mean': repr(psnr.mean), 'psnr_std': repr(psnr.std),
                       'ssim_mean': repr(ssim.mean), 'ssim_std': repr(ssim.std),
                       'runs': report.runs, 'psnr_inf': report.psnr_inf})
        fraction = tumor_colocalization(pools[kind])
        result.colocalization[kind] = fraction
        logger.info(f"{kind}: tumor colocalization "
                    f"{'n/a' if fraction is None else f'{fraction:.3f}'} over {len(pools[kind])} samples")
    _write_rows(result.table2, TABLE2_FIELDS, table2)

    set_key(str(stages.index), 'table1', result.table1.name, quote_mode='never')
    set_key(str(stages.index), 'table2', result.table2.name, quote_mode='never')
    logger.info(f"Experiment {experiment} finished: {stages.hits} cached stages, {stages.misses} run; "
                f"tables in {directory}")
    return result
