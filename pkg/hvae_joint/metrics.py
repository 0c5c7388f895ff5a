"""
Sampling joint pairs from a trained decoder and scoring them: DSC for
segmentation, PSNR and SSIM for image fidelity.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from hvae_joint import settings
from hvae_joint.checkpoints import Checkpoint, load_checkpoint, model_from_checkpoint
from hvae_joint.errors import ConfigError, DataError, ShapeError, StorageError
from hvae_joint.items import SamplePair
from hvae_joint.nn import GenerativeModel
from hvae_joint.tensor import Tensor, no_record
from infra.image_store import ImageStore

logger = logging.getLogger(__name__)

REPORT_FIELDS = ('run', 'metric', 'value')


def sample_pairs(source: Union[GenerativeModel, Checkpoint, str, Path], n: int,
                 threshold: float = settings.SAMPLE_THRESHOLD,
                 rng: Optional[np.random.Generator] = None) -> List[SamplePair]:
    """
    Draw z ~ N(0, I) and decode it into image/mask pairs.

    Args:
        source: A model, a loaded checkpoint or a checkpoint path
        n: Number of pairs, >= 1
        threshold: Mask pixels are 1 where sigmoid(logit) > threshold
        rng: Source of the latent draws

    Returns:
        Pairs with images clamped to [0,1] and exactly binary masks
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    model = model_from_checkpoint(source) if isinstance(source, Checkpoint) else source
    rng = rng if rng is not None else np.random.default_rng(settings.SEED)

    pairs = []
    with no_record():
        for _ in range(n):
            decoded = model.decode(Tensor(rng.standard_normal(model.latent_dim)))
            image = np.clip(decoded.image_mean.data, 0.0, 1.0)
            mask = (decoded.mask_logits.sigmoid().data > threshold).astype(np.float64)
            pairs.append(SamplePair(Tensor(image), Tensor(mask)))
    return pairs


def _as_array(value) -> np.ndarray:
    return np.asarray(value.data if isinstance(value, Tensor) else value, dtype=np.float64)


def _check_same_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {list(a.shape)} and {list(b.shape)} differ")


def dice(a, b) -> float:
    """
    Dice similarity 2|a & b| / (|a| + |b|) of two binary masks.

    Two empty masks score 1.0.
    """
    a, b = _as_array(a), _as_array(b)
    _check_same_shape('dice', a, b)
    for mask in (a, b):
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise DataError(f"dice needs binary masks, got values {np.unique(mask)[:5].tolist()}")
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.sum(a * b) / total)


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; math.inf when the images are identical."""
    if not max_val > 0:
        raise ConfigError(f"max_val must be positive, got {max_val}")
    a, b = _as_array(a), _as_array(b)
    _check_same_shape('psnr', a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _windows(image: np.ndarray, window: int) -> np.ndarray:
    height, width = image.shape
    rows, cols = height // window, width // window
    cropped = image[:rows * window, :cols * window]
    return cropped.reshape(rows, window, cols, window).transpose(0, 2, 1, 3).reshape(rows * cols, window * window)


def ssim(a, b, window: int = settings.SSIM_WINDOW, max_val: float = 1.0) -> float:
    """
    Mean SSIM over non-overlapping window x window patches.

    Uniform weights, population statistics, C1 = (0.01 max_val)^2 and
    C2 = (0.03 max_val)^2. Leading channel axes of size 1 are dropped;
    trailing rows/columns that do not fill a window are ignored.
    """
    a, b = _as_array(a), _as_array(b)
    _check_same_shape('ssim', a, b)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects a single-channel image, got shape {list(a.shape)}")
    if a.shape[0] < window or a.shape[1] < window:
        raise ShapeError(f"ssim: image {list(a.shape)} is smaller than the {window}x{window} window")

    c1 = (0.01 * max_val) ** 2
    c2 = (0.03 * max_val) ** 2
    pa, pb = _windows(a, window), _windows(b, window)
    mu_a, mu_b = pa.mean(axis=1), pb.mean(axis=1)
    var_a = ((pa - mu_a[:, None]) ** 2).mean(axis=1)
    var_b = ((pb - mu_b[:, None]) ** 2).mean(axis=1)
    cov = ((pa - mu_a[:, None]) * (pb - mu_b[:, None])).mean(axis=1)
    per_window = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(per_window.mean())


@dataclass
class MetricSummary:
    values: List[float] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        if not self.values:
            return math.nan
        finite = [v for v in self.values if math.isfinite(v)]
        if not finite:
            return self.values[0]
        return float(np.mean(finite))

    @property
    def std(self) -> float:
        """Unbiased standard deviation of the finite values; 0 for a single run."""
        finite = [v for v in self.values if math.isfinite(v)]
        if len(finite) < 2:
            return 0.0
        return float(np.std(finite, ddof=1))


@dataclass
class MetricsReport:
    runs: int
    samples: int
    metrics: Dict[str, MetricSummary] = field(default_factory=dict)
    psnr_inf: int = 0

    def summary(self, metric: str) -> MetricSummary:
        try:
            return self.metrics[metric]
        except KeyError:
            raise ConfigError(f"Report has no metric '{metric}'") from None

    def describe(self) -> str:
        parts = [f"{name}={s.mean:.4f}+-{s.std:.4f}" for name, s in self.metrics.items()]
        return f"{', '.join(parts)} ({self.runs} runs, {self.samples} samples)"


def _match_min_mse(image: np.ndarray, references: np.ndarray) -> int:
    errors = ((references - image[None]) ** 2).reshape(len(references), -1).mean(axis=1)
    return int(np.argmin(errors))


def evaluate_generation(generated: Sequence[SamplePair], reference: Sequence[SamplePair], runs: int,
                        rng: np.random.Generator, subset: Optional[int] = None) -> MetricsReport:
    """
    PSNR/SSIM between generated images and their closest reference images.

    Each run draws ``subset`` generated images without replacement (all of
    them when None), matches each to the reference image with minimum MSE and
    averages PSNR and SSIM over the matched pairs. Identical pairs are left
    out of the PSNR average and counted per run; ``psnr_inf`` is the largest
    such count over the runs, so identical sets of n images report n. A run
    where every pair is identical scores math.inf.
    """
    if not generated or not reference:
        raise DataError("evaluate_generation needs non-empty generated and reference sets")
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    size = len(generated) if subset is None else min(subset, len(generated))
    if size < 1:
        raise ConfigError(f"subset must be >= 1, got {subset}")

    references = np.stack([p.image_array() for p in reference])
    candidates = [p.image_array() for p in generated]
    report = MetricsReport(runs=runs, samples=size,
                           metrics={'psnr_db': MetricSummary(), 'ssim': MetricSummary()})
    for _ in range(runs):
        chosen = rng.choice(len(candidates), size=size, replace=False) if size < len(candidates) \
            else np.arange(len(candidates))
        psnrs, ssims = [], []
        identical = 0
        for index in chosen:
            image = candidates[int(index)]
            match = references[_match_min_mse(image, references)]
            value = psnr(image, match)
            if math.isinf(value):
                identical += 1
            else:
                psnrs.append(value)
            ssims.append(ssim(image, match))
        report.metrics['psnr_db'].values.append(float(np.mean(psnrs)) if psnrs else math.inf)
        report.metrics['ssim'].values.append(float(np.mean(ssims)))
        report.psnr_inf = max(report.psnr_inf, identical)
    logger.info(f"Generation metrics: {report.describe()}")
    return report


def tumor_colocalization(pairs: Sequence[SamplePair]) -> Optional[float]:
    """
    Fraction of pairs with a non-empty mask whose image is brighter inside the
    mask than outside it. Masks covering the whole image are skipped too,
    since the outside mean is undefined for them. None when no pair qualifies.
    """
    eligible = hits = 0
    for pair in pairs:
        image, mask = pair.image_array(), pair.mask_array() > 0.5
        if not mask.any() or mask.all():
            continue
        eligible += 1
        hits += image[mask].mean() > image[~mask].mean()
    if eligible == 0:
        return None
    return hits / eligible


def write_metrics_csv(report: MetricsReport, path) -> Path:
    """Write run,metric,value rows followed by mean and std rows per metric."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
            writer.writeheader()
            for name, summary in report.metrics.items():
                for run, value in enumerate(summary.values):
                    writer.writerow({'run': run, 'metric': name, 'value': repr(value)})
            for name, summary in report.metrics.items():
                writer.writerow({'run': 'mean', 'metric': name, 'value': repr(summary.mean)})
                writer.writerow({'run': 'std', 'metric': name, 'value': repr(summary.std)})
    except OSError as e:
        raise StorageError(f"Failed to write metrics report {path}: {e}") from e
    logger.info(f"Wrote metrics report to {path}")
    return path


def dump_pairs(pairs: Sequence[SamplePair], out_dir, prefix: str = 'sample') -> Path:
    """Write pairs as PGM image/mask files plus a manifest for inspection."""
    store = ImageStore(root=str(out_dir), fmt='pgm')
    if not store.connect():
        raise StorageError(f"Cannot write samples to {out_dir}")
    rows = []
    for index, pair in enumerate(pairs):
        record_id = f"{prefix}-{index:06d}"
        image_path, mask_path = store.insert_pair(record_id, pair.image_array(), pair.mask_array())
        rows.append({'id': record_id, 'image': image_path, 'mask': mask_path, 'split': 'generated'})
    manifest_path = store.root / f"{prefix}.csv"
    store.write_manifest(rows, manifest_path, provenance=prefix)
    store.close()
    logger.info(f"Dumped {len(rows)} pairs to {store.root}")
    return manifest_path
