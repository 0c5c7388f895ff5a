"""
Procedural tumor phantoms: a smooth correlated background with one or more
bright elliptical lesions and their exact binary masks.

Every sample is a pure function of (config, index). The per-sample seed is
``seed XOR splitmix64(index)``, so samples can be generated in any order.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from hvae_joint import settings
from hvae_joint.config import fingerprint
from hvae_joint.errors import ConfigError
from hvae_joint.items import DatasetManifest, ManifestRecord, SamplePair
from infra.image_store import ImageStore

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(value: int) -> int:
    """One splitmix64 output for the given state."""
    z = (value + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_seed(seed: int, index: int) -> int:
    return (seed ^ splitmix64(index)) & MASK64


@dataclass(frozen=True)
class PhantomConfig:
    height: int = settings.PHANTOM_SIZE
    width: int = settings.PHANTOM_SIZE
    tumor_count_min: int = settings.PHANTOM_TUMOR_COUNT[0]
    tumor_count_max: int = settings.PHANTOM_TUMOR_COUNT[1]
    tumor_radius_min: float = settings.PHANTOM_RADIUS_RANGE[0]   # fraction of the smaller extent
    tumor_radius_max: float = settings.PHANTOM_RADIUS_RANGE[1]
    tumor_contrast: float = settings.PHANTOM_CONTRAST
    background_smoothness: float = settings.PHANTOM_SMOOTHNESS  # gaussian blur sigma in pixels
    noise_sigma: float = settings.PHANTOM_NOISE_SIGMA
    edge_softness: float = settings.PHANTOM_EDGE_SOFTNESS        # ramp width in normalized radius
    seed: int = settings.SEED

    def validate(self) -> None:
        if self.height < 4 or self.width < 4:
            raise ConfigError(f"Phantom size must be at least 4x4, got {self.height}x{self.width}")
        if not 1 <= self.tumor_count_min <= self.tumor_count_max:
            raise ConfigError(f"Invalid tumor count range [{self.tumor_count_min}, {self.tumor_count_max}]")
        if not 0 < self.tumor_radius_min < self.tumor_radius_max <= 0.5:
            raise ConfigError(f"Tumor radius range [{self.tumor_radius_min}, {self.tumor_radius_max}] "
                              f"must satisfy 0 < min < max <= 0.5")
        if self.tumor_radius_min * min(self.height, self.width) < 0.5:
            raise ConfigError(f"Smallest tumor radius is below half a pixel at {self.height}x{self.width}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.tumor_contrast > 2 * self.noise_sigma:
            raise ConfigError(f"tumor_contrast {self.tumor_contrast} must exceed 2 * noise_sigma "
                              f"({2 * self.noise_sigma})")
        if self.tumor_contrast > 1:
            raise ConfigError(f"tumor_contrast must be <= 1, got {self.tumor_contrast}")
        if not self.background_smoothness > 0:
            raise ConfigError(f"background_smoothness must be positive, got {self.background_smoothness}")
        if self.edge_softness < 0:
            raise ConfigError(f"edge_softness must be >= 0, got {self.edge_softness}")
        if not 0 <= self.seed <= MASK64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def fingerprint(self) -> str:
        return fingerprint(self)


def _background(rng: np.random.Generator, config: PhantomConfig) -> np.ndarray:
    low, high = settings.PHANTOM_BACKGROUND_RANGE
    field = gaussian_filter(rng.standard_normal((config.height, config.width)),
                            sigma=config.background_smoothness, mode='reflect')
    spread = field.max() - field.min()
    if spread <= 0:
        return np.full(field.shape, 0.5 * (low + high))
    return low + (field - field.min()) / spread * (high - low)


def generate_phantom(config: PhantomConfig, index: int) -> SamplePair:
    """
    Build one phantom pair.

    Each tumor is an ellipse with random center, semi-axes and rotation. The
    mask is the union of the ellipse interiors; the intensity bump is
    ``tumor_contrast`` inside and ramps linearly to zero over
    ``edge_softness`` normalized radius outside.
    """
    config.validate()
    rng = np.random.default_rng(sample_seed(config.seed, index))
    height, width = config.height, config.width
    extent = min(height, width)

    image = _background(rng, config)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    mask = np.zeros((height, width), dtype=bool)
    bump = np.zeros((height, width))

    count = int(rng.integers(config.tumor_count_min, config.tumor_count_max + 1))
    for _ in range(count):
        radius_y, radius_x = rng.uniform(config.tumor_radius_min, config.tumor_radius_max, size=2) * extent
        angle = rng.uniform(0.0, math.pi)
        reach = max(radius_y, radius_x)
        center_y = rng.uniform(min(reach, (height - 1) / 2), max(height - 1 - reach, (height - 1) / 2))
        center_x = rng.uniform(min(reach, (width - 1) / 2), max(width - 1 - reach, (width - 1) / 2))

        dy, dx = rows - center_y, cols - center_x
        along = dx * math.cos(angle) + dy * math.sin(angle)
        across = -dx * math.sin(angle) + dy * math.cos(angle)
        distance = np.sqrt((along / radius_x) ** 2 + (across / radius_y) ** 2)

        mask |= distance <= 1.0
        if config.edge_softness > 0:
            weight = np.clip((1.0 + config.edge_softness - distance) / config.edge_softness, 0.0, 1.0)
        else:
            weight = (distance <= 1.0).astype(np.float64)
        bump = np.maximum(bump, weight)

    image = image + config.tumor_contrast * bump
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    return SamplePair.from_arrays(image, mask.astype(np.float64))


def generate_dataset(config: PhantomConfig, n: int, split: str = 'train', out_dir=None,
                     fmt: Optional[str] = None, index_offset: Optional[int] = None,
                     threads: int = 1) -> DatasetManifest:
    """
    Generate n phantom pairs, write them and their manifest.

    Args:
        config: Phantom config
        n: Number of pairs, >= 1
        split: "train" (indices 0..n-1) or "test" (indices n..2n-1)
        out_dir: Target directory; the manifest is written as <split>.csv inside it
        fmt: "pgm", "pgm16" or "raw" (store default when None)
        index_offset: First sample index, overriding the split convention
        threads: Worker threads for generation

    Returns:
        The written DatasetManifest
    """
    config.validate()
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if split not in ('train', 'test'):
        raise ConfigError(f"split must be 'train' or 'test', got '{split}'")
    offset = index_offset if index_offset is not None else (0 if split == 'train' else n)

    store = ImageStore(root=str(out_dir) if out_dir is not None else None, fmt=fmt)
    if not store.connect():
        raise ConfigError(f"Output directory is not usable: {store.root}")
    indices = range(offset, offset + n)

    def write(index: int) -> ManifestRecord:
        pair = generate_phantom(config, index)
        record_id = f"phantom-{index:06d}"
        image_path, mask_path = store.insert_pair(record_id, pair.image_array(), pair.mask_array())
        return ManifestRecord(id=record_id, image=image_path, mask=mask_path, split=split)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(write, indices))
    else:
        records = [write(i) for i in indices]

    manifest_path = store.root / f"{split}.csv"
    provenance = config.fingerprint()
    store.write_manifest((vars(r) for r in records), manifest_path, provenance=provenance)
    store.close()
    logger.info(f"Generated {n} {split} phantoms (indices {offset}..{offset + n - 1}) in {store.root}")
    return DatasetManifest(records=records, provenance=provenance, path=str(manifest_path))
