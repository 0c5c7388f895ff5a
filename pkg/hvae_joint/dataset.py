"""
Loading paired datasets from manifests, ingesting external paired data, and
the rotation/flip augmentation used by the standard-augmentation arms.
"""

import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
from scrapy.utils.misc import load_object

from hvae_joint import settings
from hvae_joint.errors import ConfigError, DataError
from hvae_joint.items import DatasetManifest, ManifestRecord, SamplePair
from hvae_joint.pipelines import is_binary_mask
from hvae_joint.spiders import crawl_pairs, match_pairs
from infra.image_store import ImageStore

logger = logging.getLogger(__name__)


def load_manifest(manifest_path) -> DatasetManifest:
    """Read a manifest CSV and its provenance side file."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"Manifest not found: {manifest_path}")
    store = ImageStore(root=str(manifest_path.parent))
    records = [ManifestRecord(**row) for row in store.find(manifest_path)]
    provenance = store.read_meta(manifest_path).get('provenance', 'external')
    manifest = DatasetManifest(records=records, provenance=provenance, path=str(manifest_path))
    manifest.validate()
    return manifest


def _read_mask(store: ImageStore, path: Path, record_id: str) -> np.ndarray:
    values, maxval = store.read_raw(path)
    if not is_binary_mask(values, maxval):
        distinct = np.unique(values)
        raise DataError(f"Mask of '{record_id}' has values outside {{0,1}}/{{0,{maxval}}}: "
                        f"{distinct[:8].tolist()}")
    if maxval != 1 and values.max() > 1:
        values = values / maxval
    return (values >= 0.5).astype(np.float64)


def load_dataset(manifest_path, split: Optional[str] = None) -> List[SamplePair]:
    """
    Load every pair of a manifest.

    Args:
        manifest_path: Manifest CSV; its paths are relative to its directory
        split: Only records of this split (all when None)

    Returns:
        Pairs in manifest order, images in [0,1], masks exactly binary

    Raises:
        DataError: Missing file (naming the record id), non-binary mask or
            shapes that disagree
    """
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    store = ImageStore(root=str(base))
    pairs: List[SamplePair] = []
    shape = None
    for record in manifest.records:
        if split is not None and record.split != split:
            continue
        image_path, mask_path = base / record.image, base / record.mask
        for path in (image_path, mask_path):
            if not path.is_file():
                raise DataError(f"Record '{record.id}' references a missing file: {path}")
        image = np.clip(store.read_image(image_path), 0.0, 1.0)
        mask = _read_mask(store, mask_path, record.id)
        if image.shape != mask.shape:
            raise DataError(f"Record '{record.id}': image {list(image.shape)} and mask {list(mask.shape)} differ")
        if shape is None:
            shape = image.shape
        elif image.shape != shape:
            raise DataError(f"Record '{record.id}' has shape {list(image.shape)}, expected {list(shape)}")
        pairs.append(SamplePair.from_arrays(image, mask))
    logger.info(f"Loaded {len(pairs)} pairs from {manifest_path}")
    return pairs


def _check_pipelines(pipelines: Dict[str, int]) -> Dict[str, int]:
    for dotted in pipelines:
        try:
            load_object(dotted)
        except (ImportError, NameError, ValueError) as e:
            raise ConfigError(f"Cannot load ingestion pipeline {dotted}: {e}") from e
    return dict(pipelines)


def ingest_external(image_dir, mask_dir, pattern: str = '*', manifest_path=None,
                    split: str = 'train', pipelines: Optional[Dict[str, int]] = None) -> DatasetManifest:
    """
    Validate externally supplied image/mask pairs and write a manifest for them.

    Files are paired by stem and crawled by PairSpider. Every pair goes through
    the ITEM_PIPELINES (duplicate stems, mask validation, cleaning, shape
    consistency, manifest).

    Args:
        image_dir: Directory of images
        mask_dir: Directory of masks with the same stems
        pattern: Glob applied in both directories
        manifest_path: Where to write the manifest (defaults to manifest.csv next to image_dir)
        split: Split recorded for every pair
        pipelines: ITEM_PIPELINES override (dotted path -> order)

    Returns:
        The written DatasetManifest

    Raises:
        DataError: Missing directory, unmatched stems, no usable pairs, or every
            rejected pair (non-binary mask, shape disagreement, undecodable file)
        ConfigError: A pipeline path that does not load
    """
    pairs = match_pairs(image_dir, mask_dir, pattern)
    if not pairs:
        raise DataError(f"No usable pairs found in {image_dir} and {mask_dir}")
    pipelines = _check_pipelines(settings.ITEM_PIPELINES if pipelines is None else pipelines)
    manifest_path = Path(manifest_path) if manifest_path is not None else Path(image_dir).parent / 'manifest.csv'

    outcome = crawl_pairs(pipelines, image_dir=str(image_dir), mask_dir=str(mask_dir), pattern=pattern,
                          manifest_path=str(manifest_path), split=split)
    if outcome['failure']:
        raise DataError(f"Ingestion crawl failed: {outcome['failure']}")
    if outcome['rejected']:
        raise DataError(f"{len(outcome['rejected'])} pairs rejected: {'; '.join(outcome['rejected'])}")
    if outcome['accepted'] == 0:
        raise DataError(f"No usable pairs found in {image_dir} and {mask_dir}")

    logger.info(f"Ingested {outcome['accepted']} pairs ({outcome['dropped']} dropped); {outcome['summary']}")
    return load_manifest(manifest_path)


def transform_pair(pair: SamplePair, rotation: int, flip: int) -> SamplePair:
    """Rotate by rotation * 90 degrees, then flip (0 none, 1 horizontal, 2 vertical), jointly."""
    image, mask = pair.image_array(), pair.mask_array()
    image, mask = np.rot90(image, rotation), np.rot90(mask, rotation)
    if flip == 1:
        image, mask = np.fliplr(image), np.fliplr(mask)
    elif flip == 2:
        image, mask = np.flipud(image), np.flipud(mask)
    return SamplePair.from_arrays(np.ascontiguousarray(image), np.ascontiguousarray(mask))


def augment_pairs(pairs: Sequence[SamplePair], factor: int, rng: np.random.Generator) -> List[SamplePair]:
    """
    Standard augmentation: the real pairs plus (factor - 1) transformed copies of each.

    Each copy uses a random non-identity combination of a rotation by a
    multiple of 90 degrees and an optional horizontal or vertical flip.
    Odd rotations are only used when every image is square.
    """
    if factor < 1:
        raise ConfigError(f"Augmentation factor must be >= 1, got {factor}")
    square = all(p.spatial_shape[0] == p.spatial_shape[1] for p in pairs)
    choices = [(r, f) for r in range(4) for f in range(3) if (r, f) != (0, 0) and (square or r % 2 == 0)]
    augmented = list(pairs)
    for _ in range(factor - 1):
        for pair in pairs:
            rotation, flip = choices[int(rng.integers(len(choices)))]
            augmented.append(transform_pair(pair, rotation, flip))
    return augmented


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    """Index batches over range(n), shuffled when an rng is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
