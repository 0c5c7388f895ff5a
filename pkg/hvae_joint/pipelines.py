import logging
import os
from typing import List, Optional, Tuple

import numpy as np
from scrapy.exceptions import DropItem

from hvae_joint.errors import HvaeError
from hvae_joint.items import DatasetManifest, ManifestRecord, PairItem
from infra.image_store import ImageStore


def _histogram(values: np.ndarray, limit: int = 8) -> str:
    distinct, counts = np.unique(values, return_counts=True)
    parts = [f"{v:g}:{c}" for v, c in zip(distinct[:limit], counts[:limit])]
    if len(distinct) > limit:
        parts.append(f"... ({len(distinct)} distinct values)")
    return ', '.join(parts)


def is_binary_mask(values: np.ndarray, maxval: int) -> bool:
    distinct = set(np.unique(values).tolist())
    return distinct <= {0.0, 1.0} or distinct <= {0.0, float(maxval)}


def _reject(item: PairItem, spider, reason: str) -> DropItem:
    spider.reject(item['stem'], reason)
    return DropItem(reason)


class DuplicateStemPipeline:
    """
    Pipeline for dropping repeated stems (e.g. the same scan stored in two formats).

    Of the image files sharing a stem only the spider's preferred one is kept,
    whatever order the responses arrive in.
    """
    def __init__(self):
        self.logger = logging.getLogger(__name__)

    def process_item(self, item: PairItem, spider) -> PairItem:
        if item['image_path'] != spider.preferred_image(item['stem']):
            self.logger.warning(f"Duplicate stem dropped: {item['stem']} ({item['image_path']})")
            raise DropItem(f"Duplicate stem {item['stem']}")
        return item


class MaskValidationPipeline:
    """
    Pipeline for rejecting masks that are not binary.

    Stored masks may use {0, 1} or {0, maxval}.
    """
    def process_item(self, item: PairItem, spider) -> PairItem:
        if not is_binary_mask(item['mask'], item['mask_maxval']):
            raise _reject(item, spider, f"Mask for '{item['stem']}' is not binary "
                                        f"(value:count {_histogram(item['mask'])})")
        return item


class PairCleaningPipeline:
    """
    Pipeline for normalizing pairs: images rescaled to [0,1], masks mapped to {0,1}.
    """
    def process_item(self, item: PairItem, spider) -> PairItem:
        image = np.asarray(item['image'], dtype=np.float64)
        if item['image_maxval'] != 1:
            image = image / item['image_maxval']
        if not np.all(np.isfinite(image)):
            raise _reject(item, spider, f"Image for '{item['stem']}' has non-finite values")
        item['image'] = np.clip(image, 0.0, 1.0)
        item['mask'] = (np.asarray(item['mask'], dtype=np.float64) > 0).astype(np.float64)
        item['image_maxval'] = item['mask_maxval'] = 1
        return item


class ShapeConsistencyPipeline:
    """
    Pipeline for enforcing one spatial shape across images and masks.
    """
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.shape: Optional[Tuple[int, int]] = None
        self.first_stem: Optional[str] = None

    def open_spider(self, spider):
        self.shape = None
        self.first_stem = None

    def close_spider(self, spider):
        if self.shape is not None:
            self.logger.info(f"All pairs share shape {self.shape[0]}x{self.shape[1]}")

    def process_item(self, item: PairItem, spider) -> PairItem:
        image, mask = item['image'], item['mask']
        if image.shape != mask.shape:
            raise _reject(item, spider, f"Image and mask of '{item['stem']}' differ in shape: "
                                        f"{list(image.shape)} vs {list(mask.shape)}")
        if self.shape is None:
            self.shape, self.first_stem = image.shape, item['stem']
        elif image.shape != self.shape:
            raise _reject(item, spider, f"Shape of '{item['stem']}' {list(image.shape)} disagrees with "
                                        f"'{self.first_stem}' {list(self.shape)}")
        return item


class ManifestPipeline:
    """
    Pipeline for collecting accepted pairs and writing the manifest when the spider closes.

    Nothing is written when the spider rejected any pair.
    """
    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.records: List[ManifestRecord] = []

    def open_spider(self, spider):
        self.records = []

    def process_item(self, item: PairItem, spider) -> PairItem:
        base = spider.manifest_path.parent
        self.records.append(ManifestRecord(
            id=item['stem'],
            image=os.path.relpath(item['image_path'], base),
            mask=os.path.relpath(item['mask_path'], base),
            split=item['split'],
        ))
        return item

    def close_spider(self, spider):
        if spider.rejected:
            self.logger.error(f"Manifest {spider.manifest_path} not written: "
                              f"{len(spider.rejected)} pairs rejected")
            return
        if not self.records:
            return
        records = sorted(self.records, key=lambda record: record.id)
        try:
            DatasetManifest(records=records, provenance=spider.source,
                            path=str(spider.manifest_path)).validate()
            store = ImageStore(root=str(spider.manifest_path.parent))
            store.write_manifest((vars(r) for r in records), spider.manifest_path, provenance=spider.source)
        except HvaeError as e:
            spider.reject('*', str(e))
