from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scrapy

from hvae_joint.errors import DataError, ShapeError
from hvae_joint.tensor import Tensor


@dataclass(frozen=True)
class SamplePair:
    """Image in [0,1] and binary mask, both [1,H,W]."""
    image: Tensor
    mask: Tensor

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ShapeError(f"SamplePair image must be [1,H,W], got {list(self.image.shape)}")
        if self.image.shape != self.mask.shape:
            raise ShapeError(f"SamplePair image {list(self.image.shape)} and mask {list(self.mask.shape)} differ")
        if not np.all(np.isfinite(self.image.data)):
            raise DataError("SamplePair image has non-finite values")
        if self.image.data.min() < 0.0 or self.image.data.max() > 1.0:
            raise DataError(f"SamplePair image outside [0,1]: "
                            f"[{self.image.data.min():.4g}, {self.image.data.max():.4g}]")
        if not np.all((self.mask.data == 0.0) | (self.mask.data == 1.0)):
            raise DataError(f"SamplePair mask is not binary: values {np.unique(self.mask.data)[:5].tolist()}")

    @classmethod
    def from_arrays(cls, image: np.ndarray, mask: np.ndarray) -> 'SamplePair':
        """Build from [H,W] or [1,H,W] arrays."""
        image = np.asarray(image, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if image.ndim == 2:
            image = image[None]
        if mask.ndim == 2:
            mask = mask[None]
        return cls(Tensor(image), Tensor(mask))

    @property
    def spatial_shape(self):
        return self.image.shape[1:]

    def image_array(self) -> np.ndarray:
        return self.image.data[0]

    def mask_array(self) -> np.ndarray:
        return self.mask.data[0]


@dataclass(frozen=True)
class ManifestRecord:
    """One row of a dataset manifest."""
    id: str          # Unique record id within the manifest
    image: str       # Image path, relative to the manifest directory
    mask: str        # Mask path, relative to the manifest directory
    split: str       # train or test


@dataclass
class DatasetManifest:
    """Ordered manifest records plus where they came from."""
    records: List[ManifestRecord] = field(default_factory=list)
    provenance: str = 'external'     # Phantom config fingerprint, or "external"
    path: Optional[str] = None       # Where the manifest CSV lives once written

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> List[str]:
        return [record.id for record in self.records]

    def validate(self) -> None:
        seen = set()
        for record in self.records:
            if record.id in seen:
                raise DataError(f"Duplicate manifest id: {record.id}")
            seen.add(record.id)


class PairItem(scrapy.Item):
    """Item for one external image/mask pair on its way through the ingestion pipelines."""
    # Required fields
    stem = scrapy.Field()            # Shared file stem of image and mask
    image_path = scrapy.Field()      # Absolute path of the source image
    mask_path = scrapy.Field()       # Absolute path of the source mask

    # Filled by the spider / pipelines
    image = scrapy.Field()           # Decoded image [H,W]
    mask = scrapy.Field()            # Decoded mask [H,W]
    image_maxval = scrapy.Field()    # Full-scale value of the stored image
    mask_maxval = scrapy.Field()     # Full-scale value of the stored mask
    split = scrapy.Field()           # train or test

    # Metadata fields
    source = scrapy.Field()          # Where the pair came from
