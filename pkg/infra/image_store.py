import csv
import io
import os
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from dotenv import dotenv_values, set_key
from PIL import Image

from hvae_joint.errors import DataError, StorageError

MANIFEST_FIELDS = ('id', 'image', 'mask', 'split')
RAW_MAGIC = b'IMGF'
RAW_HEADER = struct.Struct('<4sII4x')
FORMAT_EXTENSIONS = {'pgm': '.pgm', 'pgm16': '.pgm', 'raw': '.imgf'}
# Sample type and full-scale value per PGM format
PGM_DEPTHS = {'pgm': (np.uint8, 255), 'pgm16': (np.int32, 65535)}
# Pillow image mode of a decoded PGM and its full-scale value
PGM_MODES = {'L': 255, 'I': 65535, 'I;16': 65535, 'I;16B': 65535}
PGM_MAGICS = (b'P2', b'P5')


class ImageStore:
    """
    File-backed store for image/mask pairs and their CSV manifests.

    Images are written as 8- or 16-bit binary PGM through Pillow, or as IMGF
    raw files (16-byte header, then little-endian f64 values in row-major
    order).
    """
    def __init__(self, root: Optional[str] = None, fmt: Optional[str] = None):
        """
        Initialize the store.

        Args:
            root: Directory holding the pairs (defaults to environment variable)
            fmt: Image format for new files, "pgm", "pgm16" or "raw" (defaults to environment variable)
        """
        self.logger = logging.getLogger(__name__)

        self.root = Path(root or os.environ.get('HVAE_DATA_DIR', os.path.join(os.getcwd(), 'data')))
        self.fmt = fmt or os.environ.get('HVAE_IMAGE_FORMAT', 'pgm')
        self.connected = False

    def connect(self) -> bool:
        """
        Make sure the root directory exists and is writable.

        Returns:
            bool: True if the store is usable, False otherwise
        """
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            if not os.access(self.root, os.W_OK):
                self.logger.error(f"Image store root is not writable: {self.root}")
                return False
            self.connected = True
            self.logger.info(f"Connected to image store at {self.root} (format: {self.fmt})")
            return True
        except OSError as e:
            self.logger.error(f"Failed to open image store {self.root}: {e}")
            return False

    def close(self) -> None:
        if self.connected:
            self.connected = False
            self.logger.debug(f"Image store {self.root} closed")

    def _require(self) -> None:
        if not self.connected and not self.connect():
            raise StorageError(f"Image store {self.root} is not available")

    # -- images -----------------------------------------------------------

    def write_image(self, path, values: np.ndarray, fmt: Optional[str] = None) -> Path:
        """
        Write one [H,W] array with values in [0,1].

        Args:
            path: Target file
            values: 2-D array
            fmt: "pgm" (quantized to 8 bits), "pgm16" (16 bits) or "raw" (exact)

        Returns:
            The written path
        """
        fmt = fmt or self.fmt
        path = Path(path)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"Images are stored as [H,W] arrays, got shape {list(values.shape)}")
        height, width = values.shape
        if fmt in PGM_DEPTHS:
            dtype, maxval = PGM_DEPTHS[fmt]
            quantized = np.round(np.clip(values, 0.0, 1.0) * maxval).astype(dtype)
            buffer = io.BytesIO()
            Image.fromarray(quantized).save(buffer, format='PPM')
            payload = buffer.getvalue()
        elif fmt == 'raw':
            payload = RAW_HEADER.pack(RAW_MAGIC, height, width) + values.astype('<f8').tobytes()
        else:
            raise DataError(f"Unknown image format: {fmt}")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
        except OSError as e:
            raise StorageError(f"Failed to write image {path}: {e}") from e
        return path

    def read_raw(self, path) -> Tuple[np.ndarray, int]:
        """
        Decode an image file without rescaling.

        Returns:
            (values, maxval): sample values as float64 [H,W] and their
            full-scale value (255 or 65535 for PGM, 1 for IMGF files)
        """
        path = Path(path)
        try:
            payload = path.read_bytes()
        except OSError as e:
            raise StorageError(f"Failed to read image {path}: {e}") from e
        return self.decode(payload, path)

    def decode(self, payload: bytes, source='<bytes>') -> Tuple[np.ndarray, int]:
        """Decode image bytes (IMGF, binary or plain PGM) the way read_raw does."""
        if payload[:4] == RAW_MAGIC:
            return self._decode_raw(source, payload), 1
        if payload[:2] in PGM_MAGICS:
            return self._decode_pgm(source, payload)
        raise DataError(f"Unrecognized image format: {source}")

    def read_image(self, path) -> np.ndarray:
        """Decode an image file into an [H,W] float64 array scaled to [0,1]."""
        values, maxval = self.read_raw(path)
        return values / maxval if maxval != 1 else values

    def _decode_raw(self, path: Path, payload: bytes) -> np.ndarray:
        if len(payload) < RAW_HEADER.size:
            raise DataError(f"Truncated IMGF header: {path}")
        _, height, width = RAW_HEADER.unpack_from(payload)
        expected = RAW_HEADER.size + 8 * height * width
        if len(payload) != expected:
            raise DataError(f"IMGF file {path} has {len(payload)} bytes, expected {expected}")
        return np.frombuffer(payload, dtype='<f8', offset=RAW_HEADER.size).reshape(height, width).astype(np.float64)

    def _decode_pgm(self, source, payload: bytes) -> Tuple[np.ndarray, int]:
        try:
            with Image.open(io.BytesIO(payload), formats=['PPM']) as image:
                image.load()
                mode = image.mode
                values = np.asarray(image, dtype=np.float64)
        except (OSError, ValueError, SyntaxError) as e:
            raise DataError(f"Malformed PGM file {source}: {e}") from e
        if mode not in PGM_MODES:
            raise DataError(f"PGM file {source} decoded to unsupported mode {mode}")
        return values, PGM_MODES[mode]

    def insert_pair(self, record_id: str, image: np.ndarray, mask: np.ndarray,
                    fmt: Optional[str] = None) -> Tuple[str, str]:
        """
        Write an image/mask pair under the store root.

        Returns:
            (image, mask) paths relative to the root
        """
        self._require()
        fmt = fmt or self.fmt
        extension = FORMAT_EXTENSIONS.get(fmt)
        if extension is None:
            raise DataError(f"Unknown image format: {fmt}")
        image_name = f"{record_id}_image{extension}"
        mask_name = f"{record_id}_mask{extension}"
        self.write_image(self.root / image_name, image, fmt)
        self.write_image(self.root / mask_name, mask, fmt)
        return image_name, mask_name

    # -- manifests --------------------------------------------------------

    def write_manifest(self, rows: Iterable[Dict[str, str]], path=None,
                       provenance: str = 'external') -> Path:
        """
        Write a manifest CSV (id,image,mask,split) and its key=value side file.

        Args:
            rows: Dicts with the manifest fields
            path: Manifest path (defaults to <root>/manifest.csv)
            provenance: Phantom config fingerprint or "external"

        Returns:
            The manifest path
        """
        path = Path(path) if path is not None else self.root / 'manifest.csv'
        rows = list(rows)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
                writer.writeheader()
                for row in rows:
                    writer.writerow({key: row[key] for key in MANIFEST_FIELDS})
            meta = self.meta_path(path)
            meta.touch()
            set_key(str(meta), 'provenance', provenance, quote_mode='never')
            set_key(str(meta), 'count', str(len(rows)), quote_mode='never')
        except OSError as e:
            raise StorageError(f"Failed to write manifest {path}: {e}") from e
        self.logger.info(f"Wrote manifest {path} with {len(rows)} records")
        return path

    @staticmethod
    def meta_path(manifest_path) -> Path:
        manifest_path = Path(manifest_path)
        return manifest_path.with_name(manifest_path.name + '.meta')

    def read_meta(self, manifest_path) -> Dict[str, str]:
        meta = self.meta_path(manifest_path)
        if not meta.is_file():
            return {}
        return {key: value or '' for key, value in dotenv_values(meta).items()}

    def find(self, manifest_path, split: Optional[str] = None, limit: int = 0) -> List[Dict[str, str]]:
        """
        Read manifest rows.

        Args:
            manifest_path: Manifest CSV
            split: Only rows of this split (all when None)
            limit: Maximum number of rows (0 = no limit)

        Returns:
            List of row dicts in file order
        """
        manifest_path = Path(manifest_path)
        try:
            with open(manifest_path, newline='', encoding='utf-8') as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                    raise DataError(f"Manifest {manifest_path} header must be {','.join(MANIFEST_FIELDS)}, "
                                    f"got {','.join(reader.fieldnames or ())}")
                rows = [row for row in reader if split is None or row['split'] == split]
        except OSError as e:
            raise StorageError(f"Failed to read manifest {manifest_path}: {e}") from e
        return rows[:limit] if limit > 0 else rows

    def count_records(self, manifest_path, split: Optional[str] = None) -> int:
        return len(self.find(manifest_path, split=split))
