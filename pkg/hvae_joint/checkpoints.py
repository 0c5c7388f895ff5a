"""
Binary checkpoints for the generative models and the segmenter.

Layout (all integers little-endian):

    magic "HVAE" | u32 version | u32 n | n bytes of key=value header lines
    | u32 n | n bytes of JSON rng state | u32 tensor count
    | per tensor: u16 name length, name, u32 ndim, ndim * u32 dims, f64 values

Tensors are stored in parameter order, so a round trip is bit-exact.
"""

import io
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from dotenv import dotenv_values

from hvae_joint import settings
from hvae_joint.config import from_mapping
from hvae_joint.errors import ConfigError, StorageError
from hvae_joint.hamiltonian import HmcConfig
from hvae_joint.nn import GenerativeModel, ModelConfig, UNetConfig, build_model_params, build_unet_params

logger = logging.getLogger(__name__)

_U16 = struct.Struct('<H')
_U32 = struct.Struct('<I')


@dataclass
class Checkpoint:
    model_kind: str
    config: Dict[str, str]
    tensors: 'OrderedDict[str, np.ndarray]'
    rng_state: Optional[Dict[str, Any]] = None
    version: int = settings.CHECKPOINT_VERSION

    def parameter_tensors(self) -> 'OrderedDict[str, np.ndarray]':
        """Model parameters only (optimizer moments excluded)."""
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith('adam.'))


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    header = {'model_kind': checkpoint.model_kind, **checkpoint.config}
    header_bytes = ''.join(f"{key}={value}\n" for key, value in header.items()).encode('utf-8')
    rng_bytes = json.dumps(checkpoint.rng_state, sort_keys=True).encode('utf-8')

    buffer = io.BytesIO()
    buffer.write(settings.CHECKPOINT_MAGIC)
    buffer.write(_U32.pack(checkpoint.version))
    buffer.write(_U32.pack(len(header_bytes)))
    buffer.write(header_bytes)
    buffer.write(_U32.pack(len(rng_bytes)))
    buffer.write(rng_bytes)
    buffer.write(_U32.pack(len(checkpoint.tensors)))
    for name, values in checkpoint.tensors.items():
        encoded = name.encode('utf-8')
        values = np.asarray(values, dtype=np.float64)
        buffer.write(_U16.pack(len(encoded)))
        buffer.write(encoded)
        buffer.write(_U32.pack(values.ndim))
        for extent in values.shape:
            buffer.write(_U32.pack(extent))
        buffer.write(values.astype('<f8').tobytes())

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(buffer.getvalue())
    except OSError as e:
        raise StorageError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Saved {checkpoint.model_kind} checkpoint to {path}")
    return path


class _Reader:
    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.path = path
        self.position = 0

    def take(self, count: int) -> bytes:
        if self.position + count > len(self.payload):
            raise StorageError(f"Truncated checkpoint: {self.path}")
        chunk = self.payload[self.position:self.position + count]
        self.position += count
        return chunk

    def unpack(self, fmt: struct.Struct) -> int:
        return fmt.unpack(self.take(fmt.size))[0]


def load_checkpoint(path) -> Checkpoint:
    """
    Read a checkpoint.

    Raises:
        StorageError: Unreadable file, wrong magic, or unsupported version
    """
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise StorageError(f"Failed to read checkpoint {path}: {e}") from e

    reader = _Reader(payload, path)
    if reader.take(4) != settings.CHECKPOINT_MAGIC:
        raise StorageError(f"Not a checkpoint (bad magic): {path}")
    version = reader.unpack(_U32)
    if version != settings.CHECKPOINT_VERSION:
        raise StorageError(f"Checkpoint {path} has format version {version}, "
                           f"expected {settings.CHECKPOINT_VERSION}")
    header_text = reader.take(reader.unpack(_U32)).decode('utf-8')
    header = {k: v or '' for k, v in dotenv_values(stream=io.StringIO(header_text)).items()}
    rng_state = json.loads(reader.take(reader.unpack(_U32)).decode('utf-8'))

    tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for _ in range(reader.unpack(_U32)):
        name = reader.take(reader.unpack(_U16)).decode('utf-8')
        shape = tuple(reader.unpack(_U32) for _ in range(reader.unpack(_U32)))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(reader.take(8 * count), dtype='<f8').astype(np.float64).reshape(shape)
    if reader.position != len(payload):
        raise StorageError(f"Trailing bytes in checkpoint {path}")

    model_kind = header.pop('model_kind', '')
    return Checkpoint(model_kind=model_kind, config=header, tensors=tensors,
                      rng_state=rng_state, version=version)


def _hmc_from_header(header: Dict[str, str]) -> HmcConfig:
    return from_mapping(HmcConfig, {k[len('hmc_'):]: v for k, v in header.items() if k.startswith('hmc_')})


def model_from_checkpoint(checkpoint: Checkpoint) -> GenerativeModel:
    """Rebuild a GenerativeModel with the checkpoint's parameters."""
    if checkpoint.model_kind not in ('vae', 'hvae'):
        raise ConfigError(f"Checkpoint holds a '{checkpoint.model_kind}' model, not a generative model")
    header = checkpoint.config
    try:
        model_config = ModelConfig(
            height=int(header['data_height']),
            width=int(header['data_width']),
            widths=tuple(int(w) for w in header['widths'].split(',')),
            latent_dim=int(header['latent_dim']),
            attention_reduction=int(header['attention_reduction']),
        )
        sigma_x = float(header['sigma_x'])
        mask_weight = float(header['mask_weight'])
    except (KeyError, ValueError) as e:
        raise StorageError(f"Checkpoint header is incomplete: {e}") from e
    params = build_model_params(model_config, np.random.default_rng(0))
    params.assign(checkpoint.parameter_tensors())
    hmc = _hmc_from_header(header) if checkpoint.model_kind == 'hvae' else None
    return GenerativeModel(checkpoint.model_kind, model_config, params, hmc=hmc,
                           sigma_x=sigma_x, mask_weight=mask_weight)


def unet_from_checkpoint(checkpoint: Checkpoint):
    """Rebuild (UNetConfig, ParameterSet) from a segmenter checkpoint."""
    if checkpoint.model_kind != 'unet':
        raise ConfigError(f"Checkpoint holds a '{checkpoint.model_kind}' model, not a segmenter")
    header = checkpoint.config
    try:
        config = UNetConfig(height=int(header['data_height']), width=int(header['data_width']),
                            depth=int(header['depth']), base_width=int(header['base_width']))
    except (KeyError, ValueError) as e:
        raise StorageError(f"Checkpoint header is incomplete: {e}") from e
    params = build_unet_params(config, np.random.default_rng(0))
    params.assign(checkpoint.parameter_tensors())
    return config, params

