"""
Neural building blocks and the encoder, decoder and U-Net assemblies.

Parameters live in a ParameterSet keyed by dotted names (``enc.level0.res.conv1.weight``).
Forward functions take a ParameterScope, so the same code runs against the
trained parameters, against perturbed copies in gradient checks, and
against a checkpoint loaded from disk.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from hvae_joint import settings
from hvae_joint.errors import ConfigError, DataError, ShapeError
from hvae_joint.tensor import (
    Tensor,
    concat_channels,
    conv2d,
    matmul,
    max_pool2,
    softmax,
    upsample_nearest,
)

logger = logging.getLogger(__name__)


class ParameterSet:
    """
    Ordered, uniquely named parameter tensors of one model.

    Insertion order is the serialization order, so it must not depend on
    anything but the model config.
    """

    def __init__(self):
        self._tensors: 'OrderedDict[str, Tensor]' = OrderedDict()
        self.init_spec: Dict[str, str] = {}

    def add(self, name: str, values: np.ndarray, init: str) -> Tensor:
        if name in self._tensors:
            raise ConfigError(f"Duplicate parameter name: {name}")
        tensor = Tensor(values, requires_grad=True)
        self._tensors[name] = tensor
        self.init_spec[name] = init
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ShapeError(f"Unknown parameter: {name}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> List[Tensor]:
        return list(self._tensors.values())

    @property
    def num_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def scope(self, prefix: str) -> 'ParameterScope':
        return ParameterScope(self, prefix)

    def arrays(self) -> 'OrderedDict[str, np.ndarray]':
        """Writable copies of every parameter, in order."""
        return OrderedDict((name, t.numpy()) for name, t in self._tensors.items())

    def assign(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Replace parameter values; names and shapes must match exactly."""
        missing = [name for name in self._tensors if name not in arrays]
        extra = [name for name in arrays if name not in self._tensors]
        if missing or extra:
            raise ShapeError(f"Parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, tensor in self._tensors.items():
            values = np.asarray(arrays[name], dtype=np.float64)
            if values.shape != tensor.shape:
                raise ShapeError(f"Parameter {name}: expected shape {list(tensor.shape)}, got {list(values.shape)}")
            self._tensors[name] = Tensor(values, requires_grad=True)

    def with_tensors(self, replacements: Mapping[str, Tensor]) -> 'ParameterSet':
        """Shallow copy with some tensors swapped (used for gradient checks)."""
        copy = ParameterSet()
        for name, tensor in self._tensors.items():
            copy._tensors[name] = replacements.get(name, tensor)
        copy.init_spec = dict(self.init_spec)
        return copy


class ParameterScope:
    """Read-only view of a ParameterSet under a name prefix."""

    def __init__(self, params: ParameterSet, prefix: str):
        self.params = params
        self.prefix = prefix

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"{self.prefix}.{name}"]

    def __contains__(self, name: str) -> bool:
        return f"{self.prefix}.{name}" in self.params

    def scope(self, name: str) -> 'ParameterScope':
        return ParameterScope(self.params, f"{self.prefix}.{name}")


# ---------------------------------------------------------------------------
# Parameter initialisation
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tuple[np.ndarray, str]:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape), f"uniform(-{bound:.6g},{bound:.6g})"


def add_conv(params: ParameterSet, name: str, c_out: int, c_in: int, kernel: int,
             rng: np.random.Generator, zero: bool = False) -> None:
    fan_in = c_in * kernel * kernel
    if zero:
        params.add(f"{name}.weight", np.zeros((c_out, c_in, kernel, kernel)), 'zeros')
        params.add(f"{name}.bias", np.zeros(c_out), 'zeros')
        return
    weight, spec = _uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
    params.add(f"{name}.weight", weight, spec)
    bias, spec = _uniform(rng, (c_out,), fan_in)
    params.add(f"{name}.bias", bias, spec)


def add_linear(params: ParameterSet, name: str, n_out: int, n_in: int, rng: np.random.Generator) -> None:
    weight, spec = _uniform(rng, (n_out, n_in), n_in)
    params.add(f"{name}.weight", weight, spec)
    bias, spec = _uniform(rng, (n_out,), n_in)
    params.add(f"{name}.bias", bias, spec)


def add_norm(params: ParameterSet, name: str, channels: int) -> None:
    params.add(f"{name}.weight", np.ones(channels), 'ones')
    params.add(f"{name}.bias", np.zeros(channels), 'zeros')


def add_residual_block(params: ParameterSet, name: str, channels: int, rng: np.random.Generator) -> None:
    add_conv(params, f"{name}.conv1", channels, channels, 3, rng)
    add_norm(params, f"{name}.norm", channels)
    add_conv(params, f"{name}.conv2", channels, channels, 3, rng, zero=True)


def add_self_attention(params: ParameterSet, name: str, channels: int, reduction: int,
                       rng: np.random.Generator) -> None:
    if channels % reduction:
        raise ConfigError(f"Attention at {name}: {channels} channels not divisible by reduction {reduction}")
    inner = channels // reduction
    add_conv(params, f"{name}.query", inner, channels, 1, rng)
    add_conv(params, f"{name}.key", inner, channels, 1, rng)
    add_conv(params, f"{name}.value", channels, channels, 1, rng)
    params.add(f"{name}.gamma", np.zeros(1), 'zeros')


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------

def conv(scope: ParameterScope, x: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    weight = scope['weight']
    if padding is None:
        padding = weight.shape[-1] // 2
    return conv2d(x, weight, scope['bias'], stride=stride, padding=padding)


def linear(scope: ParameterScope, x: Tensor) -> Tensor:
    weight = scope['weight']
    n_out, n_in = weight.shape
    if x.size != n_in:
        raise ShapeError(f"Linear layer expects {n_in} inputs, got shape {list(x.shape)}")
    return matmul(weight, x.reshape((n_in, 1))).reshape((n_out,)) + scope['bias']


def num_groups(channels: int) -> int:
    if channels >= settings.GROUP_SIZE and channels % settings.GROUP_SIZE == 0:
        return channels // settings.GROUP_SIZE
    return 1


def group_norm(scope: ParameterScope, x: Tensor, eps: float = settings.NORM_EPS) -> Tensor:
    channels, height, width = x.shape
    groups = num_groups(channels)
    grouped = x.reshape((groups, (channels // groups) * height * width))
    mean = grouped.mean(1, keepdims=True).broadcast_to(grouped.shape)
    centered = grouped - mean
    variance = (centered * centered).mean(1, keepdims=True).broadcast_to(grouped.shape)
    normed = (centered / (variance + eps) ** 0.5).reshape(x.shape)
    scale = scope['weight'].reshape((channels, 1, 1)).broadcast_to(x.shape)
    shift = scope['bias'].reshape((channels, 1, 1)).broadcast_to(x.shape)
    return normed * scale + shift


def residual_block_forward(scope: ParameterScope, x: Tensor) -> Tensor:
    """
    Residual block: x + conv3x3(leaky(norm(conv3x3(x)))).

    Raises:
        ShapeError: If x has a different channel count than the block
    """
    channels = scope['conv1.weight'].shape[1]
    if x.ndim != 3 or x.shape[0] != channels:
        raise ShapeError(f"Residual block expects {channels} channels, got shape {list(x.shape)}")
    branch = conv(scope.scope('conv1'), x)
    branch = group_norm(scope.scope('norm'), branch).leaky_relu(settings.LEAKY_SLOPE)
    branch = conv(scope.scope('conv2'), branch)
    return x + branch


def attention_weights(scope: ParameterScope, x: Tensor) -> Tensor:
    """Row-stochastic [N, N] attention matrix over the N = H*W positions."""
    channels, height, width = x.shape
    query = conv(scope.scope('query'), x).reshape((-1, height * width))
    key = conv(scope.scope('key'), x).reshape((-1, height * width))
    return softmax(matmul(query.transpose(), key), axis=-1)


def self_attention_forward(scope: ParameterScope, x: Tensor) -> Tensor:
    """
    Gated self-attention over spatial positions: x + gamma * Attn(x).

    Query and key are 1x1 projections to C / reduction channels, value is a
    1x1 projection to C channels. With gamma = 0 the block is the identity.
    """
    channels = scope['value.weight'].shape[1]
    if x.ndim != 3 or x.shape[0] != channels:
        raise ShapeError(f"Self-attention expects {channels} channels, got shape {list(x.shape)}")
    _, height, width = x.shape
    weights = attention_weights(scope, x)
    value = conv(scope.scope('value'), x).reshape((channels, height * width))
    attended = matmul(value, weights.transpose()).reshape(x.shape)
    return x + scope['gamma'] * attended


# ---------------------------------------------------------------------------
# Generative model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    height: int = settings.PHANTOM_SIZE
    width: int = settings.PHANTOM_SIZE
    widths: Tuple[int, ...] = settings.MODEL_WIDTHS
    latent_dim: int = settings.LATENT_DIM
    attention_reduction: int = settings.ATTENTION_REDUCTION
    in_channels: int = 2

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int]:
        scale = 2 ** self.levels
        return self.widths[-1], self.height // scale, self.width // scale

    def validate(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.attention_reduction < 1:
            raise ConfigError(f"attention_reduction must be >= 1, got {self.attention_reduction}")
        scale = 2 ** self.levels
        if self.height % scale or self.width % scale:
            raise ConfigError(f"Image size {self.height}x{self.width} not divisible by {scale} "
                              f"({self.levels} downsampling levels)")
        if self.widths[-1] % self.attention_reduction:
            raise ConfigError(f"Deepest width {self.widths[-1]} not divisible by "
                              f"attention_reduction {self.attention_reduction}")


@dataclass
class EncoderOutput:
    mu: Tensor
    logvar: Tensor


@dataclass
class DecoderOutput:
    image_mean: Tensor
    mask_logits: Tensor


def _level_width(config: ModelConfig, index: int) -> int:
    return config.widths[min(index, config.levels - 1)]


def build_model_params(config: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    """Initialise encoder and decoder parameters in their serialization order."""
    config.validate()
    params = ParameterSet()
    widths, levels, reduction = config.widths, config.levels, config.attention_reduction
    deepest, bh, bw = config.bottleneck_shape

    add_conv(params, 'enc.stem', widths[0], config.in_channels, 3, rng)
    for i in range(levels):
        add_residual_block(params, f"enc.level{i}.res", widths[i], rng)
        if i == levels - 1:
            add_self_attention(params, f"enc.level{i}.attn", widths[i], reduction, rng)
        add_conv(params, f"enc.level{i}.down", _level_width(config, i + 1), widths[i], 4, rng)
    add_residual_block(params, 'enc.bottleneck.res', deepest, rng)
    add_self_attention(params, 'enc.bottleneck.attn', deepest, reduction, rng)
    flat = deepest * bh * bw
    add_linear(params, 'enc.mu', config.latent_dim, flat, rng)
    add_linear(params, 'enc.logvar', config.latent_dim, flat, rng)

    add_linear(params, 'dec.fc', flat, config.latent_dim, rng)
    add_residual_block(params, 'dec.bottleneck.res', deepest, rng)
    add_self_attention(params, 'dec.bottleneck.attn', deepest, reduction, rng)
    for i in reversed(range(levels)):
        add_conv(params, f"dec.level{i}.up", widths[i], _level_width(config, i + 1), 3, rng)
        add_residual_block(params, f"dec.level{i}.res", widths[i], rng)
        if i == levels - 1:
            add_self_attention(params, f"dec.level{i}.attn", widths[i], reduction, rng)
    add_conv(params, 'dec.image_head', 1, widths[0], 3, rng)
    add_conv(params, 'dec.mask_head', 1, widths[0], 3, rng)

    logger.debug(f"Built generative model with {len(params)} tensors, {params.num_values} values")
    return params


def encoder_forward(params: ParameterSet, x_and_m: Tensor, config: ModelConfig,
                    validate_mask: bool = True) -> EncoderOutput:
    """
    Map a concatenated [2,H,W] image+mask to the mean and log-variance of q(z|x,m).

    Args:
        params: Model parameters
        x_and_m: Image in channel 0, binary mask in channel 1
        config: Model config the parameters were built with
        validate_mask: Reject non-binary mask channels

    Returns:
        EncoderOutput with mu and logvar of shape [latent_dim]
    """
    expected = (config.in_channels, config.height, config.width)
    if x_and_m.shape != expected:
        raise ShapeError(f"Encoder expects input {list(expected)}, got {list(x_and_m.shape)}")
    if validate_mask:
        mask = x_and_m.data[1]
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise DataError(f"Encoder mask channel is not binary: values {np.unique(mask)[:5].tolist()}")

    enc = params.scope('enc')
    h = conv(enc.scope('stem'), x_and_m).leaky_relu()
    for i in range(config.levels):
        level = enc.scope(f"level{i}")
        h = residual_block_forward(level.scope('res'), h)
        if i == config.levels - 1:
            h = self_attention_forward(level.scope('attn'), h)
        h = conv(level.scope('down'), h, stride=2, padding=1).leaky_relu()
    h = residual_block_forward(enc.scope('bottleneck.res'), h)
    h = self_attention_forward(enc.scope('bottleneck.attn'), h)
    flat = h.flatten()
    return EncoderOutput(mu=linear(enc.scope('mu'), flat), logvar=linear(enc.scope('logvar'), flat))


def decoder_forward(params: ParameterSet, z: Tensor, config: ModelConfig) -> DecoderOutput:
    """Decode a latent vector into an image mean and mask logits, each [1,H,W]."""
    if z.shape != (config.latent_dim,):
        raise ShapeError(f"Decoder expects z of shape [{config.latent_dim}], got {list(z.shape)}")
    dec = params.scope('dec')
    h = linear(dec.scope('fc'), z).reshape(config.bottleneck_shape).leaky_relu()
    h = residual_block_forward(dec.scope('bottleneck.res'), h)
    h = self_attention_forward(dec.scope('bottleneck.attn'), h)
    for i in reversed(range(config.levels)):
        level = dec.scope(f"level{i}")
        h = conv(level.scope('up'), upsample_nearest(h)).leaky_relu()
        h = residual_block_forward(level.scope('res'), h)
        if i == config.levels - 1:
            h = self_attention_forward(level.scope('attn'), h)
    return DecoderOutput(image_mean=conv(dec.scope('image_head'), h),
                         mask_logits=conv(dec.scope('mask_head'), h))


def reparameterize(mu: Tensor, logvar: Tensor, noise: Tensor) -> Tensor:
    """z0 = mu + exp(logvar / 2) * noise."""
    if not mu.shape == logvar.shape == noise.shape:
        raise ShapeError(f"reparameterize shape mismatch: mu {list(mu.shape)}, "
                         f"logvar {list(logvar.shape)}, noise {list(noise.shape)}")
    return mu + (logvar * 0.5).exp() * noise


class GenerativeModel:
    """
    Encoder/decoder parameters together with the settings of the latent flow.

    ``hmc`` is None for the plain VAE.
    """

    def __init__(self, kind: str, config: ModelConfig, params: ParameterSet, hmc=None,
                 sigma_x: float = settings.SIGMA_X, mask_weight: float = settings.MASK_WEIGHT):
        if kind not in ('vae', 'hvae'):
            raise ConfigError(f"model_kind must be 'vae' or 'hvae', got '{kind}'")
        if sigma_x <= 0:
            raise ConfigError(f"sigma_x must be positive, got {sigma_x}")
        self.kind = kind
        self.config = config
        self.params = params
        self.hmc = hmc
        self.sigma_x = float(sigma_x)
        self.mask_weight = float(mask_weight)

    @classmethod
    def build(cls, kind: str, config: ModelConfig, rng: np.random.Generator, hmc=None,
              sigma_x: float = settings.SIGMA_X, mask_weight: float = settings.MASK_WEIGHT) -> 'GenerativeModel':
        return cls(kind, config, build_model_params(config, rng), hmc=hmc,
                   sigma_x=sigma_x, mask_weight=mask_weight)

    def with_params(self, params: ParameterSet) -> 'GenerativeModel':
        return GenerativeModel(self.kind, self.config, params, hmc=self.hmc,
                               sigma_x=self.sigma_x, mask_weight=self.mask_weight)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def encode(self, image: Tensor, mask: Tensor) -> EncoderOutput:
        return encoder_forward(self.params, concat_channels(image, mask), self.config)

    def decode(self, z: Tensor) -> DecoderOutput:
        return decoder_forward(self.params, z, self.config)


# ---------------------------------------------------------------------------
# U-Net segmenter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    height: int = settings.PHANTOM_SIZE
    width: int = settings.PHANTOM_SIZE
    depth: int = settings.SEG_DEPTH
    base_width: int = settings.SEG_WIDTH

    def level_width(self, level: int) -> int:
        return self.base_width * 2 ** level

    def validate(self) -> None:
        if self.depth < 1 or self.base_width < 1:
            raise ConfigError(f"U-Net depth and base_width must be >= 1, got {self.depth}, {self.base_width}")
        scale = 2 ** self.depth
        if self.height % scale or self.width % scale:
            raise ConfigError(f"U-Net input {self.height}x{self.width} not divisible by 2^{self.depth}")


def build_unet_params(config: UNetConfig, rng: np.random.Generator) -> ParameterSet:
    config.validate()
    params = ParameterSet()
    c_in = 1
    for i in range(config.depth):
        width = config.level_width(i)
        add_conv(params, f"unet.down{i}.conv1", width, c_in, 3, rng)
        add_conv(params, f"unet.down{i}.conv2", width, width, 3, rng)
        c_in = width
    bottom = config.level_width(config.depth)
    add_conv(params, 'unet.bottom.conv1', bottom, c_in, 3, rng)
    add_conv(params, 'unet.bottom.conv2', bottom, bottom, 3, rng)
    for i in reversed(range(config.depth)):
        width = config.level_width(i)
        add_conv(params, f"unet.up{i}.reduce", width, config.level_width(i + 1), 3, rng)
        add_conv(params, f"unet.up{i}.conv1", width, 2 * width, 3, rng)
        add_conv(params, f"unet.up{i}.conv2", width, width, 3, rng)
    add_conv(params, 'unet.head', 1, config.base_width, 1, rng)
    return params


def _double_conv(scope: ParameterScope, x: Tensor) -> Tensor:
    x = conv(scope.scope('conv1'), x).relu()
    return conv(scope.scope('conv2'), x).relu()


def unet_forward(params: ParameterSet, image: Tensor, config: UNetConfig) -> Tensor:
    """
    Segment a [1,H,W] image into [1,H,W] mask logits.

    Raises:
        ShapeError: If H or W is not divisible by 2^depth
    """
    if image.ndim != 3 or image.shape[0] != 1:
        raise ShapeError(f"U-Net expects a [1,H,W] image, got {list(image.shape)}")
    scale = 2 ** config.depth
    if image.shape[1] % scale or image.shape[2] % scale:
        raise ShapeError(f"U-Net input {list(image.shape)} not divisible by 2^{config.depth}")

    net = params.scope('unet')
    skips = []
    h = image
    for i in range(config.depth):
        h = _double_conv(net.scope(f"down{i}"), h)
        skips.append(h)
        h = max_pool2(h)
    h = _double_conv(net.scope('bottom'), h)
    for i in reversed(range(config.depth)):
        up = net.scope(f"up{i}")
        h = conv(up.scope('reduce'), upsample_nearest(h)).relu()
        h = _double_conv(up, concat_channels(skips[i], h))
    return conv(net.scope('head'), h)
