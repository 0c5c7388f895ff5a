"""
Training loops for the generative models and the U-Net segmenter.

Both loops share the same shape: seeded per-epoch shuffling, per-sample
gradients reduced in index order, an Adam update per batch, a CSV curve with
one row per epoch and binary checkpoints.
"""

import csv
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from hvae_joint import settings
from hvae_joint.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from hvae_joint.config import fingerprint, to_mapping
from hvae_joint.dataset import iterate_batches
from hvae_joint.errors import ConfigError, DataError, NumericalError, ShapeError, StorageError
from hvae_joint.hamiltonian import HmcConfig
from hvae_joint.items import SamplePair
from hvae_joint.losses import ElboBreakdown, TERM_FIELDS, model_loss
from hvae_joint.metrics import dice
from hvae_joint.nn import GenerativeModel, ModelConfig, ParameterSet, UNetConfig, build_unet_params, unet_forward
from hvae_joint.tensor import ComputationRecord, Tensor, backward, no_record

logger = logging.getLogger(__name__)

LOSS_FIELDS = ('epoch', 'total') + TERM_FIELDS
DSC_FIELDS = ('epoch', 'dsc')


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    model_kind: str = 'hvae'
    epochs: int = settings.EPOCHS
    batch_size: int = settings.BATCH_SIZE
    learning_rate: float = settings.LEARNING_RATE
    latent_dim: int = settings.LATENT_DIM
    widths: Tuple[int, ...] = settings.MODEL_WIDTHS
    attention_reduction: int = settings.ATTENTION_REDUCTION
    seed: int = settings.SEED
    checkpoint_every: int = settings.CHECKPOINT_EVERY
    mask_weight: float = settings.MASK_WEIGHT
    sigma_x: float = settings.SIGMA_X
    threads: int = settings.THREADS
    hmc: HmcConfig = field(default_factory=HmcConfig)

    def validate(self) -> None:
        if self.model_kind not in ('vae', 'hvae'):
            raise ConfigError(f"model_kind must be 'vae' or 'hvae', got '{self.model_kind}'")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.latent_dim < 1:
            raise ConfigError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if not self.sigma_x > 0:
            raise ConfigError(f"sigma_x must be positive, got {self.sigma_x}")
        if self.mask_weight < 0:
            raise ConfigError(f"mask_weight must be >= 0, got {self.mask_weight}")
        if self.model_kind == 'hvae':
            self.hmc.validate(dim=self.latent_dim)

    def fingerprint(self) -> str:
        return fingerprint(self)

    def model_config(self, height: int, width: int) -> ModelConfig:
        return ModelConfig(height=height, width=width, widths=tuple(self.widths),
                           latent_dim=self.latent_dim, attention_reduction=self.attention_reduction)


@dataclass(frozen=True)
class SegmenterConfig:
    epochs: int = settings.SEG_EPOCHS
    batch_size: int = settings.SEG_BATCH_SIZE
    learning_rate: float = settings.LEARNING_RATE
    depth: int = settings.SEG_DEPTH
    base_width: int = settings.SEG_WIDTH
    seed: int = settings.SEED
    threads: int = settings.THREADS

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.depth < 1 or self.base_width < 1:
            raise ConfigError(f"depth and base_width must be >= 1, got {self.depth}, {self.base_width}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    def fingerprint(self) -> str:
        return fingerprint(self)

    def unet_config(self, height: int, width: int) -> UNetConfig:
        return UNetConfig(height=height, width=width, depth=self.depth, base_width=self.base_width)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: 'OrderedDict[str, np.ndarray]'
    v: 'OrderedDict[str, np.ndarray]'
    t: int = 0
    beta1: float = settings.ADAM_BETA1
    beta2: float = settings.ADAM_BETA2
    eps: float = settings.ADAM_EPS

    @classmethod
    def zeros(cls, params: Mapping[str, np.ndarray]) -> 'AdamState':
        return cls(m=OrderedDict((k, np.zeros_like(p, dtype=np.float64)) for k, p in params.items()),
                   v=OrderedDict((k, np.zeros_like(p, dtype=np.float64)) for k, p in params.items()))

    def to_tensors(self) -> 'OrderedDict[str, np.ndarray]':
        tensors = OrderedDict((f"adam.m.{k}", m) for k, m in self.m.items())
        tensors.update((f"adam.v.{k}", v) for k, v in self.v.items())
        return tensors

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], names: Sequence[str], t: int) -> 'AdamState':
        try:
            return cls(m=OrderedDict((k, np.array(tensors[f"adam.m.{k}"])) for k in names),
                       v=OrderedDict((k, np.array(tensors[f"adam.v.{k}"])) for k in names), t=t)
        except KeyError as e:
            raise StorageError(f"Checkpoint lacks optimizer moment {e}") from e


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float) -> Tuple['OrderedDict[str, np.ndarray]', AdamState]:
    """
    One bias-corrected Adam update.

    Returns:
        (new parameter arrays, new state); the inputs are left untouched

    Raises:
        ShapeError: Missing gradient or moment, or shapes that disagree
        NumericalError: Non-finite gradient
    """
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()

    for name, p in params.items():
        if name not in grads or name not in state.m:
            raise ShapeError(f"No gradient or optimizer moment for parameter {name}")
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"Parameter {name}: shape {list(p.shape)}, gradient {list(g.shape)}, "
                             f"moment {list(state.m[name].shape)}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite gradient for parameter {name}")

        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[name], new_v[name] = m, v

    return new_params, AdamState(m=new_m, v=new_v, t=t, beta1=state.beta1, beta2=state.beta2, eps=state.eps)


# ---------------------------------------------------------------------------
# Generative training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GenerativeModel
    checkpoint: Checkpoint
    history: List[Dict[str, float]] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    loss_csv: Optional[Path] = None


def _spatial_shape(pairs: Sequence[SamplePair]) -> Tuple[int, int]:
    if not pairs:
        raise DataError("Training set is empty")
    shape = pairs[0].spatial_shape
    for index, pair in enumerate(pairs):
        if pair.spatial_shape != shape:
            raise DataError(f"Pair {index} has shape {list(pair.spatial_shape)}, expected {list(shape)}")
    return shape


def describe_logq(config: TrainConfig) -> str:
    if config.model_kind == 'vae':
        return "log q reading: encoder density at z0 (plain VAE, analytic KL)"
    hmc = config.hmc
    kinetic = 'with' if hmc.include_initial_kinetic else 'without'
    return (f"log q reading: {hmc.logq_reference} density at the {hmc.logq_point} latent, "
            f"{kinetic} the initial kinetic energy, K={hmc.steps}, eps={hmc.step_size}")


def generative_checkpoint(model: GenerativeModel, config: TrainConfig, adam: AdamState, epoch: int,
                          rng: np.random.Generator) -> Checkpoint:
    header = {key: value for key, value in to_mapping(config).items() if key != 'model_kind'}
    header.update(data_height=str(model.config.height), data_width=str(model.config.width),
                  epoch=str(epoch), adam_t=str(adam.t))
    tensors = model.params.arrays()
    tensors.update(adam.to_tensors())
    return Checkpoint(model_kind=config.model_kind, config=header, tensors=tensors,
                      rng_state=rng.bit_generator.state)


def _write_curve(path: Path, fields: Sequence[str], rows: Sequence[Dict[str, float]]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=fields, extrasaction='ignore')
            writer.writeheader()
            for row in rows:
                writer.writerow({k: (row[k] if k == 'epoch' else repr(row[k])) for k in fields})
    except OSError as e:
        raise StorageError(f"Failed to write {path}: {e}") from e


def _read_curve(path: Path, fields: Sequence[str], until_epoch: int) -> List[Dict[str, float]]:
    if not path.is_file():
        return []
    try:
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise StorageError(f"Failed to read {path}: {e}") from e
    curve = []
    for row in rows:
        epoch = int(row['epoch'])
        if epoch <= until_epoch:
            curve.append({'epoch': epoch, **{k: float(row[k]) for k in fields if k != 'epoch'}})
    return curve


def _resume(path, model: GenerativeModel, config: TrainConfig, rng: np.random.Generator) -> Tuple[AdamState, int]:
    checkpoint = load_checkpoint(path)
    if checkpoint.model_kind != config.model_kind:
        raise ConfigError(f"Cannot resume a {config.model_kind} run from a {checkpoint.model_kind} checkpoint")
    model.params.assign(checkpoint.parameter_tensors())
    try:
        epoch = int(checkpoint.config['epoch'])
        t = int(checkpoint.config['adam_t'])
    except (KeyError, ValueError) as e:
        raise StorageError(f"Checkpoint {path} has no training position: {e}") from e
    adam = AdamState.from_tensors(checkpoint.tensors, model.params.names(), t)
    if checkpoint.rng_state:
        rng.bit_generator.state = checkpoint.rng_state
    logger.info(f"Resuming {config.model_kind} training from {path} after epoch {epoch}")
    return adam, epoch


def train_generative(dataset: Sequence[SamplePair], config: TrainConfig, out_dir=None,
                     resume=None) -> TrainResult:
    """
    Train a VAE or HVAE on image/mask pairs with Adam.

    Args:
        dataset: Non-empty list of pairs of one shape
        config: Training config
        out_dir: Where the loss curve and checkpoints go (nothing is written when None)
        resume: Checkpoint to continue from; its parameters, optimizer
            moments, rng state and epoch counter are restored

    Returns:
        TrainResult with the trained model, the final checkpoint and one
        history row per epoch

    Raises:
        NumericalError: A batch loss is not finite (names epoch and batch)
    """
    config.validate()
    height, width = _spatial_shape(dataset)
    rng = np.random.default_rng(config.seed)
    model = GenerativeModel.build(config.model_kind, config.model_config(height, width), rng,
                                  hmc=config.hmc if config.model_kind == 'hvae' else None,
                                  sigma_x=config.sigma_x, mask_weight=config.mask_weight)
    adam = AdamState.zeros(model.params.arrays())
    start_epoch = 0
    if resume is not None:
        adam, start_epoch = _resume(resume, model, config, rng)

    out_dir = Path(out_dir) if out_dir is not None else None
    loss_csv = out_dir / f"{config.model_kind}_loss.csv" if out_dir is not None else None
    history = _read_curve(loss_csv, LOSS_FIELDS, start_epoch) if (loss_csv is not None and resume) else []

    logger.info(describe_logq(config))
    logger.info(f"Training {config.model_kind} on {len(dataset)} pairs ({height}x{width}), "
                f"{model.params.num_values} parameters, epochs {start_epoch + 1}..{config.epochs}")

    checkpoint_path = None
    for epoch in range(start_epoch + 1, config.epochs + 1):
        sums = dict.fromkeys(('total',) + TERM_FIELDS + ('recon_mse', 'kl'), 0.0)
        accepted = 0
        for batch_index, indices in enumerate(iterate_batches(len(dataset), config.batch_size, rng)):
            batch = [dataset[int(i)] for i in indices]
            try:
                breakdown: ElboBreakdown = model_loss(model, batch, rng, compute_grad=True,
                                                      threads=config.threads)
            except NumericalError as e:
                raise NumericalError(f"Epoch {epoch}, batch {batch_index}: {e}") from e
            new_params, adam = adam_step(model.params.arrays(), breakdown.gradients, adam, config.learning_rate)
            model.params.assign(new_params)
            for key in sums:
                sums[key] += getattr(breakdown, key) * len(batch)
            accepted += breakdown.accepted

        row = {'epoch': epoch, **{key: value / len(dataset) for key, value in sums.items()},
               'acceptance': accepted / len(dataset)}
        history.append(row)
        logger.info(f"epoch {epoch}/{config.epochs}: loss {row['total']:.6g}, recon mse {row['recon_mse']:.6g}"
                    + (f", acceptance {row['acceptance']:.3f}" if config.model_kind == 'hvae' else ''))
        if row['kl'] / config.latent_dim < settings.COLLAPSE_KL_THRESHOLD:
            logger.warning(f"epoch {epoch}: mean KL per latent dimension {row['kl'] / config.latent_dim:.3g} "
                           f"is below {settings.COLLAPSE_KL_THRESHOLD}; the encoder may have collapsed to the prior")

        if out_dir is not None:
            _write_curve(loss_csv, LOSS_FIELDS, history)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0 and epoch != config.epochs:
                save_checkpoint(generative_checkpoint(model, config, adam, epoch, rng),
                                out_dir / f"{config.model_kind}-epoch{epoch:04d}.ckpt")

    checkpoint = generative_checkpoint(model, config, adam, config.epochs, rng)
    if out_dir is not None:
        checkpoint_path = save_checkpoint(checkpoint, out_dir / f"{config.model_kind}.ckpt")
    return TrainResult(model=model, checkpoint=checkpoint, history=history,
                       checkpoint_path=checkpoint_path, loss_csv=loss_csv)


# ---------------------------------------------------------------------------
# Segmenter
# ---------------------------------------------------------------------------

@dataclass
class SegmenterResult:
    unet: UNetConfig
    params: ParameterSet
    checkpoint: Checkpoint
    dsc_curve: List[float] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    dsc_csv: Optional[Path] = None

    @property
    def final_dsc(self) -> float:
        return self.dsc_curve[-1] if self.dsc_curve else math.nan


def segmentation_loss(params: ParameterSet, config: UNetConfig, pair: SamplePair) -> Tensor:
    """Mean pixel binary cross-entropy of the predicted mask logits."""
    logits = unet_forward(params, pair.image, config)
    return (logits.softplus() - pair.mask * logits).mean()


def predict_mask(params: ParameterSet, config: UNetConfig, image: Tensor) -> np.ndarray:
    with no_record():
        logits = unet_forward(params, image, config)
    return (logits.data[0] > 0.0).astype(np.float64)


def evaluate_segmenter(params: ParameterSet, config: UNetConfig, pairs: Sequence[SamplePair]) -> float:
    """Mean Dice of thresholded predictions against the pairs' masks."""
    if not pairs:
        raise DataError("Segmenter evaluation set is empty")
    return float(np.mean([dice(predict_mask(params, config, p.image), p.mask_array()) for p in pairs]))


def _segmenter_gradients(params: ParameterSet, config: UNetConfig, batch: Sequence[SamplePair],
                         threads: int) -> Tuple[float, Dict[str, np.ndarray]]:
    scale = 1.0 / len(batch)
    names = params.names()

    def run(index: int) -> Tuple[float, List[np.ndarray]]:
        with ComputationRecord() as record:
            loss = segmentation_loss(params, config, batch[index])
            scaled = loss * scale
        grads = backward(scaled, record)
        return float(loss.data), [grads[params[name]].numpy() for name in names]

    if threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(batch))))
    else:
        results = [run(i) for i in range(len(batch))]

    summed = [np.zeros(params[name].shape) for name in names]
    for _, gradients in results:
        for i, g in enumerate(gradients):
            summed[i] += g
    loss = float(np.mean([value for value, _ in results]))
    if not math.isfinite(loss):
        raise NumericalError(f"Non-finite segmentation loss {loss}")
    return loss, dict(zip(names, summed))


def train_segmenter(real: Sequence[SamplePair], synthetic: Optional[Sequence[SamplePair]],
                    config: SegmenterConfig, held_out: Optional[Sequence[SamplePair]] = None,
                    out_dir=None, name: str = 'segmenter') -> SegmenterResult:
    """
    Train the U-Net on real pairs, optionally extended with synthetic ones.

    Args:
        real: At least one real pair
        synthetic: Extra pairs appended to the real ones (None for the
            real-only reference arm)
        config: Segmenter config
        held_out: Pairs scored with Dice after every epoch (the real pairs
            when None)
        out_dir: Where the DSC curve and checkpoint go (nothing is written when None)
        name: File stem for the outputs

    Returns:
        SegmenterResult with the per-epoch held-out Dice curve
    """
    config.validate()
    if not real:
        raise DataError("Segmenter training needs at least one real pair")
    pairs = list(real) + list(synthetic or [])
    height, width = _spatial_shape(pairs)
    if held_out is None:
        logger.warning("No held-out set given; per-epoch Dice is measured on the real training pairs")
        held_out = real
    unet = config.unet_config(height, width)
    rng = np.random.default_rng(config.seed)
    params = build_unet_params(unet, rng)
    adam = AdamState.zeros(params.arrays())

    logger.info(f"Training segmenter on {len(real)} real + {len(pairs) - len(real)} synthetic pairs, "
                f"{config.epochs} epochs")
    curve: List[float] = []
    for epoch in range(1, config.epochs + 1):
        total = 0.0
        for batch_index, indices in enumerate(iterate_batches(len(pairs), config.batch_size, rng)):
            batch = [pairs[int(i)] for i in indices]
            try:
                loss, grads = _segmenter_gradients(params, unet, batch, config.threads)
            except NumericalError as e:
                raise NumericalError(f"Segmenter epoch {epoch}, batch {batch_index}: {e}") from e
            new_params, adam = adam_step(params.arrays(), grads, adam, config.learning_rate)
            params.assign(new_params)
            total += loss * len(batch)
        curve.append(evaluate_segmenter(params, unet, held_out))
        logger.info(f"segmenter epoch {epoch}/{config.epochs}: bce {total / len(pairs):.6g}, "
                    f"held-out dsc {curve[-1]:.4f}")

    header = to_mapping(config)
    header.update(data_height=str(height), data_width=str(width), epoch=str(config.epochs))
    checkpoint = Checkpoint(model_kind='unet', config=header, tensors=params.arrays(),
                            rng_state=rng.bit_generator.state)
    result = SegmenterResult(unet=unet, params=params, checkpoint=checkpoint, dsc_curve=curve)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.dsc_csv = out_dir / f"{name}_dsc.csv"
        _write_curve(result.dsc_csv, DSC_FIELDS,
                     [{'epoch': e + 1, 'dsc': value} for e, value in enumerate(curve)])
        result.checkpoint_path = save_checkpoint(checkpoint, out_dir / f"{name}.ckpt")
    return result

