"""
Training objectives: reconstruction likelihoods, the closed-form KL of the
plain VAE, and the joint image+mask bound of the Hamiltonian VAE.

Batch losses are evaluated one sample per computation record, so batch
members can run on separate threads. Noise is drawn for the whole batch in
index order before any sample is evaluated, and per-sample results are
reduced in index order, so the thread count never changes a result.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from hvae_joint.errors import DataError, NumericalError, ShapeError
from hvae_joint.hamiltonian import HmcConfig, evolve, kinetic_energy, metropolis_accept, sample_momentum
from hvae_joint.items import SamplePair
from hvae_joint.nn import GenerativeModel, reparameterize
from hvae_joint.tensor import ComputationRecord, Tensor, backward

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
TERM_FIELDS = ('recon_image', 'recon_mask', 'kinetic', 'initial_logq', 'prior_logp')


def _check_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def gaussian_recon_loglik(x: Tensor, x_mean: Tensor, sigma_x: float) -> Tensor:
    """sum over pixels of log N(x; x_mean, sigma_x^2)."""
    _check_shapes('gaussian_recon_loglik', x, x_mean)
    if not sigma_x > 0:
        raise ValueError(f"sigma_x must be positive, got {sigma_x}")
    residual = x - x_mean
    constant = -0.5 * math.log(2.0 * math.pi * sigma_x ** 2) * x.size
    return (residual * residual).sum() * (-0.5 / sigma_x ** 2) + constant


def bernoulli_mask_loglik(m: Tensor, mask_logits: Tensor) -> Tensor:
    """
    sum over pixels of m log s(l) + (1 - m) log(1 - s(l)), written as m*l - softplus(l).

    Raises:
        DataError: If m has values other than 0 and 1
    """
    _check_shapes('bernoulli_mask_loglik', m, mask_logits)
    if not np.all((m.data == 0.0) | (m.data == 1.0)):
        values, counts = np.unique(m.data, return_counts=True)
        summary = ', '.join(f"{v:g}:{c}" for v, c in list(zip(values, counts))[:8])
        raise DataError(f"Mask is not binary (value:count {summary})")
    return (m * mask_logits - mask_logits.softplus()).sum()


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I))."""
    _check_shapes('kl_diag_gaussian', mu, logvar)
    return (mu * mu + logvar.exp() - 1.0 - logvar).sum() * 0.5


def gaussian_logdensity(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    _check_shapes('gaussian_logdensity', z, mu)
    _check_shapes('gaussian_logdensity', z, logvar)
    residual = z - mu
    quadratic = residual * residual / logvar.exp()
    return (logvar + quadratic).sum() * -0.5 - 0.5 * LOG_2PI * z.size


def standard_normal_logdensity(z: Tensor) -> Tensor:
    return (z * z).sum() * -0.5 - 0.5 * LOG_2PI * z.size


def joint_potential(model: GenerativeModel, image: Tensor, mask: Tensor) -> Callable[[Tensor], Tensor]:
    """U(z) = -[log p(x|z) + mask_weight * log p(m|z) + log N(z; 0, I)]."""
    def potential(z: Tensor) -> Tensor:
        decoded = model.decode(z)
        loglik = gaussian_recon_loglik(image, decoded.image_mean, model.sigma_x)
        if model.mask_weight:
            loglik = loglik + bernoulli_mask_loglik(mask, decoded.mask_logits) * model.mask_weight
        return -(loglik + standard_normal_logdensity(z))
    return potential


@dataclass
class SampleNoise:
    """Random draws consumed by one batch member."""
    eps: np.ndarray
    rho: Optional[np.ndarray] = None
    u: Optional[float] = None


@dataclass
class SampleTerms:
    recon_image: Tensor
    recon_mask: Tensor
    kinetic: Tensor
    initial_logq: Tensor
    prior_logp: Tensor
    recon_mse: float
    kl: float

    def total(self) -> Tensor:
        return -(self.recon_image + self.recon_mask + self.prior_logp - self.kinetic - self.initial_logq)


@dataclass
class ElboBreakdown:
    """
    Batch-mean terms of the negated bound.

    ``recon_mask`` already carries the mask weight; ``kinetic`` is the final
    kinetic energy minus the initial one when that compensation is on.
    ``total = -(recon_image + recon_mask + prior_logp - kinetic - initial_logq)``.
    """
    recon_image: float
    recon_mask: float
    kinetic: float
    initial_logq: float
    prior_logp: float
    total: float
    recon_mse: float = 0.0
    kl: float = 0.0
    batch_size: int = 0
    accepted: int = 0
    gradients: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    def signed_sum(self) -> float:
        return -(self.recon_image + self.recon_mask + self.prior_logp - self.kinetic - self.initial_logq)

    def terms(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in ('total',) + TERM_FIELDS}

    def describe(self) -> str:
        return ', '.join(f"{name}={value:.6g}" for name, value in self.terms().items())


def draw_noise(model: GenerativeModel, batch_size: int, rng: np.random.Generator) -> List[SampleNoise]:
    """Per-sample draws in index order: eps, then rho, then the MH uniform."""
    hmc = model.hmc
    noise = []
    for _ in range(batch_size):
        eps = rng.standard_normal(model.latent_dim)
        if model.kind == 'vae':
            noise.append(SampleNoise(eps=eps))
            continue
        rho = sample_momentum(hmc.mass(model.latent_dim), rng).numpy()
        u = float(rng.uniform()) if hmc.mh_enabled and hmc.mh_in_training else None
        noise.append(SampleNoise(eps=eps, rho=rho, u=u))
    return noise


def _recon_mse(image: Tensor, image_mean: Tensor) -> float:
    return float(np.mean((image.data - image_mean.data) ** 2))


def vae_sample_terms(model: GenerativeModel, pair: SamplePair, noise: SampleNoise) -> SampleTerms:
    encoded = model.encode(pair.image, pair.mask)
    z0 = reparameterize(encoded.mu, encoded.logvar, Tensor(noise.eps))
    decoded = model.decode(z0)
    kl = kl_diag_gaussian(encoded.mu, encoded.logvar)
    zero = Tensor(0.0)
    return SampleTerms(
        recon_image=gaussian_recon_loglik(pair.image, decoded.image_mean, model.sigma_x),
        recon_mask=bernoulli_mask_loglik(pair.mask, decoded.mask_logits) * model.mask_weight,
        kinetic=zero,
        initial_logq=zero,
        prior_logp=-kl,
        recon_mse=_recon_mse(pair.image, decoded.image_mean),
        kl=float(kl.data),
    )


def _straight_through(proposal: Tensor, current: Tensor) -> Tensor:
    """Forward value of current, gradient of proposal."""
    return proposal + Tensor(current.data - proposal.data)


def hvae_sample_terms(model: GenerativeModel, pair: SamplePair, noise: SampleNoise,
                      hmc: HmcConfig) -> Tuple[SampleTerms, bool]:
    """
    Terms of the joint bound for one sample; also reports MH acceptance.

    Encode, reparameterize z0, integrate (z0, rho0) to (zK, rhoK) under the
    joint potential, decode zK.
    """
    encoded = model.encode(pair.image, pair.mask)
    z0 = reparameterize(encoded.mu, encoded.logvar, Tensor(noise.eps))
    rho0 = Tensor(noise.rho)
    mass = hmc.mass(model.latent_dim)

    flow = evolve(z0, rho0, joint_potential(model, pair.image, pair.mask), hmc, create_graph=True)
    z_k, rho_k = flow.z, flow.rho
    accepted = True
    if hmc.mh_enabled and hmc.mh_in_training:
        h_old = float(flow.initial_potential.data) + float(kinetic_energy(rho0.detach(), mass).data)
        h_new = float(flow.final_potential.data) + float(kinetic_energy(rho_k.detach(), mass).data)
        accepted = metropolis_accept(h_old, h_new, noise.u)
        if not accepted:
            z_k = _straight_through(z_k, z0)
            rho_k = _straight_through(rho_k, rho0)

    decoded = model.decode(z_k)
    kinetic = kinetic_energy(rho_k, mass)
    if hmc.include_initial_kinetic:
        kinetic = kinetic - kinetic_energy(rho0, mass)

    z_q = z0 if hmc.logq_point == 'initial' else z_k
    if hmc.logq_reference == 'encoder':
        initial_logq = gaussian_logdensity(z_q, encoded.mu, encoded.logvar)
    else:
        initial_logq = standard_normal_logdensity(z_q)

    terms = SampleTerms(
        recon_image=gaussian_recon_loglik(pair.image, decoded.image_mean, model.sigma_x),
        recon_mask=bernoulli_mask_loglik(pair.mask, decoded.mask_logits) * model.mask_weight,
        kinetic=kinetic,
        initial_logq=initial_logq,
        prior_logp=standard_normal_logdensity(z_k),
        recon_mse=_recon_mse(pair.image, decoded.image_mean),
        kl=float(kl_diag_gaussian(encoded.mu.detach(), encoded.logvar.detach()).data),
    )
    return terms, accepted


@dataclass
class _SampleResult:
    values: Dict[str, float]
    recon_mse: float
    kl: float
    accepted: bool
    gradients: Optional[List[np.ndarray]]


def _evaluate_sample(model: GenerativeModel, pair: SamplePair, noise: SampleNoise,
                     compute_grad: bool, scale: float) -> _SampleResult:
    def terms_of() -> Tuple[SampleTerms, bool]:
        if model.kind == 'vae':
            return vae_sample_terms(model, pair, noise), True
        return hvae_sample_terms(model, pair, noise, model.hmc)

    if not compute_grad:
        terms, accepted = terms_of()
        total = terms.total()
        gradients = None
    else:
        with ComputationRecord() as record:
            terms, accepted = terms_of()
            total = terms.total()
            scaled = total * scale
        grads = backward(scaled, record)
        gradients = [grads[tensor].numpy() for tensor in model.params.tensors()]

    values = {name: float(getattr(terms, name).data) for name in TERM_FIELDS}
    values['total'] = float(total.data)
    return _SampleResult(values=values, recon_mse=terms.recon_mse, kl=terms.kl,
                         accepted=accepted, gradients=gradients)


def _evaluate_batch(model: GenerativeModel, batch: Sequence[SamplePair], noise: Sequence[SampleNoise],
                    compute_grad: bool, threads: int) -> ElboBreakdown:
    if not batch:
        raise DataError("Loss evaluated on an empty batch")
    if len(noise) != len(batch):
        raise ShapeError(f"Got {len(noise)} noise draws for a batch of {len(batch)}")
    scale = 1.0 / len(batch)

    def run(index: int) -> _SampleResult:
        return _evaluate_sample(model, batch[index], noise[index], compute_grad, scale)

    if threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(batch))))
    else:
        results = [run(i) for i in range(len(batch))]

    means = {name: float(np.mean([r.values[name] for r in results])) for name in TERM_FIELDS}
    breakdown = ElboBreakdown(
        total=0.0,
        recon_mse=float(np.mean([r.recon_mse for r in results])),
        kl=float(np.mean([r.kl for r in results])),
        batch_size=len(batch),
        accepted=sum(r.accepted for r in results),
        **means,
    )
    breakdown.total = breakdown.signed_sum()
    if not math.isfinite(breakdown.total):
        raise NumericalError(f"Non-finite loss ({breakdown.describe()})")

    if compute_grad:
        names = model.params.names()
        summed = [np.zeros(model.params[name].shape) for name in names]
        for result in results:
            for i, g in enumerate(result.gradients):
                summed[i] += g
        breakdown.gradients = dict(zip(names, summed))
    return breakdown


def vae_loss(model: GenerativeModel, batch: Sequence[SamplePair], rng: Optional[np.random.Generator] = None,
             compute_grad: bool = False, threads: int = 1,
             noise: Optional[Sequence[SampleNoise]] = None) -> ElboBreakdown:
    """
    Negated ELBO of the plain VAE, batch mean.

    Args:
        model: Model with kind 'vae'
        batch: Non-empty list of pairs
        rng: Source of the reparameterization noise (unless noise is given)
        compute_grad: Also return parameter gradients of the batch-mean loss
        threads: Worker threads for per-sample evaluation
        noise: Pre-drawn per-sample noise

    Returns:
        ElboBreakdown with prior_logp = -KL and no flow terms
    """
    if noise is None:
        noise = draw_noise(model, len(batch), rng)
    return _evaluate_batch(model, batch, noise, compute_grad, threads)


def hvae_loss_joint(model: GenerativeModel, batch: Sequence[SamplePair], hmc_config: Optional[HmcConfig] = None,
                    rng: Optional[np.random.Generator] = None, compute_grad: bool = False, threads: int = 1,
                    noise: Optional[Sequence[SampleNoise]] = None) -> ElboBreakdown:
    """
    Negated joint image+mask bound of the Hamiltonian VAE, batch mean.

    Per sample: -[log p(x,m|zK) + log p(zK) - K(rhoK) - log q(z) (+ K(rho0))].
    """
    if hmc_config is not None and hmc_config is not model.hmc:
        model = GenerativeModel('hvae', model.config, model.params, hmc=hmc_config,
                                sigma_x=model.sigma_x, mask_weight=model.mask_weight)
    if model.hmc is None:
        raise ValueError("hvae_loss_joint needs an HmcConfig")
    model.hmc.validate(dim=model.latent_dim)
    if noise is None:
        noise = draw_noise(model, len(batch), rng)
    return _evaluate_batch(model, batch, noise, compute_grad, threads)


def model_loss(model: GenerativeModel, batch: Sequence[SamplePair], rng: np.random.Generator,
               compute_grad: bool = False, threads: int = 1) -> ElboBreakdown:
    if model.kind == 'vae':
        return vae_loss(model, batch, rng, compute_grad=compute_grad, threads=threads)
    return hvae_loss_joint(model, batch, rng=rng, compute_grad=compute_grad, threads=threads)


def batch_objective(model: GenerativeModel, batch: Sequence[SamplePair], noise: Sequence[SampleNoise]) -> Tensor:
    """Batch-mean negated bound as one scalar tensor (recorded when a record is active)."""
    total = None
    for pair, sample_noise in zip(batch, noise):
        if model.kind == 'vae':
            terms = vae_sample_terms(model, pair, sample_noise)
        else:
            terms, _ = hvae_sample_terms(model, pair, sample_noise, model.hmc)
        total = terms.total() if total is None else total + terms.total()
    return total * (1.0 / len(batch))


def parameter_objective(model: GenerativeModel, batch: Sequence[SamplePair],
                        noise: Sequence[SampleNoise]) -> Tuple[Callable[[Tensor], Tensor], Tensor]:
    """
    The batch objective as a function of one flat parameter vector.

    Returns:
        (f, x0) where f maps a flat vector to the loss and x0 holds the
        current parameters; suited to finite_diff_check
    """
    names = model.params.names()
    shapes = [model.params[name].shape for name in names]
    x0 = Tensor(np.concatenate([model.params[name].data.ravel() for name in names]))

    def objective(flat: Tensor) -> Tensor:
        replacements = {}
        offset = 0
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            replacements[name] = flat.take(np.arange(offset, offset + size).reshape(shape))
            offset += size
        return batch_objective(model.with_params(model.params.with_tensors(replacements)), batch, noise)

    return objective, x0
