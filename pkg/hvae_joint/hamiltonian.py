"""
Hamiltonian dynamics over the latent space.

The potential U(z) is any callable returning a scalar Tensor. Gradients of U
are taken through the autodiff record; with ``create_graph=True`` the whole
trajectory stays differentiable with respect to z0 and the decoder
parameters, which is what the joint objective trains through.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple

import numpy as np

from hvae_joint import settings
from hvae_joint.errors import ConfigError, NumericalError, ShapeError, StorageError
from hvae_joint.tensor import ComputationRecord, Tensor, backward, current_record, grad, no_record

logger = logging.getLogger(__name__)

Potential = Callable[[Tensor], Tensor]

LOGQ_POINTS = ('initial', 'final')
LOGQ_REFERENCES = ('encoder', 'prior')
TRAJECTORY_FIELDS = ('step', 'coordinate_index', 'z', 'rho', 'H')


@dataclass(frozen=True)
class HmcConfig:
    """
    Settings of the leapfrog flow.

    ``mass_diag`` of None means the identity mass matrix. ``mh_in_training``
    only has an effect together with ``mh_enabled``.
    """
    steps: int = settings.HMC_STEPS
    step_size: float = settings.HMC_STEP_SIZE
    mass_diag: Optional[Tuple[float, ...]] = None
    mh_enabled: bool = False
    mh_in_training: bool = False
    include_initial_kinetic: bool = True
    logq_point: str = 'initial'
    logq_reference: str = 'encoder'

    def validate(self, dim: Optional[int] = None) -> None:
        if self.steps < 0:
            raise ConfigError(f"hmc steps must be >= 0, got {self.steps}")
        if not self.step_size > 0 or not math.isfinite(self.step_size):
            raise ConfigError(f"hmc step_size must be positive, got {self.step_size}")
        if self.mass_diag is not None:
            if any(not m > 0 or not math.isfinite(m) for m in self.mass_diag):
                raise ConfigError(f"hmc mass_diag must be strictly positive, got {self.mass_diag}")
            if dim is not None and len(self.mass_diag) != dim:
                raise ConfigError(f"hmc mass_diag has {len(self.mass_diag)} entries, latent dim is {dim}")
        if self.logq_point not in LOGQ_POINTS:
            raise ConfigError(f"hmc logq_point must be one of {LOGQ_POINTS}, got '{self.logq_point}'")
        if self.logq_reference not in LOGQ_REFERENCES:
            raise ConfigError(f"hmc logq_reference must be one of {LOGQ_REFERENCES}, got '{self.logq_reference}'")

    def mass(self, dim: int) -> np.ndarray:
        if self.mass_diag is None:
            return np.ones(dim)
        if len(self.mass_diag) != dim:
            raise ConfigError(f"hmc mass_diag has {len(self.mass_diag)} entries, latent dim is {dim}")
        return np.asarray(self.mass_diag, dtype=np.float64)


@dataclass
class PhaseState:
    z: Tensor
    rho: Tensor

    def __post_init__(self):
        if self.z.shape != self.rho.shape:
            raise ShapeError(f"PhaseState z {list(self.z.shape)} and rho {list(self.rho.shape)} differ")


@dataclass
class TrajectoryPoint:
    step: int
    z: np.ndarray
    rho: np.ndarray
    energy: float


@dataclass
class EvolveResult:
    z: Tensor
    rho: Tensor
    initial_potential: Tensor
    final_potential: Tensor
    trajectory: List[TrajectoryPoint] = field(default_factory=list)


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance_rate: float


def _as_mass(mass_diag, dim: int) -> np.ndarray:
    if mass_diag is None:
        return np.ones(dim)
    mass = np.asarray(mass_diag.data if isinstance(mass_diag, Tensor) else mass_diag, dtype=np.float64)
    if mass.shape != (dim,):
        raise ShapeError(f"mass_diag of shape {list(mass.shape)} does not match dimension {dim}")
    if not np.all(mass > 0):
        raise ConfigError("mass_diag must be strictly positive")
    return mass


def kinetic_energy(rho: Tensor, mass_diag=None) -> Tensor:
    """0.5 * sum(rho^2 / m) as a differentiable scalar."""
    inverse = Tensor(1.0 / _as_mass(mass_diag, rho.size).reshape(rho.shape))
    return (rho * rho * inverse).sum() * 0.5


def potential_gradient(U: Potential, z: Tensor, create_graph: bool = False) -> Tuple[Tensor, Tensor]:
    """
    Evaluate U(z) and its gradient.

    With ``create_graph`` and a z that is part of the active record, the
    gradient is recorded too. Otherwise U is evaluated on a fresh leaf in a
    private record and both results are constants.
    """
    if create_graph and z.requires_grad and current_record() is not None:
        value = U(z)
        if value.size != 1:
            raise ShapeError(f"Potential must return a scalar, got shape {list(value.shape)}")
        (gradient,) = grad(value, [z], create_graph=True)
        return value, gradient

    leaf = Tensor(z.data, requires_grad=True)
    with ComputationRecord() as record:
        value = U(leaf)
    if value.size != 1:
        raise ShapeError(f"Potential must return a scalar, got shape {list(value.shape)}")
    gradient = backward(value, record)[leaf]
    return value.detach(), gradient


def hamiltonian(state: PhaseState, U: Potential, mass_diag=None) -> float:
    """
    Total energy U(z) + 0.5 * sum(rho^2 / m).

    Raises:
        NumericalError: If U(z) is not finite
    """
    with no_record():
        potential = U(state.z.detach()).item()
        kinetic = kinetic_energy(state.rho.detach(), mass_diag).item()
    if not math.isfinite(potential):
        raise NumericalError(f"Potential energy is not finite: {potential}")
    return potential + kinetic


def sample_momentum(mass_diag, rng: np.random.Generator, dim: Optional[int] = None) -> Tensor:
    """rho_i = sqrt(m_i) * n_i with n_i standard normal draws from rng."""
    if mass_diag is None:
        if dim is None:
            raise ConfigError("sample_momentum needs mass_diag or dim")
        mass = np.ones(dim)
    else:
        raw = mass_diag.data if isinstance(mass_diag, Tensor) else mass_diag
        mass = _as_mass(mass_diag, int(np.size(raw)))
    return Tensor(np.sqrt(mass) * rng.standard_normal(mass.shape[0]))


def _step(z: Tensor, rho: Tensor, gradient: Tensor, U: Potential, eps: float,
          inverse_mass: Tensor, create_graph: bool) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    rho_half = rho - gradient * (0.5 * eps)
    z_next = z + rho_half * inverse_mass * eps
    potential, gradient_next = potential_gradient(U, z_next, create_graph)
    rho_next = rho_half - gradient_next * (0.5 * eps)
    return z_next, rho_next, potential, gradient_next


def leapfrog_step(state: PhaseState, U: Potential, eps: float, mass_diag=None,
                  create_graph: bool = False) -> PhaseState:
    """
    One Stormer-Verlet step: half momentum kick, full drift, half kick.

    Args:
        state: Current (z, rho)
        U: Potential energy
        eps: Step size; 0 leaves the state unchanged
        mass_diag: Diagonal of the mass matrix (identity when None)
        create_graph: Keep the step differentiable through grad U

    Raises:
        NumericalError: If a potential gradient is not finite
    """
    if eps < 0:
        raise ConfigError(f"Leapfrog step size must be >= 0, got {eps}")
    inverse_mass = Tensor(1.0 / _as_mass(mass_diag, state.z.size))
    _, gradient = potential_gradient(U, state.z, create_graph)
    _check_finite(gradient, 0)
    z, rho, _, gradient = _step(state.z, state.rho, gradient, U, eps, inverse_mass, create_graph)
    _check_finite(gradient, 1)
    return PhaseState(z, rho)


def _check_finite(gradient: Tensor, step: int) -> None:
    if not np.all(np.isfinite(gradient.data)):
        raise NumericalError(f"Non-finite potential gradient at leapfrog step {step}")


def evolve(z0: Tensor, rho0: Tensor, U: Potential, config: HmcConfig,
           create_graph: bool = False, keep_trajectory: bool = False) -> EvolveResult:
    """
    Compose ``config.steps`` leapfrog steps from (z0, rho0).

    The potential gradient at the end of one step is reused as the start of
    the next, so a K-step flow costs K + 1 gradient evaluations.

    Returns:
        EvolveResult with the final state, U(z0), U(zK) and, when asked for,
        the trajectory including the start point
    """
    config.validate(dim=z0.size)
    if z0.shape != rho0.shape:
        raise ShapeError(f"z0 {list(z0.shape)} and rho0 {list(rho0.shape)} differ")
    mass = config.mass(z0.size)
    inverse_mass = Tensor(1.0 / mass)

    potential, gradient = potential_gradient(U, z0, create_graph)
    _check_finite(gradient, 0)
    initial_potential = potential
    z, rho = z0, rho0
    trajectory: List[TrajectoryPoint] = []
    if keep_trajectory:
        trajectory.append(_point(0, z, rho, potential, mass))

    for k in range(1, config.steps + 1):
        z, rho, potential, gradient = _step(z, rho, gradient, U, config.step_size, inverse_mass, create_graph)
        if not (np.all(np.isfinite(z.data)) and np.all(np.isfinite(rho.data))
                and math.isfinite(float(potential.data.reshape(())))):
            raise NumericalError(f"Non-finite phase state at leapfrog step {k} of {config.steps}")
        _check_finite(gradient, k)
        if keep_trajectory:
            trajectory.append(_point(k, z, rho, potential, mass))

    return EvolveResult(z=z, rho=rho, initial_potential=initial_potential,
                        final_potential=potential, trajectory=trajectory)


def _point(step: int, z: Tensor, rho: Tensor, potential: Tensor, mass: np.ndarray) -> TrajectoryPoint:
    energy = float(potential.data.reshape(())) + 0.5 * float(np.sum(rho.data ** 2 / mass))
    return TrajectoryPoint(step=step, z=z.numpy(), rho=rho.numpy(), energy=energy)


def metropolis_accept(h_old: float, h_new: float, u: float) -> bool:
    """
    Metropolis-Hastings test: accept iff u < min(1, exp(h_old - h_new)).

    A proposal with infinite energy is rejected.
    """
    if not math.isfinite(h_old) or math.isnan(h_new):
        raise NumericalError(f"Metropolis test on non-finite energies: {h_old}, {h_new}")
    if h_new <= h_old:
        return True
    return u < math.exp(h_old - h_new)


def hmc_chain(U: Potential, config: HmcConfig, n_samples: int, rng: np.random.Generator,
              z_init: Optional[Tensor] = None, dim: Optional[int] = None) -> ChainResult:
    """
    Run a Hamiltonian Monte Carlo chain targeting exp(-U).

    Each transition refreshes the momentum, integrates ``config.steps``
    leapfrog steps and applies the Metropolis-Hastings test. The chain starts
    at ``z_init`` (zeros of ``dim`` when omitted).

    Returns:
        ChainResult with samples of shape [n_samples, d] and the acceptance rate
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if z_init is None:
        if dim is None:
            dim = len(config.mass_diag) if config.mass_diag is not None else None
        if dim is None:
            raise ConfigError("hmc_chain needs z_init or dim")
        z_init = Tensor(np.zeros(dim))
    config.validate(dim=z_init.size)
    mass = config.mass(z_init.size)

    z = z_init.detach()
    samples = np.empty((n_samples, z.size))
    accepted = 0
    for i in range(n_samples):
        rho = sample_momentum(mass, rng)
        u = float(rng.uniform())
        h_old = hamiltonian(PhaseState(z, rho), U, mass)
        try:
            proposal = evolve(z, rho, U, config)
            h_new = hamiltonian(PhaseState(proposal.z, proposal.rho), U, mass)
        except NumericalError as e:
            logger.debug(f"Transition {i} diverged, rejecting: {e}")
            h_new = math.inf
            proposal = None
        if proposal is not None and metropolis_accept(h_old, h_new, u):
            z = proposal.z
            accepted += 1
        samples[i] = z.data
    rate = accepted / n_samples
    logger.debug(f"HMC chain: {n_samples} samples, acceptance rate {rate:.3f}")
    return ChainResult(samples=samples, acceptance_rate=rate)


def write_trajectory_csv(path, trajectory: List[TrajectoryPoint]) -> Path:
    """Write one row per (step, coordinate) with columns step,coordinate_index,z,rho,H."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=TRAJECTORY_FIELDS)
            writer.writeheader()
            for point in trajectory:
                for index, (z, rho) in enumerate(zip(point.z.ravel(), point.rho.ravel())):
                    writer.writerow({'step': point.step, 'coordinate_index': index,
                                     'z': repr(float(z)), 'rho': repr(float(rho)),
                                     'H': repr(point.energy)})
    except OSError as e:
        raise StorageError(f"Failed to write trajectory {path}: {e}") from e
    logger.info(f"Wrote {len(trajectory)} trajectory points to {path}")
    return path
