"""Joint image and mask generation with a Hamiltonian VAE, from a small autodiff engine up."""

__version__ = '0.1.0'
