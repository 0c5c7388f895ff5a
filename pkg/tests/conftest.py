import numpy as np
import pytest

from hvae_joint.hamiltonian import HmcConfig
from hvae_joint.items import SamplePair
from hvae_joint.nn import GenerativeModel, ModelConfig
from hvae_joint.phantoms import PhantomConfig, generate_phantom
from hvae_joint.tensor import set_strict_finite, strict_finite_enabled


@pytest.fixture(autouse=True)
def strict_finite():
    """Every test runs with the non-finite check on."""
    previous = strict_finite_enabled()
    set_strict_finite(True)
    yield
    set_strict_finite(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # 8x8 images, one downsampling level, d=4
    return ModelConfig(height=8, width=8, widths=(4,), latent_dim=4, attention_reduction=2)


@pytest.fixture
def tiny_hmc():
    return HmcConfig(steps=2, step_size=0.05)


@pytest.fixture
def tiny_model(tiny_config, tiny_hmc):
    return GenerativeModel.build('hvae', tiny_config, np.random.default_rng(7), hmc=tiny_hmc)


@pytest.fixture
def tiny_vae(tiny_config):
    return GenerativeModel.build('vae', tiny_config, np.random.default_rng(7))


@pytest.fixture
def phantom_config():
    return PhantomConfig(height=16, width=16, seed=3)


@pytest.fixture
def tiny_pairs():
    config = PhantomConfig(height=8, width=8, tumor_radius_min=0.1, tumor_radius_max=0.3, seed=11)
    return [generate_phantom(config, i) for i in range(4)]


@pytest.fixture
def make_pair():
    """Factory for random pairs with a roughly 40% foreground mask."""
    def make(rng, height=8, width=8) -> SamplePair:
        image = rng.uniform(0.0, 1.0, size=(height, width))
        mask = (rng.uniform(size=(height, width)) > 0.6).astype(np.float64)
        return SamplePair.from_arrays(image, mask)
    return make
