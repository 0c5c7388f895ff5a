import numpy as np
import pytest

from hvae_joint.errors import ConfigError, DataError, ShapeError
from hvae_joint.nn import (
    GenerativeModel,
    ModelConfig,
    ParameterSet,
    UNetConfig,
    add_residual_block,
    add_self_attention,
    attention_weights,
    build_model_params,
    build_unet_params,
    decoder_forward,
    encoder_forward,
    reparameterize,
    residual_block_forward,
    self_attention_forward,
    unet_forward,
)
from hvae_joint.tensor import Tensor, concat_channels, finite_diff_check


def _with_values(params: ParameterSet, **values) -> ParameterSet:
    arrays = params.arrays()
    for name, value in values.items():
        arrays[name.replace('__', '.')] = np.broadcast_to(value, arrays[name.replace('__', '.')].shape)
    params.assign(arrays)
    return params


class TestParameterSet:
    def test_duplicate_name(self):
        params = ParameterSet()
        params.add('w', np.zeros(2), 'zeros')
        with pytest.raises(ConfigError):
            params.add('w', np.zeros(2), 'zeros')

    def test_order_depends_only_on_config(self, tiny_config):
        first = build_model_params(tiny_config, np.random.default_rng(1))
        second = build_model_params(tiny_config, np.random.default_rng(2))
        assert first.names() == second.names()
        assert len(set(first.names())) == len(first)

    def test_assign_checks_shapes(self, tiny_config):
        params = build_model_params(tiny_config, np.random.default_rng(1))
        arrays = params.arrays()
        arrays['enc.stem.bias'] = np.zeros(99)
        with pytest.raises(ShapeError, match='enc.stem.bias'):
            params.assign(arrays)

    def test_assign_checks_names(self, tiny_config):
        params = build_model_params(tiny_config, np.random.default_rng(1))
        arrays = params.arrays()
        arrays.pop('enc.stem.bias')
        with pytest.raises(ShapeError, match='missing'):
            params.assign(arrays)

    def test_init_is_bounded_by_fan_in(self, tiny_config):
        params = build_model_params(tiny_config, np.random.default_rng(1))
        weight = params['enc.stem.weight'].data
        assert np.abs(weight).max() <= np.sqrt(1.0 / (2 * 3 * 3))
        assert params.init_spec['dec.level0.res.conv2.weight'] == 'zeros'


class TestResidualBlock:
    def test_identity_at_init(self, rng):
        params = ParameterSet()
        add_residual_block(params, 'block', 8, rng)
        x = Tensor(rng.uniform(size=(8, 16, 16)))
        out = residual_block_forward(params.scope('block'), x)
        assert out.shape == (8, 16, 16)
        assert np.array_equal(out.data, x.data)

    def test_zero_weights_give_identity(self, rng):
        params = ParameterSet()
        add_residual_block(params, 'block', 4, rng)
        _with_values(params, block__conv1__weight=0.0, block__conv1__bias=0.0)
        x = Tensor(rng.uniform(size=(4, 4, 4)))
        assert np.array_equal(residual_block_forward(params.scope('block'), x).data, x.data)

    def test_gradient(self, rng):
        params = ParameterSet()
        add_residual_block(params, 'block', 4, rng)
        _with_values(params, block__conv2__weight=rng.uniform(-0.3, 0.3, size=(4, 4, 3, 3)))
        x = Tensor(rng.uniform(size=(4, 4, 4)))
        weights = Tensor(rng.normal(size=(4, 4, 4)))
        error = finite_diff_check(lambda t: (residual_block_forward(params.scope('block'), t) * weights).sum(), x)
        assert error < 1e-4

    def test_channel_mismatch(self, rng):
        params = ParameterSet()
        add_residual_block(params, 'block', 4, rng)
        with pytest.raises(ShapeError):
            residual_block_forward(params.scope('block'), Tensor(np.zeros((3, 4, 4))))


class TestSelfAttention:
    def test_identity_at_init(self, rng):
        params = ParameterSet()
        add_self_attention(params, 'attn', 8, 4, rng)
        x = Tensor(rng.normal(size=(8, 4, 4)))
        assert np.array_equal(self_attention_forward(params.scope('attn'), x).data, x.data)

    def test_single_position_returns_value_projection(self, rng):
        params = ParameterSet()
        add_self_attention(params, 'attn', 4, 2, rng)
        _with_values(params, attn__gamma=1.0)
        x = Tensor(rng.normal(size=(4, 1, 1)))
        weight = params['attn.value.weight'].data.reshape(4, 4)
        value = weight @ x.data.reshape(4) + params['attn.value.bias'].data
        np.testing.assert_array_equal(attention_weights(params.scope('attn'), x).data, [[1.0]])
        out = self_attention_forward(params.scope('attn'), x)
        np.testing.assert_allclose(out.data.reshape(4), x.data.reshape(4) + value, atol=1e-12)

    def test_attention_rows_sum_to_one(self, rng):
        params = ParameterSet()
        add_self_attention(params, 'attn', 4, 2, rng)
        weights = attention_weights(params.scope('attn'), Tensor(rng.normal(size=(4, 3, 3))))
        assert weights.shape == (9, 9)
        np.testing.assert_allclose(weights.data.sum(axis=1), np.ones(9), atol=1e-12)

    def test_gradient_with_open_gate(self, rng):
        params = ParameterSet()
        add_self_attention(params, 'attn', 4, 2, rng)
        _with_values(params, attn__gamma=0.7)
        x = Tensor(rng.normal(size=(4, 2, 2)))
        weights = Tensor(rng.normal(size=(4, 2, 2)))
        error = finite_diff_check(lambda t: (self_attention_forward(params.scope('attn'), t) * weights).sum(), x)
        assert error < 1e-4

    def test_reduction_must_divide_channels(self, rng):
        with pytest.raises(ConfigError):
            add_self_attention(ParameterSet(), 'attn', 6, 4, rng)

    def test_channel_mismatch(self, rng):
        params = ParameterSet()
        add_self_attention(params, 'attn', 4, 2, rng)
        with pytest.raises(ShapeError):
            self_attention_forward(params.scope('attn'), Tensor(np.zeros((8, 2, 2))))


class TestModelConfig:
    def test_bottleneck_shape(self):
        assert ModelConfig(height=32, width=32, widths=(16, 32, 64)).bottleneck_shape == (64, 4, 4)

    def test_indivisible_size(self):
        with pytest.raises(ConfigError):
            ModelConfig(height=12, width=12, widths=(4, 8, 8)).validate()

    def test_deepest_width_must_fit_attention(self):
        with pytest.raises(ConfigError):
            ModelConfig(height=8, width=8, widths=(6,), attention_reduction=4).validate()


class TestEncoder:
    def test_desk_shapes(self, rng):
        config = ModelConfig(height=32, width=32, widths=(16, 32, 64), latent_dim=16)
        params = build_model_params(config, rng)
        image = rng.uniform(size=(1, 32, 32))
        mask = (rng.uniform(size=(1, 32, 32)) > 0.5).astype(np.float64)
        out = encoder_forward(params, Tensor(np.concatenate([image, mask])), config)
        assert out.mu.shape == (16,)
        assert out.logvar.shape == (16,)
        assert np.all(np.isfinite(out.mu.data)) and np.all(np.isfinite(out.logvar.data))

    def test_deterministic(self, tiny_model, make_pair, rng):
        pair = make_pair(rng)
        first = tiny_model.encode(pair.image, pair.mask)
        second = tiny_model.encode(pair.image, pair.mask)
        assert np.array_equal(first.mu.data, second.mu.data)
        assert np.array_equal(first.logvar.data, second.logvar.data)

    def test_wrong_shape(self, tiny_model):
        with pytest.raises(ShapeError):
            encoder_forward(tiny_model.params, Tensor(np.zeros((2, 16, 16))), tiny_model.config)

    def test_non_binary_mask(self, tiny_model, rng):
        x_and_m = Tensor(np.concatenate([rng.uniform(size=(1, 8, 8)), np.full((1, 8, 8), 0.5)]))
        with pytest.raises(DataError):
            encoder_forward(tiny_model.params, x_and_m, tiny_model.config)

    def test_gradient_through_image_channel(self, tiny_model, make_pair, rng):
        pair = make_pair(rng)
        x_and_m = concat_channels(pair.image, pair.mask)
        weights = Tensor(rng.normal(size=(4,)))

        def f(t):
            out = encoder_forward(tiny_model.params, t, tiny_model.config)
            return (out.mu * weights).sum() + (out.logvar * weights).sum()

        assert finite_diff_check(f, x_and_m, coordinates=range(64)) < 1e-4


class TestReparameterize:
    def test_zero_noise_gives_mean(self):
        mu = Tensor([0.3, -1.0])
        np.testing.assert_array_equal(reparameterize(mu, Tensor([0.5, 2.0]), Tensor([0.0, 0.0])).data, mu.data)

    def test_standard_normal(self):
        noise = Tensor([0.4, -1.2])
        np.testing.assert_array_equal(reparameterize(Tensor([0.0, 0.0]), Tensor([0.0, 0.0]), noise).data,
                                      noise.data)

    def test_hand_value(self):
        z0 = reparameterize(Tensor([1.0]), Tensor([np.log(4.0)]), Tensor([0.5]))
        assert z0.item() == pytest.approx(2.0, abs=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reparameterize(Tensor([0.0]), Tensor([0.0, 0.0]), Tensor([0.0]))


class TestDecoder:
    def test_desk_shapes(self, rng):
        config = ModelConfig(height=32, width=32, widths=(16, 32, 64), latent_dim=16)
        out = decoder_forward(build_model_params(config, rng), Tensor(rng.normal(size=16)), config)
        assert out.image_mean.shape == (1, 32, 32)
        assert out.mask_logits.shape == (1, 32, 32)

    def test_deterministic(self, tiny_model, rng):
        z = Tensor(rng.normal(size=4))
        first, second = tiny_model.decode(z), tiny_model.decode(z)
        assert np.array_equal(first.image_mean.data, second.image_mean.data)
        assert np.array_equal(first.mask_logits.data, second.mask_logits.data)

    def test_dim_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            tiny_model.decode(Tensor(np.zeros(5)))

    def test_gradient_wrt_z(self, tiny_model, rng):
        z = Tensor(rng.normal(size=4))
        assert finite_diff_check(lambda t: tiny_model.decode(t).image_mean.sum(), z) < 1e-4

    def test_two_level_model(self, rng):
        config = ModelConfig(height=8, width=8, widths=(4, 8), latent_dim=3, attention_reduction=2)
        model = GenerativeModel.build('vae', config, rng)
        z = Tensor(rng.normal(size=3))
        assert model.decode(z).mask_logits.shape == (1, 8, 8)
        assert finite_diff_check(lambda t: model.decode(t).mask_logits.sum(), z) < 1e-4


class TestGenerativeModel:
    def test_unknown_kind(self, tiny_config, rng):
        with pytest.raises(ConfigError):
            GenerativeModel.build('gan', tiny_config, rng)

    def test_sigma_must_be_positive(self, tiny_config, rng):
        with pytest.raises(ConfigError):
            GenerativeModel.build('vae', tiny_config, rng, sigma_x=0.0)


class TestUNet:
    def test_desk_shape(self, rng):
        config = UNetConfig(height=32, width=32)
        logits = unet_forward(build_unet_params(config, rng), Tensor(rng.uniform(size=(1, 32, 32))), config)
        assert logits.shape == (1, 32, 32)

    def test_zero_head_gives_bias(self, rng):
        config = UNetConfig(height=8, width=8, depth=2, base_width=4)
        params = _with_values(build_unet_params(config, rng), unet__head__weight=0.0, unet__head__bias=0.7)
        logits = unet_forward(params, Tensor(rng.uniform(size=(1, 8, 8))), config)
        np.testing.assert_array_equal(logits.data, np.full((1, 8, 8), 0.7))

    def test_gradient(self, rng):
        config = UNetConfig(height=8, width=8, depth=2, base_width=4)
        params = build_unet_params(config, rng)
        image = Tensor(rng.uniform(size=(1, 8, 8)))
        assert finite_diff_check(lambda t: unet_forward(params, t, config).sum(), image) < 1e-4

    def test_divisibility(self, rng):
        config = UNetConfig(height=8, width=8, depth=3, base_width=2)
        params = build_unet_params(config, rng)
        with pytest.raises(ShapeError):
            unet_forward(params, Tensor(np.zeros((1, 12, 12))), config)
        with pytest.raises(ConfigError):
            UNetConfig(height=12, width=12, depth=3).validate()
