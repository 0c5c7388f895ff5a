import math

import numpy as np
import pytest

from hvae_joint.errors import GraphError, NumericalError, ShapeError
from hvae_joint.tensor import (
    ComputationRecord,
    Tensor,
    activation,
    backward,
    concat_channels,
    conv2d,
    elementwise,
    finite_diff_check,
    grad,
    matmul,
    max_pool2,
    no_record,
    reduce,
    slice_channels,
    softmax,
    strict_finite,
    upsample_nearest,
    zeros,
)


class TestElementwise:
    def test_add(self):
        out = elementwise('add', Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_mul_by_one_is_identity(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(3, 4)))
        np.testing.assert_array_equal(elementwise('mul', x, 1.0).data, x.data)

    def test_self_subtraction_is_zero(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(5,)))
        np.testing.assert_array_equal((x - x).data, np.zeros(5))

    def test_scalar_on_the_left(self):
        np.testing.assert_array_equal((1.0 - Tensor([0.25, 1.0])).data, [0.75, 0.0])

    def test_min_max(self):
        a, b = Tensor([1.0, 5.0]), Tensor([3.0, 2.0])
        np.testing.assert_array_equal(elementwise('min', a, b).data, [1.0, 2.0])
        np.testing.assert_array_equal(elementwise('max', a, b).data, [3.0, 5.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\[2\].*\[3\]"):
            elementwise('add', Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            elementwise('mod', Tensor([1.0]), 2.0)

    def test_division_by_zero_is_rejected_when_strict(self):
        with pytest.raises(NumericalError):
            Tensor([1.0, 2.0]) / Tensor([1.0, 0.0])

    def test_division_by_zero_passes_when_not_strict(self):
        with strict_finite(False):
            out = Tensor([1.0]) / 0.0
        assert math.isinf(out.data[0])


class TestMatmul:
    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])

    def test_identity_and_annihilator(self, rng):
        a = Tensor(rng.normal(size=(3, 3)))
        np.testing.assert_array_equal((a @ Tensor(np.eye(3))).data, a.data)
        np.testing.assert_array_equal((a @ zeros((3, 2))).data, np.zeros((3, 2)))

    def test_inner_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(zeros((2, 3)), zeros((2, 3)))


class TestConv2d:
    def test_ones_kernel(self):
        out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))

    def test_delta_kernel_crops(self, rng):
        image = rng.normal(size=(1, 4, 4))
        kernel = np.zeros((1, 1, 2, 2))
        kernel[0, 0, 0, 0] = 1.0
        out = conv2d(Tensor(image), Tensor(kernel))
        np.testing.assert_array_equal(out.data, image[:, :3, :3])

    def test_zero_kernel(self, rng):
        out = conv2d(Tensor(rng.normal(size=(2, 5, 5))), zeros((3, 2, 3, 3)), padding=1)
        assert out.shape == (3, 5, 5)
        np.testing.assert_array_equal(out.data, np.zeros((3, 5, 5)))

    def test_stride_and_padding_shape(self):
        out = conv2d(zeros((2, 8, 8)), zeros((4, 2, 4, 4)), stride=2, padding=1)
        assert out.shape == (4, 4, 4)

    def test_bias_is_added_per_channel(self):
        out = conv2d(zeros((1, 3, 3)), zeros((2, 1, 1, 1)), bias=Tensor([1.5, -2.0]))
        np.testing.assert_array_equal(out.data[0], np.full((3, 3), 1.5))
        np.testing.assert_array_equal(out.data[1], np.full((3, 3), -2.0))

    def test_non_integer_extent(self):
        with pytest.raises(ShapeError, match='Non-integer'):
            conv2d(zeros((1, 4, 4)), zeros((1, 1, 3, 3)), stride=2)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match='channel'):
            conv2d(zeros((2, 4, 4)), zeros((1, 3, 3, 3)))

    def test_gradients(self, rng):
        kernels = Tensor(rng.uniform(-1, 1, size=(2, 2, 3, 3)))
        image = Tensor(rng.uniform(-1, 1, size=(2, 4, 4)))
        error = finite_diff_check(lambda x: (conv2d(x, kernels, stride=1, padding=1) ** 2).sum(), image)
        assert error < 1e-5
        wide = Tensor(rng.uniform(-1, 1, size=(2, 5, 5)))
        error = finite_diff_check(lambda k: conv2d(wide, k, stride=2, padding=1).sum(), kernels)
        assert error < 1e-5


class TestActivation:
    def test_sigmoid_at_zero(self):
        assert activation('sigmoid', Tensor(0.0)).item() == 0.5

    def test_relu(self):
        np.testing.assert_array_equal(activation('relu', Tensor([-1.0, 2.0])).data, [0.0, 2.0])

    def test_leaky_relu_slope(self):
        np.testing.assert_allclose(activation('leaky_relu', Tensor([-1.0, 2.0])).data, [-0.2, 2.0])

    def test_exp_log_inverse(self):
        assert abs(Tensor(math.log(3.0)).exp().item() - 3.0) < 1e-12

    def test_log_of_non_positive(self):
        with pytest.raises(NumericalError):
            activation('log', Tensor([1.0, 0.0]))

    def test_softplus_is_stable_for_large_inputs(self):
        np.testing.assert_allclose(activation('softplus', Tensor([800.0, -800.0])).data, [800.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize('kind', ['relu', 'leaky_relu', 'sigmoid', 'tanh', 'exp', 'softplus'])
    def test_gradients(self, kind, rng):
        # keep relu kinks away from the shifted points
        x = Tensor(rng.uniform(0.1, 2.0, size=(6,)) * rng.choice([-1.0, 1.0], size=6))
        assert finite_diff_check(lambda t: activation(kind, t).sum(), x) < 1e-5

    def test_log_gradient(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(4,)))
        assert finite_diff_check(lambda t: t.log().sum(), x) < 1e-5


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)

    def test_hand_evaluation(self):
        np.testing.assert_allclose(softmax(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = softmax(Tensor(rng.normal(scale=5.0, size=(4, 7))), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(4), atol=1e-12)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_shift_invariance(self, rng):
        t = Tensor(rng.normal(size=(3, 5)))
        np.testing.assert_allclose(softmax(t + 7.5).data, softmax(t).data, atol=1e-12)

    def test_large_logits_do_not_overflow(self):
        np.testing.assert_allclose(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            softmax(zeros((2, 2)), axis=2)

    def test_gradient(self, rng):
        weights = Tensor(rng.normal(size=(3, 4)))
        x = Tensor(rng.uniform(-2, 2, size=(3, 4)))
        assert finite_diff_check(lambda t: (softmax(t, axis=1) * weights).sum(), x) < 1e-5


class TestReduce:
    def test_sum(self):
        assert reduce('sum', Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_of_constant(self):
        assert reduce('mean', Tensor(np.full((3, 4), 2.5))).item() == pytest.approx(2.5, abs=1e-15)

    def test_sum_of_zeros(self):
        assert reduce('sum', zeros((4, 2))).item() == 0.0

    def test_axes_and_keepdims(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(t.sum(1).data, [3.0, 12.0])
        assert t.mean(0, keepdims=True).shape == (1, 3)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            reduce('sum', zeros((2, 2)), axes=3)

    def test_gradient_broadcasts_back(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(2, 3, 2)))
        assert finite_diff_check(lambda t: (t.mean((0, 2)) ** 2).sum(), x) < 1e-5


class TestChannels:
    def test_concat_puts_image_first(self, rng):
        image, mask = rng.normal(size=(1, 4, 4)), np.ones((1, 4, 4))
        out = concat_channels(Tensor(image), Tensor(mask))
        assert out.shape == (2, 4, 4)
        np.testing.assert_array_equal(out.data[0], image[0])

    def test_concat_with_empty(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 3)))
        np.testing.assert_array_equal(concat_channels(a, zeros((0, 3, 3))).data, a.data)

    def test_slice_round_trip_is_exact(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3, 3))), Tensor(rng.normal(size=(3, 3, 3)))
        joined = concat_channels(a, b)
        assert np.array_equal(slice_channels(joined, 2, 5).data, b.data)
        assert np.array_equal(slice_channels(joined, 0, 2).data, a.data)

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            concat_channels(zeros((1, 4, 4)), zeros((1, 4, 3)))

    def test_gradient_splits_back(self, rng):
        b = Tensor(rng.normal(size=(1, 2, 2)))
        weights = Tensor(rng.normal(size=(3, 2, 2)))
        x = Tensor(rng.normal(size=(2, 2, 2)))
        assert finite_diff_check(lambda t: (concat_channels(t, b) * weights).sum(), x) < 1e-5

    def test_upsample_and_pool(self):
        t = Tensor(np.arange(4.0).reshape(1, 2, 2))
        up = upsample_nearest(t)
        assert up.shape == (1, 4, 4)
        np.testing.assert_array_equal(max_pool2(up).data, t.data)

    def test_pool_needs_even_extent(self):
        with pytest.raises(ShapeError):
            max_pool2(zeros((1, 3, 4)))


class TestBackward:
    def test_square_gives_twice_x(self, rng):
        values = rng.normal(size=(4,))
        with ComputationRecord() as record:
            x = Tensor(values, requires_grad=True)
            out = (x * x).sum()
        grads = backward(out, record)
        np.testing.assert_allclose(grads[x].data, 2 * values)

    def test_matmul_matches_finite_differences(self, rng):
        b = Tensor(rng.uniform(-2, 2, size=(3, 2)))
        a = Tensor(rng.uniform(-2, 2, size=(4, 3)))
        assert finite_diff_check(lambda t: matmul(t, b).sum(), a) < 1e-5
        assert finite_diff_check(lambda t: matmul(a, t).sum(), b) < 1e-5

    def test_constant_output_gives_zeros(self):
        with ComputationRecord() as record:
            x = Tensor([1.0, 2.0], requires_grad=True)
            out = Tensor(5.0)
        np.testing.assert_array_equal(backward(out, record)[x].data, [0.0, 0.0])

    def test_linearity(self, rng):
        values = rng.normal(size=(5,))

        def gradient(fn):
            with ComputationRecord() as record:
                x = Tensor(values, requires_grad=True)
                out = fn(x)
            return backward(out, record)[x].data

        f = lambda t: (t ** 3).sum()
        g = lambda t: (t.tanh() * 2.0).sum()
        combined = gradient(lambda t: f(t) + g(t))
        np.testing.assert_allclose(combined, gradient(f) + gradient(g), atol=1e-12)

    def test_non_scalar_output(self):
        with ComputationRecord():
            x = Tensor([1.0, 2.0], requires_grad=True)
            out = x * 2.0
        with pytest.raises(GraphError):
            backward(out)

    def test_record_is_single_use(self):
        with ComputationRecord() as record:
            x = Tensor([1.0], requires_grad=True)
            out = (x * x).sum()
        backward(out, record)
        with pytest.raises(GraphError):
            backward(out, record)
        with pytest.raises(GraphError):
            with record:
                pass

    def test_no_record_outside_context(self):
        out = (Tensor([1.0], requires_grad=True) * 2.0).sum()
        with pytest.raises(GraphError):
            backward(out)

    def test_no_record_suspends_recording(self):
        with ComputationRecord() as record:
            x = Tensor([1.0], requires_grad=True)
            with no_record():
                x * 3.0
        assert len(record) == 0

    def test_evaluation_is_deterministic(self, rng):
        values = rng.normal(size=(2, 5, 5))
        kernels = rng.normal(size=(3, 2, 3, 3))

        def run():
            with ComputationRecord() as record:
                x = Tensor(values, requires_grad=True)
                out = conv2d(x, Tensor(kernels), padding=1).tanh().sum()
            return out.item(), backward(out, record)[x].data

        (first, g1), (second, g2) = run(), run()
        assert first == second
        assert np.array_equal(g1, g2)


class TestGrad:
    def test_does_not_consume_the_record(self):
        with ComputationRecord() as record:
            x = Tensor([1.5, -0.5], requires_grad=True)
            out = (x ** 2).sum()
            (first,) = grad(out, [x])
        np.testing.assert_allclose(first.data, [3.0, -1.0])
        assert not record.consumed
        np.testing.assert_allclose(backward(out, record)[x].data, [3.0, -1.0])

    def test_create_graph_is_differentiable(self, rng):
        # d/dx sum(d/dx sum(x^3)) = d/dx sum(3x^2) = 6x
        values = rng.uniform(-1, 1, size=(3,))
        with ComputationRecord() as record:
            x = Tensor(values, requires_grad=True)
            (inner,) = grad((x ** 3).sum(), [x], create_graph=True)
            out = inner.sum()
        np.testing.assert_allclose(backward(out, record)[x].data, 6 * values)

    def test_unrecorded_output_gives_zeros(self):
        x = Tensor([1.0, 2.0])
        (g,) = grad(x.sum(), [x])
        np.testing.assert_array_equal(g.data, [0.0, 0.0])


class TestFiniteDiffCheck:
    def test_quadratic(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(8,)))
        assert finite_diff_check(lambda t: (t ** 2).sum(), x, step=1e-5) < 1e-7

    def test_constant(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(3,)))
        assert finite_diff_check(lambda t: Tensor(4.0), x) == 0.0

    def test_non_finite_shifted_value(self):
        with strict_finite(False):
            with pytest.raises(NumericalError):
                finite_diff_check(lambda t: t.exp().sum(), Tensor([709.0]), step=1.0)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: t.sum(), Tensor([1.0]), step=0.0)

    def test_selected_coordinates(self, rng):
        x = Tensor(rng.uniform(-2, 2, size=(10,)))
        assert finite_diff_check(lambda t: (t * t).sum(), x,
                                 coordinates=[0, 9]) < 1e-7
