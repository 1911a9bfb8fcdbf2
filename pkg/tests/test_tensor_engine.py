"""
Tests for tensor_engine
=======================

Forward values on hand-checkable inputs, shape formulas, error paths, and
the optimizer / scheduler / initialization contracts. Randomized gradient
agreement lives in test_gradcheck.py.
"""

import numpy as np
import pytest

from mlrep.errors import ConfigError, NonFiniteError, ShapeError, UsageError
from mlrep.gradcheck import finite_diff_check
from mlrep.tensor_engine import (
    ConvLayerSpec,
    OptimizerState,
    RunningStats,
    SchedulerState,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    gelu,
    maxpool2x2_apply,
    maxpool2x2_backward,
    maxpool2x2_forward,
    mse_loss,
    normal_init,
    scheduler_update,
    sigmoid,
    sigmoid_backward,
    upsample_to_backward,
    upsample_to_forward,
)


# =============================================================================
# Convolution
# =============================================================================

class TestConv2d:

    def test_ones_kernel_sums_the_window(self):
        spec = ConvLayerSpec(1, 1, (3, 3))
        out = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), spec)
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_kernel_passes_values_and_gradients_through(self, rng):
        spec = ConvLayerSpec(1, 1, (3, 3), padding=(1, 1))
        weights = np.zeros((1, 1, 3, 3))
        weights[0, 0, 1, 1] = 1.0
        x = rng.normal(size=(2, 1, 5, 6))
        np.testing.assert_allclose(conv2d_forward(x, weights, np.zeros(1), spec), x)

        grad = rng.normal(size=x.shape)
        grad_input, _, _ = conv2d_backward(grad, x, weights, spec)
        np.testing.assert_allclose(grad_input, grad)

    def test_zero_upstream_gradient_gives_zero_gradients(self, rng):
        spec = ConvLayerSpec(2, 3, (3, 2), padding=(1, 0))
        x = rng.normal(size=(2, 2, 5, 5))
        weights = rng.normal(size=spec.weight_dims)
        out = conv2d_forward(x, weights, np.zeros(3), spec)
        grads = conv2d_backward(np.zeros_like(out), x, weights, spec)
        for grad in grads:
            assert not np.any(grad)

    def test_output_dims_follow_closed_form(self, rng):
        for _ in range(50):
            kh, kw = rng.integers(1, 6, size=2)
            ph, pw = rng.integers(0, 3, size=2)
            sh, sw = rng.integers(1, 4, size=2)
            height = int(rng.integers(max(1, kh - 2 * ph), 15))
            width = int(rng.integers(max(1, kw - 2 * pw), 15))
            spec = ConvLayerSpec(1, 1, (int(kh), int(kw)), (int(ph), int(pw)), (int(sh), int(sw)))
            out = conv2d_forward(np.zeros((1, 1, height, width)), np.zeros(spec.weight_dims), np.zeros(1), spec)
            assert out.shape[2:] == ((height + 2 * ph - kh) // sh + 1, (width + 2 * pw - kw) // sw + 1)

    def test_first_encoder_layer_dims(self):
        assert ConvLayerSpec(1, 32, (3, 3), (2, 2)).output_dims(20, 409) == (22, 411)

    def test_inputs_are_not_modified(self, rng):
        spec = ConvLayerSpec(2, 2, (3, 3), padding=(1, 1))
        x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=spec.weight_dims), rng.normal(size=2)
        copies = [x.copy(), w.copy(), b.copy()]
        out = conv2d_forward(x, w, b, spec)
        conv2d_backward(np.ones_like(out), x, w, spec)
        for original, copy in zip((x, w, b), copies):
            np.testing.assert_array_equal(original, copy)

    def test_small_case_matches_finite_differences(self, rng):
        spec = ConvLayerSpec(1, 2, (3, 3), padding=(1, 1))
        x = rng.normal(size=(1, 1, 4, 4))
        w = rng.normal(size=spec.weight_dims)
        b = rng.normal(size=2)
        R = rng.normal(size=(1, 2, 4, 4))
        grad_x, grad_w, grad_b = conv2d_backward(R, x, w, spec)

        assert finite_diff_check(lambda v: np.sum(R * conv2d_forward(v, w, b, spec)), x, grad_x) <= 1e-4
        assert finite_diff_check(lambda v: np.sum(R * conv2d_forward(x, v, b, spec)), w, grad_w) <= 1e-4
        assert finite_diff_check(lambda v: np.sum(R * conv2d_forward(x, w, v, spec)), b, grad_b) <= 1e-4

    def test_channel_mismatch_raises_shape_error(self):
        spec = ConvLayerSpec(2, 1, (3, 3))
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 3, 5, 5)), np.zeros(spec.weight_dims), np.zeros(1), spec)

    def test_kernel_larger_than_padded_input_raises_shape_error(self):
        spec = ConvLayerSpec(1, 1, (5, 5))
        with pytest.raises(ShapeError):
            conv2d_forward(np.zeros((1, 1, 3, 3)), np.zeros(spec.weight_dims), np.zeros(1), spec)

    def test_missing_forward_cache_raises_usage_error(self):
        spec = ConvLayerSpec(1, 1, (3, 3))
        with pytest.raises(UsageError):
            conv2d_backward(np.zeros((1, 1, 1, 1)), None, np.zeros(spec.weight_dims), spec)

    @pytest.mark.parametrize("kwargs", [
        {'kernel': (0, 3)},
        {'kernel': (3, 3), 'stride': (0, 1)},
        {'kernel': (3, 3), 'padding': (-1, 0)},
        {'kernel': (3, 3), 'activation': 'relu'},
    ])
    def test_invalid_spec_raises_config_error(self, kwargs):
        with pytest.raises(ConfigError):
            ConvLayerSpec(1, 1, **kwargs)


# =============================================================================
# Pooling and upsampling
# =============================================================================

class TestMaxPool:

    def test_single_window_max(self):
        out, _ = maxpool2x2_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        np.testing.assert_array_equal(out, [[[[4.0]]]])

    def test_odd_trailing_column_is_dropped(self):
        out, _ = maxpool2x2_forward(np.zeros((1, 32, 22, 411), dtype=np.float32))
        assert out.shape == (1, 32, 11, 205)

    def test_backward_routes_to_unique_max(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out, index_map = maxpool2x2_forward(x)
        grad = maxpool2x2_backward(np.ones_like(out), index_map, x.shape)
        np.testing.assert_array_equal(grad, [[[[0.0, 0.0], [0.0, 1.0]]]])

    def test_ties_go_to_first_window_position(self):
        x = np.full((1, 1, 4, 4), 7.0)
        out, index_map = maxpool2x2_forward(x)
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 7.0))
        grad = maxpool2x2_backward(np.ones_like(out), index_map, x.shape)
        expected = np.zeros((1, 1, 4, 4))
        expected[:, :, 0::2, 0::2] = 1.0
        np.testing.assert_array_equal(grad, expected)

    def test_gradient_mass_is_conserved(self, rng):
        x = rng.normal(size=(2, 3, 7, 9))
        out, index_map = maxpool2x2_forward(x)
        grad_out = rng.normal(size=out.shape)
        grad = maxpool2x2_backward(grad_out, index_map, x.shape)
        assert grad.sum() == pytest.approx(grad_out.sum(), abs=1e-12)

    def test_zero_gradient_stays_zero(self, rng):
        x = rng.normal(size=(1, 1, 6, 7))
        out, index_map = maxpool2x2_forward(x)
        assert not np.any(maxpool2x2_backward(np.zeros_like(out), index_map, x.shape))

    def test_apply_reuses_routing(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        out, index_map = maxpool2x2_forward(x)
        np.testing.assert_array_equal(maxpool2x2_apply(x, index_map), out)

    def test_stale_map_raises_usage_error(self, rng):
        _, index_map = maxpool2x2_forward(rng.normal(size=(1, 1, 4, 4)))
        with pytest.raises(UsageError):
            maxpool2x2_backward(np.zeros((1, 1, 3, 3)), index_map, (1, 1, 6, 6))

    def test_input_smaller_than_window_raises_shape_error(self):
        with pytest.raises(ShapeError):
            maxpool2x2_forward(np.zeros((1, 1, 1, 5)))


class TestUpsample:

    def test_scalar_fills_target(self):
        out = upsample_to_forward(np.full((1, 1, 1, 1), 3.5), (2, 2))
        np.testing.assert_array_equal(out, np.full((1, 1, 2, 2), 3.5))

    def test_code_to_first_decoder_stage(self):
        assert upsample_to_forward(np.zeros((1, 10, 1, 25)), (3, 51)).shape == (1, 10, 3, 51)

    def test_same_dims_is_identity(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(upsample_to_forward(x, (4, 5)), x)

    def test_nearest_neighbour_mapping(self):
        x = np.arange(6, dtype=float).reshape(1, 1, 2, 3)
        out = upsample_to_forward(x, (3, 5))
        for y in range(3):
            for col in range(5):
                assert out[0, 0, y, col] == x[0, 0, y * 2 // 3, col * 3 // 5]

    def test_backward_counts_copies(self):
        grad = upsample_to_backward(np.ones((1, 1, 3, 51)), (1, 1, 1, 25))
        assert grad.shape == (1, 1, 1, 25)
        assert grad.sum() == 3 * 51

    def test_smaller_target_raises_shape_error(self):
        with pytest.raises(ShapeError):
            upsample_to_forward(np.zeros((1, 1, 4, 4)), (3, 4))


# =============================================================================
# Batch normalization
# =============================================================================

class TestBatchNorm:

    def test_train_mode_standardizes_each_channel(self, rng):
        x = rng.normal(5.0, 10.0, size=(8, 3, 4, 4))
        out, _ = batchnorm_forward(x, np.ones(3), np.zeros(3), None, mode='train')
        mean = out.mean(axis=(0, 2, 3))
        var = out.var(axis=(0, 2, 3))
        assert np.all(np.abs(mean) <= 1e-6)
        assert np.all(np.abs(var - 1.0) <= 1e-6)

    def test_zero_gamma_outputs_beta(self, rng):
        beta = np.array([0.5, -1.0])
        out, _ = batchnorm_forward(rng.normal(size=(4, 2, 3, 3)), np.zeros(2), beta, None, mode='train')
        np.testing.assert_allclose(out, np.broadcast_to(beta[None, :, None, None], out.shape))

    def test_eval_before_any_update_raises_usage_error(self):
        stats = RunningStats.empty(2)
        with pytest.raises(UsageError):
            batchnorm_forward(np.zeros((2, 2, 2, 2)), np.ones(2), np.zeros(2), stats, mode='eval')

    def test_first_update_sets_unbiased_statistics(self, rng):
        x = rng.normal(size=(4, 2, 3, 3))
        stats = RunningStats.empty(2)
        batchnorm_forward(x, np.ones(2), np.zeros(2), stats, mode='train')
        assert stats.updates == 1
        np.testing.assert_allclose(stats.mean, x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(stats.var, x.transpose(1, 0, 2, 3).reshape(2, -1).var(axis=1, ddof=1))

    def test_later_updates_use_momentum(self, rng):
        stats = RunningStats.empty(1, momentum=0.1)
        first = rng.normal(size=(4, 1, 2, 2))
        second = rng.normal(3.0, 1.0, size=(4, 1, 2, 2))
        batchnorm_forward(first, np.ones(1), np.zeros(1), stats, mode='train')
        batchnorm_forward(second, np.ones(1), np.zeros(1), stats, mode='train')
        assert stats.mean[0] == pytest.approx(0.9 * first.mean() + 0.1 * second.mean())

    def test_eval_mode_uses_running_statistics(self, rng):
        stats = RunningStats(mean=np.array([1.0]), var=np.array([4.0]), updates=1)
        x = rng.normal(size=(2, 1, 3, 3))
        out, _ = batchnorm_forward(x, np.ones(1), np.zeros(1), stats, mode='eval', eps=0.0)
        np.testing.assert_allclose(out, (x - 1.0) / 2.0)

    def test_train_mode_needs_two_values_per_channel(self):
        with pytest.raises(ShapeError):
            batchnorm_forward(np.zeros((1, 1, 1, 1)), np.ones(1), np.zeros(1), None, mode='train')

    def test_backward_without_cache_raises_usage_error(self):
        with pytest.raises(UsageError):
            batchnorm_backward(np.zeros((1, 1, 2, 2)), None)


# =============================================================================
# Activations and loss
# =============================================================================

class TestActivations:

    def test_gelu_reference_values(self):
        assert gelu(np.array(0.0)) == 0.0
        assert gelu(np.array(1.0)) == pytest.approx(0.841345, abs=1e-5)
        assert abs(gelu(np.array(-10.0))) <= 1e-6
        assert gelu(np.array(10.0)) == pytest.approx(10.0, abs=1e-6)

    def test_sigmoid_and_its_derivative(self):
        assert sigmoid(np.array(0.0)) == 0.5
        out = sigmoid(np.array([-2.0, 0.0, 3.0]))
        np.testing.assert_allclose(sigmoid_backward(np.ones(3), out), out * (1 - out))


class TestMSE:

    def test_identical_tensors(self, rng):
        x = rng.normal(size=(2, 3))
        loss, grad = mse_loss(x, x.copy())
        assert loss == 0.0
        assert not np.any(grad)

    def test_hand_computed_value(self):
        loss, grad = mse_loss(np.array([1.0, 2.0]), np.zeros(2))
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [1.0, 2.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(3), np.zeros(4))


# =============================================================================
# Optimization
# =============================================================================

class TestAdam:

    def test_zero_gradient_is_a_fixed_point(self, rng):
        params = {'w': rng.normal(size=(3, 2)), 'b': rng.normal(size=2)}
        state = OptimizerState.for_parameters(params)
        grads = {name: np.zeros_like(value) for name, value in params.items()}
        for _ in range(3):
            new_params, state = adam_step(params, grads, state)
            for name in params:
                np.testing.assert_array_equal(new_params[name], params[name])
        assert state.step == 3

    def test_first_step_moves_by_learning_rate(self):
        params = {'w': np.array([1.0, -1.0])}
        state = OptimizerState.for_parameters(params, lr=0.01)
        new_params, _ = adam_step(params, {'w': np.array([0.5, -2.0])}, state)
        np.testing.assert_allclose(new_params['w'], [0.99, -0.99], atol=1e-7)

    def test_inputs_are_left_untouched(self, rng):
        params = {'w': rng.normal(size=4)}
        before = params['w'].copy()
        state = OptimizerState.for_parameters(params)
        adam_step(params, {'w': np.ones(4)}, state)
        np.testing.assert_array_equal(params['w'], before)
        assert not np.any(state.first_moment['w'])

    def test_non_finite_gradient_names_the_parameter(self):
        params = {'encoder.0.conv.weight': np.zeros(2)}
        state = OptimizerState.for_parameters(params)
        with pytest.raises(NonFiniteError, match="encoder.0.conv.weight"):
            adam_step(params, {'encoder.0.conv.weight': np.array([np.nan, 0.0])}, state)

    def test_name_mismatch_raises_usage_error(self):
        params = {'w': np.zeros(2)}
        state = OptimizerState.for_parameters(params)
        with pytest.raises(UsageError):
            adam_step(params, {'v': np.zeros(2)}, state)


class TestScheduler:

    def test_constant_stream_halves_rate_after_patience(self):
        state = SchedulerState(current_lr=0.002, patience=5)
        rates = []
        for _ in range(7):
            state = scheduler_update(state, 1.0)
            rates.append(state.current_lr)
        assert rates[:6] == [0.002] * 6
        assert rates[6] == pytest.approx(0.001)

    def test_improvement_resets_counter(self):
        state = SchedulerState()
        for loss in (1.0, 1.0, 1.0, 0.5):
            state = scheduler_update(state, loss)
        assert state.epochs_since_improvement == 0
        assert state.best_val_loss == 0.5

    def test_tiny_improvement_below_threshold_counts_as_stale(self):
        state = scheduler_update(SchedulerState(threshold=1e-4), 1.0)
        state = scheduler_update(state, 1.0 - 1e-6)
        assert state.epochs_since_improvement == 1

    def test_rate_never_drops_below_minimum(self):
        state = SchedulerState(current_lr=1.5e-5, patience=0, min_lr=1e-5)
        state = scheduler_update(state, 1.0)
        state = scheduler_update(state, 1.0)
        assert state.current_lr == pytest.approx(1e-5)

    def test_non_finite_loss_raises(self):
        with pytest.raises(NonFiniteError):
            scheduler_update(SchedulerState(), float('nan'))

    def test_invalid_factor_raises_config_error(self):
        with pytest.raises(ConfigError):
            SchedulerState(factor=1.5)


# =============================================================================
# Initialization
# =============================================================================

class TestNormalInit:

    def test_same_seed_same_tensor(self):
        np.testing.assert_array_equal(normal_init((3, 4), 7), normal_init((3, 4), 7))

    def test_different_seeds_differ(self):
        assert not np.array_equal(normal_init((3, 4), 7), normal_init((3, 4), 8))

    def test_zero_std_gives_zeros(self):
        assert not np.any(normal_init((5,), 1, std=0.0))

    def test_sample_mean_within_clt_bound(self):
        draws = normal_init((100_000,), 0, std=0.02)
        assert abs(draws.mean()) <= 3 * 0.02 / np.sqrt(100_000)
        assert draws.std() == pytest.approx(0.02, rel=0.02)
