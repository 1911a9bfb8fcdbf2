"""
Tests for cae_model
===================

Shape chain and parameter counts of the reference layout, the build / train /
encode / decode contracts on a narrow variant, and weights persistence.
"""

import numpy as np
import pytest

from mlrep.binary_format import read_container, write_container
from mlrep.config import BATCHNORM_MOMENTUM
from mlrep.cae_model import (
    CAEArchitecture,
    TrainConfig,
    build_cae,
    compute_shape_chain,
    count_parameters,
    decode,
    encode,
    evaluate_mse,
    load_weights,
    save_weights,
    train_cae,
)
from mlrep.errors import (
    ConfigError,
    DataError,
    NonFiniteError,
    ShapeError,
    UsageError,
    WeightsFormatError,
)

TINY_INPUT = (20, 40)


def unit_batch(rng, count, dims=TINY_INPUT):
    return rng.uniform(0.0, 1.0, size=(count,) + dims).astype(np.float32)


@pytest.fixture
def tiny_model(tiny_arch):
    return build_cae(TINY_INPUT, tiny_arch, seed=0)


# =============================================================================
# Architecture and shapes
# =============================================================================

class TestShapeChain:

    def test_reference_code_is_ten_by_one_by_twenty_five(self):
        chain = compute_shape_chain((20, 409), CAEArchitecture.reference())
        assert chain.code_dims == (10, 1, 25)
        assert chain.code_size == 250

    def test_reference_encoder_dims(self):
        chain = compute_shape_chain((20, 409), CAEArchitecture.reference())
        assert chain.encoder_heights() == [20, 22, 11, 13, 6, 6, 3, 3, 1]
        assert chain.encoder_widths() == [409, 411, 205, 207, 103, 103, 51, 51, 25]

    def test_decoder_mirrors_encoder_dims(self):
        chain = compute_shape_chain((20, 409), CAEArchitecture.reference())
        assert [stage.conv_input for stage in chain.decoder] == [(3, 51), (6, 103), (13, 207), (22, 411)]
        assert [stage.output for stage in chain.decoder] == [(3, 51), (6, 103), (11, 205), (20, 409)]

    def test_audio_only_width(self):
        assert compute_shape_chain((20, 74), CAEArchitecture.reference()).code_size == 50

    def test_matches_independent_walk(self, rng):
        arch = CAEArchitecture.reference()
        for _ in range(20):
            height, width = int(rng.integers(12, 40)), int(rng.integers(20, 500))
            h, w = height, width
            for spec in arch.encoder:
                h = (h + 2 * spec.padding[0] - spec.kernel[0] + 1) // 2
                w = (w + 2 * spec.padding[1] - spec.kernel[1] + 1) // 2
            assert compute_shape_chain((height, width), arch).code_dims == (10, h, w)

    def test_too_small_input_names_the_stage(self):
        with pytest.raises(ShapeError, match="encoder.3"):
            compute_shape_chain((8, 409), CAEArchitecture.reference())

    def test_reconstruction_dims_equal_input_dims(self, tiny_arch, rng):
        for height, width in [(12, 20), (20, 40), (23, 37)]:
            model = build_cae((height, width), tiny_arch)
            forward = model.forward(unit_batch(rng, 2, (height, width))[:, None], mode='train', track_stats=False)
            assert forward.reconstruction.shape == (2, 1, height, width)
            for cache, stage in zip(forward.encoder, model.shape_chain.encoder):
                assert cache.pre_activation.shape[2:] == stage.conv_output

    @pytest.mark.parametrize("kwargs", [
        {'channels': (4, 6), 'kernels': (3, 3, 5)},
        {'padding': 3, 'kernels': (3, 3, 5, 5)},
    ])
    def test_illegal_layouts_raise_config_error(self, kwargs):
        with pytest.raises(ConfigError):
            CAEArchitecture.reference(**kwargs)


class TestParameterCount:

    def test_reference_encoder(self):
        breakdown = count_parameters(CAEArchitecture.reference())
        assert breakdown.encoder_total == 256_202
        assert breakdown.decoder_total == 256_193

    def test_with_classifier_heads(self):
        breakdown = count_parameters(CAEArchitecture.reference())
        assert breakdown.with_heads(1) == 256_453
        assert breakdown.with_heads(4) == 257_206

    def test_code_layer_batchnorm_adds_twenty(self):
        assert count_parameters(CAEArchitecture.reference(full_batchnorm=True)).encoder_total == 256_222

    def test_conv_only_total(self):
        rows = dict(count_parameters(CAEArchitecture.reference()).layer_rows())
        assert sum(count for name, count in rows.items() if name.startswith('encoder.') and name.endswith('.conv')) == 255_754

    def test_count_does_not_depend_on_input_width(self):
        narrow = count_parameters(CAEArchitecture.reference(), (20, 74))
        assert narrow.encoder_total == 256_202
        assert narrow.with_heads(1) == 256_202 + 51

    def test_model_and_architecture_agree(self, tiny_model, tiny_arch):
        assert count_parameters(tiny_model).total == count_parameters(tiny_arch, TINY_INPUT).total
        assert count_parameters(tiny_model).total == sum(v.size for v in tiny_model.params.values())


# =============================================================================
# Build, encode, decode
# =============================================================================

class TestBuild:

    def test_same_seed_same_weights(self, tiny_arch):
        a, b = build_cae(TINY_INPUT, tiny_arch, seed=4), build_cae(TINY_INPUT, tiny_arch, seed=4)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_different_seeds_differ(self, tiny_arch):
        a, b = build_cae(TINY_INPUT, tiny_arch, seed=4), build_cae(TINY_INPUT, tiny_arch, seed=5)
        assert not np.array_equal(a.params['encoder.0.conv.weight'], b.params['encoder.0.conv.weight'])

    def test_initial_values(self, tiny_model):
        assert not np.any(tiny_model.params['encoder.0.conv.bias'])
        assert np.all(tiny_model.params['encoder.0.bn.gamma'] == 1.0)
        assert 'encoder.3.bn.gamma' not in tiny_model.params
        assert tiny_model.params['encoder.0.conv.weight'].dtype == np.float32

    def test_eval_before_statistics_raises_usage_error(self, tiny_model, rng):
        with pytest.raises(UsageError):
            encode(tiny_model, unit_batch(rng, 2))


class TestEncodeDecode:

    @pytest.fixture
    def warmed(self, tiny_model, rng):
        tiny_model.forward(unit_batch(rng, 8)[:, None], mode='train')
        return tiny_model

    def test_encode_shape_and_determinism(self, warmed, rng):
        X = unit_batch(rng, 5)
        codes = encode(warmed, X)
        assert codes.shape == (5, warmed.code_size) == (5, 6)
        np.testing.assert_array_equal(codes, encode(warmed, X))

    def test_batching_does_not_change_codes(self, warmed, rng):
        X = unit_batch(rng, 7)
        np.testing.assert_allclose(encode(warmed, X, batch_size=2), encode(warmed, X), rtol=1e-5, atol=1e-6)

    def test_decode_returns_unit_interval_matrices(self, warmed, rng):
        reconstruction = decode(warmed, encode(warmed, unit_batch(rng, 3)))
        assert reconstruction.shape == (3, 1) + TINY_INPUT
        assert reconstruction.min() > 0.0 and reconstruction.max() < 1.0

    def test_wrong_width_raises_shape_error(self, warmed, rng):
        with pytest.raises(ShapeError):
            encode(warmed, unit_batch(rng, 2, (20, 41)))

    def test_wrong_code_size_raises_shape_error(self, warmed):
        with pytest.raises(ShapeError):
            decode(warmed, np.zeros((1, 7)))


# =============================================================================
# Training
# =============================================================================

class TestTrainCae:

    def test_history_and_best_restore(self, tiny_model, quick_train, rng):
        train, val = unit_batch(rng, 40), unit_batch(rng, 10)
        model, history = train_cae(tiny_model, train, val, quick_train)
        assert [record.epoch for record in history] == list(range(len(history)))
        assert 2 <= len(history) <= quick_train.max_epochs + 1
        assert history[0].lr == quick_train.lr
        best = min(record.val_mse for record in history)
        assert evaluate_mse(model, val, quick_train.batch_size) == pytest.approx(best, rel=1e-6)

    def test_same_seed_same_result(self, tiny_arch, quick_train, rng):
        train, val = unit_batch(rng, 32), unit_batch(rng, 8)
        first, _ = train_cae(build_cae(TINY_INPUT, tiny_arch), train, val, quick_train)
        second, _ = train_cae(build_cae(TINY_INPUT, tiny_arch), train, val, quick_train)
        for name in first.params:
            np.testing.assert_array_equal(first.params[name], second.params[name])

    def test_stops_after_patience_without_improvement(self, tiny_model, rng, monkeypatch):
        monkeypatch.setattr('mlrep.cae_model.evaluate_mse', lambda model, X, batch_size=8: 1.0)
        config = TrainConfig(batch_size=8, max_epochs=50, early_stop_patience=2)
        _, history = train_cae(tiny_model, unit_batch(rng, 16), unit_batch(rng, 4), config)
        assert [record.epoch for record in history] == [0, 1, 2]

    def test_unnormalized_input_raises_data_error(self, tiny_model, quick_train, rng):
        with pytest.raises(DataError):
            train_cae(tiny_model, unit_batch(rng, 8) * 3.0, unit_batch(rng, 4), quick_train)

    def test_empty_split_raises_data_error(self, tiny_model, quick_train, rng):
        with pytest.raises(DataError):
            train_cae(tiny_model, unit_batch(rng, 8), unit_batch(rng, 0), quick_train)

    def test_non_finite_loss_names_epoch_and_batch(self, tiny_model, quick_train, rng):
        tiny_model.params['decoder.3.conv.bias'][:] = np.nan
        with pytest.raises(NonFiniteError, match="epoch 1, batch 0"):
            train_cae(tiny_model, unit_batch(rng, 8), unit_batch(rng, 4), quick_train)

    def test_precision_64(self, tiny_arch, rng):
        config = TrainConfig(batch_size=8, max_epochs=1, precision=64)
        model = build_cae(TINY_INPUT, tiny_arch, dtype=config.dtype)
        model, _ = train_cae(model, unit_batch(rng, 8), unit_batch(rng, 4), config)
        assert model.params['encoder.0.conv.weight'].dtype == np.float64

    def test_invalid_config_raises(self):
        with pytest.raises(ConfigError):
            TrainConfig(precision=16)

    @pytest.mark.slow
    def test_memorizes_a_small_batch(self, rng):
        X = unit_batch(rng, 8, (20, 409))
        model = build_cae((20, 409), seed=0)
        config = TrainConfig(batch_size=8, max_epochs=500, early_stop_patience=500)
        model, history = train_cae(model, X, X, config)
        assert history[-1].epoch <= 500
        assert any(record.train_mse < 1e-3 for record in history), "no epoch reached train MSE 1e-3"
        reconstruction = decode(model, encode(model, X))[:, 0]
        assert np.max(np.abs(reconstruction - X)) < 0.1

        # block minima after warm-up never increase
        val = np.array([record.val_mse for record in history[11:]])
        minima = [val[start:start + 10].min() for start in range(0, len(val) - 9, 10)]
        assert all(later <= earlier for earlier, later in zip(minima, minima[1:]))


# =============================================================================
# Persistence
# =============================================================================

class TestWeightsFiles:

    @pytest.fixture
    def trained(self, tiny_model, quick_train, rng):
        model, _ = train_cae(tiny_model, unit_batch(rng, 32), unit_batch(rng, 8), quick_train)
        return model

    def test_load_reproduces_codes_exactly(self, trained, tmp_path, rng):
        X = unit_batch(rng, 6)
        loaded = load_weights(save_weights(trained, tmp_path / 'cae.mlrw'))
        np.testing.assert_array_equal(encode(loaded, X), encode(trained, X))
        assert loaded.shape_chain == trained.shape_chain
        assert loaded.architecture == trained.architecture

    def test_encoder_only_file_cannot_decode(self, trained, tmp_path, rng):
        loaded = load_weights(save_weights(trained, tmp_path / 'encoder.mlrw', include_decoder=False))
        assert not loaded.has_decoder
        codes = encode(loaded, unit_batch(rng, 2))
        with pytest.raises(UsageError):
            decode(loaded, codes)

    def test_reference_file_sizes(self, tmp_path):
        model = build_cae((20, 409))
        full = save_weights(model, tmp_path / 'cae.mlrw').stat().st_size
        encoder = save_weights(model, tmp_path / 'encoder.mlrw', include_decoder=False).stat().st_size
        assert 1.0e6 <= encoder <= 1.1e6
        assert 2.0e6 <= full <= 2.2e6

    def test_missing_encoder_tensor(self, trained, tmp_path):
        path = save_weights(trained, tmp_path / 'cae.mlrw')
        tensors = read_container(path)
        del tensors['encoder.1.conv.weight']
        write_container(path, tensors)
        with pytest.raises(WeightsFormatError, match="encoder.1.conv.weight"):
            load_weights(path)

    def test_missing_metadata(self, trained, tmp_path):
        path = save_weights(trained, tmp_path / 'cae.mlrw')
        tensors = read_container(path)
        del tensors['meta/input_dims']
        write_container(path, tensors)
        with pytest.raises(WeightsFormatError):
            load_weights(path)

    def test_batchnorm_momentum_survives_a_reload(self, tiny_arch, tmp_path):
        model = build_cae(TINY_INPUT, tiny_arch, momentum=0.3)
        loaded = load_weights(save_weights(model, tmp_path / 'cae.mlrw'))
        assert loaded.running
        assert all(stats.momentum == pytest.approx(0.3) for stats in loaded.running.values())

    def test_files_without_momentum_fall_back_to_the_default(self, trained, tmp_path):
        path = save_weights(trained, tmp_path / 'cae.mlrw')
        tensors = {name: value for name, value in read_container(path).items() if not name.endswith('.bn.momentum')}
        write_container(path, tensors)
        loaded = load_weights(path)
        assert all(stats.momentum == pytest.approx(BATCHNORM_MOMENTUM) for stats in loaded.running.values())
