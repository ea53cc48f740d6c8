import numpy as np
import pytest

from nlcov.errors import ConfigError
from nlcov.runner import forward, forward_batch
from nlcov.synth import (
    DatasetScheme,
    make_gaussian_classifier_data,
    make_smoothed_classifier,
    make_variant,
    smoothing_matrix,
    train_toy_mlp,
)


@pytest.fixture
def base_inputs():
    rng = np.random.default_rng(0)
    return rng.uniform(0.3, 0.7, size=(200, 8))


class TestMakeVariant:
    def test_base_passthrough(self, base_inputs):
        out = make_variant(base_inputs, DatasetScheme("base"), np.random.default_rng(1))
        np.testing.assert_array_equal(out, base_inputs)

    def test_times1_cardinality(self, base_inputs):
        scheme = DatasetScheme("times1", sample_count=50)
        out = make_variant(base_inputs, scheme, np.random.default_rng(1))
        assert out.shape == base_inputs.shape

    def test_times10_cardinality(self, base_inputs):
        scheme = DatasetScheme("times10", sample_count=50)
        out = make_variant(base_inputs, scheme, np.random.default_rng(1))
        assert out.shape == (10 * len(base_inputs), 8)

    def test_zero_bound_repeats_sources(self, base_inputs):
        scheme = DatasetScheme("times1", noise_bound=0.0, sample_count=20)
        out = make_variant(base_inputs, scheme, np.random.default_rng(2))
        base_rows = {tuple(row) for row in base_inputs}
        assert all(tuple(row) in base_rows for row in out)
        assert len({tuple(row) for row in out}) == 20

    def test_noise_stays_within_bound_of_a_source(self, base_inputs):
        bound = 0.05
        scheme = DatasetScheme("times1", noise_bound=bound, sample_count=30)
        out = make_variant(base_inputs, scheme, np.random.default_rng(3))
        # inputs live in [0.3, 0.7] so no clamping occurs: every output must
        # sit within the noise bound of some base row
        for row in out[:50]:
            nearest = np.abs(base_inputs - row).max(axis=1).min()
            assert nearest <= bound + 1e-12

    def test_base_too_small(self):
        scheme = DatasetScheme("times1", sample_count=100)
        with pytest.raises(ConfigError, match="base set"):
            make_variant(np.zeros((10, 4)), scheme, np.random.default_rng(0))

    def test_same_seed_shares_sources_across_schemes(self, base_inputs):
        t1 = make_variant(base_inputs, DatasetScheme("times1", noise_bound=0.0,
                                                     sample_count=25),
                          np.random.default_rng(7))
        t10 = make_variant(base_inputs, DatasetScheme("times10", noise_bound=0.0,
                                                      sample_count=25),
                           np.random.default_rng(7))
        assert {tuple(r) for r in t1} == {tuple(r) for r in t10}

    def test_unknown_variant(self):
        with pytest.raises(ConfigError, match="variant"):
            DatasetScheme("times100")


class TestGaussianData:
    def test_shapes_and_labels(self):
        points, labels = make_gaussian_classifier_data(
            4, 25, 16, 8.0, np.random.default_rng(0)
        )
        assert points.shape == (100, 16)
        assert labels.shape == (100,)
        assert set(labels.tolist()) == {0, 1, 2, 3}
        assert points.min() >= 0.0 and points.max() <= 1.0

    def test_classes_bounded_by_dim(self):
        with pytest.raises(ConfigError, match="exceed"):
            make_gaussian_classifier_data(5, 10, 4, 8.0, np.random.default_rng(0))

    def test_needs_two_classes(self):
        with pytest.raises(ConfigError, match="2 classes"):
            make_gaussian_classifier_data(1, 10, 4, 8.0, np.random.default_rng(0))

    def test_deterministic(self):
        a, _ = make_gaussian_classifier_data(3, 10, 8, 6.0, np.random.default_rng(5))
        b, _ = make_gaussian_classifier_data(3, 10, 8, 6.0, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)


class TestTraining:
    def test_wide_separation_reaches_full_accuracy(self):
        data = make_gaussian_classifier_data(2, 100, 8, 10.0, np.random.default_rng(1))
        model = train_toy_mlp(data, seed=0, target_accuracy=1.0)
        preds, _ = forward_batch(model, data[0])
        assert (preds == data[1]).mean() == 1.0

    def test_training_is_reproducible(self):
        data = make_gaussian_classifier_data(3, 40, 8, 8.0, np.random.default_rng(2))
        m1 = train_toy_mlp(data, seed=3)
        m2 = train_toy_mlp(data, seed=3)
        for l1, l2 in zip(m1.layers, m2.layers):
            assert np.array_equal(l1.weights, l2.weights)
            assert np.array_equal(l1.bias, l2.bias)

    def test_dim_mismatch_is_config_error(self):
        data = make_gaussian_classifier_data(2, 20, 8, 8.0, np.random.default_rng(3))
        with pytest.raises(ConfigError, match="input dim"):
            train_toy_mlp(data, input_dim=16)

    def test_hopeless_training_reports_remedy(self):
        # fully overlapping blobs cannot reach the accuracy bar
        data = make_gaussian_classifier_data(2, 50, 8, 0.05, np.random.default_rng(4))
        with pytest.raises(ConfigError, match="raise separation or epochs"):
            train_toy_mlp(data, epochs=30, seed=0)


class TestSmoothing:
    def test_rows_sum_to_one(self):
        mat = smoothing_matrix(4, 0.7)
        np.testing.assert_allclose(mat.sum(axis=1), np.ones(16), atol=1e-12)

    def test_damps_noise_keeps_constants(self):
        mat = smoothing_matrix(4, 0.5)
        rng = np.random.default_rng(0)
        noise = rng.uniform(-0.1, 0.1, size=(500, 16))
        smoothed = noise @ mat.T
        assert smoothed.var() < 0.6 * noise.var()
        np.testing.assert_allclose(mat @ np.full(16, 0.3), np.full(16, 0.3),
                                   atol=1e-12)

    def test_smoothed_classifier_front_end_is_first_layer(self):
        model, points, labels = make_smoothed_classifier(
            2, 20, 16, 8.0, seed=0, hidden=16, epochs=400
        )
        assert model.layers[0].name == "smooth"
        assert model.layers[0].activation == "none"
        preds = [forward(model, p).prediction for p in points[:20]]
        assert preds == labels[:20].tolist()

    def test_smoothing_needs_square_dim(self):
        with pytest.raises(ConfigError, match="square"):
            make_smoothed_classifier(2, 10, 12, 8.0, seed=0)
