import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlcov.errors import ConfigError
from nlcov.mutate import (
    Blur,
    Brightness,
    Contrast,
    Rotate,
    Scale,
    Translate,
    ValidityParams,
    build_ops,
    default_ops,
    is_valid,
)


def random_image(rng, h=8, w=8, c=3):
    return rng.uniform(size=(h, w, c))


class TestIdentityCases:
    def test_brightness_zero_delta(self):
        img = random_image(np.random.default_rng(0))
        out = Brightness().apply_params(img, 0.0)
        np.testing.assert_array_equal(out, img)

    def test_contrast_unit_factor(self):
        img = random_image(np.random.default_rng(1))
        out = Contrast().apply_params(img, 1.0)
        np.testing.assert_allclose(out, img, atol=1e-15)

    def test_rotate_full_turn(self):
        img = random_image(np.random.default_rng(2), 9, 9, 2)
        out = Rotate().apply_params(img, 360.0)
        assert np.abs(out - img).max() < 1e-4

    def test_scale_unit_factor(self):
        img = random_image(np.random.default_rng(3), 7, 5, 1)
        out = Scale().apply_params(img, 1.0)
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_blur_of_constant_image(self):
        img = np.full((6, 6, 3), 0.42)
        out = Blur().apply_params(img, 1.7)
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_translate_zero_shift(self):
        img = random_image(np.random.default_rng(4))
        out = Translate().apply_params(img, (0.0, 0.0))
        np.testing.assert_array_equal(out, img)


class TestOperatorBehavior:
    def test_translate_fills_with_zeros(self):
        img = np.ones((4, 4, 1))
        out = Translate().apply_params(img, (0.25, 0.0))  # one row down
        np.testing.assert_array_equal(out[0], np.zeros((4, 1)))
        np.testing.assert_array_equal(out[1:], np.ones((3, 4, 1)))

    def test_contrast_pivots_on_channel_mean(self):
        img = np.zeros((2, 2, 1))
        img[0, 0, 0] = 1.0  # mean 0.25
        out = Contrast().apply_params(img, 0.5)
        assert out[0, 0, 0] == pytest.approx(0.25 + 0.5 * 0.75)
        assert out[1, 1, 0] == pytest.approx(0.25 - 0.5 * 0.25)

    def test_blur_smooths_impulse_symmetrically(self):
        img = np.zeros((9, 9, 1))
        img[4, 4, 0] = 1.0
        out = Blur().apply_params(img, 1.0)
        assert out[4, 4, 0] < 1.0
        assert out[3, 4, 0] == pytest.approx(out[5, 4, 0])
        assert out[4, 3, 0] == pytest.approx(out[4, 5, 0])

    def test_one_by_one_images_survive_all_ops(self):
        rng = np.random.default_rng(6)
        img = rng.uniform(size=(1, 1, 16))
        for op in default_ops():
            out = op.apply(img, np.random.default_rng(0))
            assert out.shape == img.shape
            assert out.min() >= 0.0 and out.max() <= 1.0

    @pytest.mark.parametrize("op", default_ops(), ids=lambda op: op.name)
    def test_shape_and_range_preserved(self, op):
        rng = np.random.default_rng(11)
        img = 2.0 * random_image(rng, 6, 7, 3) - 0.5  # escape [0,1] on purpose
        img = np.clip(img, 0, 1)
        out = op.apply(img, np.random.default_rng(5))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    @pytest.mark.parametrize("op", default_ops(), ids=lambda op: op.name)
    def test_deterministic_given_rng_state(self, op):
        img = random_image(np.random.default_rng(9))
        a = op.apply(img, np.random.default_rng(123))
        b = op.apply(img, np.random.default_rng(123))
        np.testing.assert_array_equal(a, b)

    def test_describe_mentions_parameters(self):
        assert "0.12" in Brightness().describe(0.12)
        assert Rotate().describe(-3.0).startswith("rotate")


class TestValidity:
    def test_unchanged_is_valid(self):
        img = random_image(np.random.default_rng(1))
        assert is_valid(img, img.copy(), ValidityParams())

    def test_small_uniform_shift_passes_linf_clause(self):
        img = np.full((10, 10, 1), 0.5)
        shifted = img + 0.39  # every pixel changed, but below beta
        assert is_valid(img, shifted, ValidityParams(alpha=0.2, beta=0.4))

    def test_large_widespread_change_fails_both_clauses(self):
        rng = np.random.default_rng(3)
        img = np.full((10, 10, 1), 0.05)
        mutated = img.copy()
        idx = rng.choice(100, size=30, replace=False)  # 30% of pixels
        mutated.reshape(100)[idx] += 0.9
        assert not is_valid(img, mutated, ValidityParams(alpha=0.2, beta=0.4))

    def test_few_changed_pixels_pass_alpha_clause(self):
        img = np.zeros((10, 10, 1))
        mutated = img.copy()
        mutated[0, 0, 0] = 1.0  # 1% of pixels, huge change
        assert is_valid(img, mutated, ValidityParams(alpha=0.2, beta=0.4))

    def test_changed_pixels_counted_per_position(self):
        img = np.zeros((2, 2, 3))
        mutated = img.copy()
        mutated[0, 0, :] = 0.5  # three channels, still one pixel
        mutated2 = img.copy()
        mutated2[0, 0, 0] = 0.5  # one channel of one pixel
        p = ValidityParams(alpha=0.3, beta=0.1)
        assert is_valid(img, mutated, p) == is_valid(img, mutated2, p)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            is_valid(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)), ValidityParams())

    @given(st.integers(min_value=0, max_value=10**6))
    @settings(max_examples=25, deadline=None)
    def test_symmetric_in_change_measurement(self, seed):
        rng = np.random.default_rng(seed)
        a = random_image(rng, 5, 5, 2)
        b = np.clip(a + rng.normal(scale=0.3, size=a.shape), 0, 1)
        p = ValidityParams()
        assert is_valid(a, b, p) == is_valid(b, a, p)

    def test_params_invariants(self):
        with pytest.raises(ConfigError):
            ValidityParams(alpha=0.0)
        with pytest.raises(ConfigError):
            ValidityParams(beta=1.5)


class TestOpRegistry:
    def test_build_by_name(self):
        ops = build_ops(["brightness", "blur"])
        assert [op.name for op in ops] == ["brightness", "blur"]

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="unknown mutation operator"):
            build_ops(["sharpen"])

    def test_empty_set_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            build_ops([])

    def test_custom_ranges(self):
        bright, rot, trans = build_ops(
            ["brightness:-0.3:0.3", "rotate:25", "translate:0.2:0.05"]
        )
        assert bright.delta_range == (-0.3, 0.3)
        assert rot.max_degrees == 25.0
        assert trans.max_fraction == (0.2, 0.05)

    def test_bad_range_specs(self):
        with pytest.raises(ConfigError, match="one value"):
            build_ops(["rotate:1:2"])
        with pytest.raises(ConfigError, match="two values"):
            build_ops(["blur:1"])
        with pytest.raises(ConfigError, match="empty range"):
            build_ops(["scale:1.2:0.8"])
        with pytest.raises(ConfigError, match="bad operator range"):
            build_ops(["brightness:a:b"])
