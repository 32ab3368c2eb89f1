import numpy as np
import pytest

from ftensemble import augment as au
from ftensemble.errors import ConfigError, ContractError
from ftensemble.linalg import RngStream


@pytest.fixture
def img():
    return RngStream(0, 0).generator().uniform(size=(3, 9, 11))


class TestParseMode:
    def test_standard_modes(self):
        assert au.parse_compound_mode("S+SJHR+SR+SJ+SH") == ("S", "SJHR", "SR", "SJ", "SH")
        assert au.parse_compound_mode("S+SJH+C+CJ+CH") == ("S", "SJH", "C", "CJ", "CH")

    def test_unknown_initial_rejected(self):
        with pytest.raises(ConfigError):
            au.parse_compound_mode("S+SX")

    def test_empty_variant_rejected(self):
        with pytest.raises(ConfigError):
            au.parse_compound_mode("S++R")


class TestGeometry:
    def test_identity_resize_is_exact(self, img):
        assert np.abs(au.resize_bilinear(img, 9, 11) - img).max() <= 1e-6

    def test_resize_shapes(self, img):
        out = au.resize_bilinear(img, 5, 7)
        assert out.shape == (3, 5, 7)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_rotation_identity(self, img):
        assert np.array_equal(au.rotate(img, 0.0), img)

    def test_rotation_fills_corners_with_zero(self):
        ones = np.ones((1, 15, 15))
        out = au.rotate(ones, 45.0)
        assert out[0, 0, 0] == 0.0
        assert out.shape == ones.shape

    def test_flip_involution(self, img):
        assert np.array_equal(au.flip_h(au.flip_h(img)), img)

    def test_crop_bounds_checked(self, img):
        with pytest.raises(ContractError):
            au.crop(img, 5, 5, 10, 2)

    def test_crop_extracts_block(self, img):
        out = au.crop(img, 1, 2, 4, 5)
        assert np.array_equal(out, img[:, 1:5, 2:7])


class TestJitter:
    def test_identity_factors(self, img):
        assert np.abs(au.jitter(img, 1.0, 1.0, 1.0) - img).max() <= 1e-15

    def test_brightness_scales_and_clamps(self, img):
        out = au.jitter(img, 2.0, 1.0, 1.0)
        assert out.max() <= 1.0
        assert np.all(out >= np.minimum(img, out))

    def test_zero_contrast_collapses_to_mean(self, img):
        out = au.jitter(img, 1.0, 0.0, 1.0)
        assert np.abs(out - min(max(img.mean(), 0.0), 1.0)).max() <= 1e-12

    def test_zero_color_collapses_channels(self, img):
        out = au.jitter(img, 1.0, 1.0, 0.0)
        assert np.abs(out[0] - out[1]).max() <= 1e-12
        assert np.abs(out[1] - out[2]).max() <= 1e-12


class TestApplyOp:
    def test_forced_flip_involution(self, img):
        params = au.AugmentParams(out_size=8, flip_prob=1.0)
        g = RngStream(1, 0).generator()
        once = au.apply_op("H", img, g, params)
        twice = au.apply_op("H", once, g, params)
        assert np.array_equal(twice, img)

    def test_scale_op_resizes_square(self, img):
        out = au.apply_op("S", img, RngStream(1, 1).generator(), au.AugmentParams(out_size=6))
        assert out.shape == (3, 6, 6)

    def test_crop_op_output_size(self, img):
        out = au.apply_op("C", img, RngStream(1, 2).generator(), au.AugmentParams(out_size=6))
        assert out.shape == (3, 6, 6)

    def test_rotation_op_preserves_shape_and_range(self, img):
        out = au.apply_op("R", img, RngStream(1, 3).generator(), au.AugmentParams(out_size=6))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_oversized_output_rejected(self):
        with pytest.raises(ConfigError):
            au.AugmentParams(out_size=5000)

    def test_deterministic_with_fixed_stream(self, img):
        params = au.AugmentParams(out_size=8)
        a = au.apply_variant("SJHR", img, RngStream(2, 5).generator(), params)
        b = au.apply_variant("SJHR", img, RngStream(2, 5).generator(), params)
        assert np.array_equal(a, b)


class TestExpandSupport:
    def test_counts_and_labels(self):
        g = RngStream(3, 0).generator()
        imgs = g.uniform(size=(25, 3, 10, 10))
        labels = np.repeat(np.arange(5), 5)
        mode = au.parse_compound_mode("S+SJHR+SR+SJ+SH")
        out, out_labels = au.expand_support(imgs, labels, mode, g, au.AugmentParams(out_size=8))
        assert out.shape == (125, 3, 8, 8)
        assert np.array_equal(out_labels, np.tile(labels, 5))
        # label multiset preserved within each variant group
        for v in range(5):
            group = out_labels[v * 25 : (v + 1) * 25]
            assert np.array_equal(np.sort(group), np.sort(labels))

    def test_scale_only_mode_is_scaled_originals(self):
        g = RngStream(3, 1).generator()
        imgs = g.uniform(size=(4, 3, 8, 8))
        out, out_labels = au.expand_support(
            imgs, np.arange(4), ("S",), g, au.AugmentParams(out_size=8)
        )
        assert out.shape == (4, 3, 8, 8)
        assert np.abs(out - imgs).max() <= 1e-6

    def test_pixel_range_invariant(self):
        g = RngStream(3, 2).generator()
        imgs = g.uniform(size=(6, 3, 12, 12))
        mode = au.parse_compound_mode("S+SJHR+C+CJ+CH")
        out, _ = au.expand_support(imgs, np.zeros(6), mode, g, au.AugmentParams(out_size=8))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_mixed_output_sizes_rejected(self):
        g = RngStream(3, 3).generator()
        imgs = g.uniform(size=(2, 3, 10, 10))
        with pytest.raises(ConfigError):
            au.expand_support(imgs, np.zeros(2), ("S", "J"), g, au.AugmentParams(out_size=8))


class TestTtaPredict:
    def test_constant_predictor(self, img):
        g = RngStream(4, 0).generator()
        out = au.tta_predict(
            lambda _: np.array([0.3, 0.7]), img, ("S", "SH", "SR"), g, au.AugmentParams(out_size=8)
        )
        assert np.abs(out - [0.3, 0.7]).max() <= 1e-15

    def test_single_scale_variant(self, img):
        params = au.AugmentParams(out_size=8)
        g = RngStream(4, 1).generator()
        scaled = au.resize_bilinear(img, 8, 8)
        seen = []
        out = au.tta_predict(
            lambda im: seen.append(im) or np.array([1.0, 0.0]), img, ("S",), g, params
        )
        assert np.array_equal(seen[0], scaled)
        assert np.array_equal(out, [1.0, 0.0])

    def test_two_variant_average(self, img):
        outs = iter([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        g = RngStream(4, 2).generator()
        out = au.tta_predict(lambda _: next(outs), img, ("S", "SH"), g, au.AugmentParams(out_size=8))
        assert np.array_equal(out, [0.5, 0.5])
