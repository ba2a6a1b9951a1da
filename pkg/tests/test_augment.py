"""Tests for the patch transforms and view-pair generation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchssl.augment import (
    BLUR_TRUNCATE,
    TRANSFORM_KINDS,
    AugmentPipeline,
    ParamRanges,
    TransformSpec,
    apply_transform,
    make_view_pair,
    sample_spec,
    to_three_channel,
)
from patchssl.imaging import Image16


def random_patch(seed=0, size=48, lo=2000, hi=60000):
    rng = np.random.default_rng(seed)
    return Image16.from_array(rng.integers(lo, hi, size=(size, size)).astype(np.uint16))


def blur_oracle(unit, sigma):
    """Dense separable Gaussian convolution with symmetric (reflect) padding."""
    radius = int(BLUR_TRUNCATE * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(unit, radius, mode="symmetric")
    rows = np.zeros_like(padded)
    for i, k in enumerate(kernel):
        rows += k * np.roll(padded, radius - i, axis=1)
    out = np.zeros_like(padded)
    for i, k in enumerate(kernel):
        out += k * np.roll(rows, radius - i, axis=0)
    return out[radius:-radius, radius:-radius]


class TestIdentityParams:
    def test_brightness_zero_delta(self):
        img = random_patch(1)
        out = apply_transform(img, TransformSpec("brightness", {"delta": 0.0}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_contrast_unit_factor(self):
        img = random_patch(2)
        out = apply_transform(img, TransformSpec("contrast", {"factor": 1.0}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_gamma_unit_exponent(self):
        img = random_patch(3)
        out = apply_transform(img, TransformSpec("gamma", {"exponent": 1.0}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_sharpen_zero_strength(self):
        img = random_patch(4)
        out = apply_transform(img, TransformSpec("sharpen", {"strength": 0.0}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_crop_full_scale(self):
        img = random_patch(5)
        spec = TransformSpec(
            "crop_resize", {"scale": 1.0, "offset_x": 0.0, "offset_y": 0.0}
        )
        np.testing.assert_array_equal(apply_transform(img, spec).pixels, img.pixels)


class TestPointwiseTransforms:
    def test_gamma_square_root(self):
        # 0.25 ** 0.5 = 0.5 in normalized units, up to one quantization step
        img = Image16.from_array(np.full((8, 8), 16384, dtype=np.uint16))
        out = apply_transform(img, TransformSpec("gamma", {"exponent": 0.5}))
        expected = int(np.floor(np.sqrt(16384 / 65535) * 65535 + 0.5))
        assert out.pixels[0, 0] == expected
        assert abs(out.pixels[0, 0] / 65535 - 0.5) <= 1 / 65535

    def test_brightness_shift_matches_float_oracle(self):
        img = random_patch(6)
        delta = 0.125
        out = apply_transform(img, TransformSpec("brightness", {"delta": delta}))
        expected = np.floor(
            np.clip(img.pixels / 65535 + delta, 0, 1) * 65535 + 0.5
        ).astype(np.uint16)
        np.testing.assert_array_equal(out.pixels, expected)

    def test_brightness_clamps_at_white(self):
        img = Image16.from_array(np.full((4, 4), 60000, dtype=np.uint16))
        out = apply_transform(img, TransformSpec("brightness", {"delta": 0.2}))
        assert np.all(out.pixels == 65535)

    def test_contrast_pivots_on_mean(self):
        pix = np.zeros((2, 2), dtype=np.uint16)
        pix[0] = 20000
        pix[1] = 40000
        img = Image16.from_array(pix)
        out = apply_transform(img, TransformSpec("contrast", {"factor": 0.5}))
        mean = 30000 / 65535
        expected = np.floor(
            ((pix / 65535 - mean) * 0.5 + mean) * 65535 + 0.5
        ).astype(np.uint16)
        np.testing.assert_array_equal(out.pixels, expected)

    @given(
        factor=st.floats(0.6, 1.4),
        exponent=st.floats(0.5, 2.0),
        delta=st.floats(-0.2, 0.2),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_transforms_keep_order(self, factor, exponent, delta):
        ramp = Image16.from_array(
            np.linspace(0, 65535, 64, dtype=np.uint16).reshape(1, 64)
        )
        for spec in (
            TransformSpec("contrast", {"factor": factor}),
            TransformSpec("gamma", {"exponent": exponent}),
            TransformSpec("brightness", {"delta": delta}),
        ):
            out = apply_transform(ramp, spec).pixels[0].astype(np.int64)
            assert np.all(np.diff(out) >= 0)


class TestBlurFamily:
    def test_matches_dense_convolution_oracle(self):
        img = random_patch(7, size=40)
        unit = img.pixels / 65535
        for sigma in (0.5, 1.0, 2.0):
            out = apply_transform(img, TransformSpec("gaussian_blur", {"sigma": sigma}))
            expected = np.floor(
                np.clip(blur_oracle(unit, sigma), 0, 1) * 65535 + 0.5
            ).astype(np.uint16)
            # independent summation order: allow one quantization step
            assert np.max(np.abs(out.pixels.astype(int) - expected.astype(int))) <= 1
            exact = np.mean(out.pixels == expected)
            assert exact > 0.99

    def test_interior_of_linear_ramp_unchanged(self):
        # a symmetric kernel reproduces any affine field away from borders
        xs = np.arange(64)
        pix = ((xs[np.newaxis, :] + xs[:, np.newaxis]) * 400).astype(np.uint16)
        img = Image16.from_array(pix)
        out = apply_transform(img, TransformSpec("gaussian_blur", {"sigma": 2.0}))
        interior = slice(8, 56)
        before = pix[interior, interior] / 65535
        after = out.pixels[interior, interior] / 65535
        assert abs(after.mean() - before.mean()) < 1e-3

    def test_blur_constant_is_constant(self):
        img = Image16.from_array(np.full((16, 16), 30000, dtype=np.uint16))
        out = apply_transform(img, TransformSpec("gaussian_blur", {"sigma": 1.5}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_sharpen_constant_unchanged(self):
        img = Image16.from_array(np.full((16, 16), 12345, dtype=np.uint16))
        out = apply_transform(img, TransformSpec("sharpen", {"strength": 2.0}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_highpass_constant_maps_to_mid_gray(self):
        img = Image16.from_array(np.full((16, 16), 5000, dtype=np.uint16))
        out = apply_transform(img, TransformSpec("highpass", {}))
        assert np.all(out.pixels == 32768)  # round(0.5 * 65535 + 0.5)

    def test_sharpen_boosts_an_edge(self):
        pix = np.full((32, 32), 20000, dtype=np.uint16)
        pix[:, 16:] = 40000
        img = Image16.from_array(pix)
        out = apply_transform(img, TransformSpec("sharpen", {"strength": 1.0}))
        # overshoot on the bright side of the edge
        assert out.pixels[16, 17] > 40000
        assert out.pixels[16, 14] < 20000


class TestHistEq:
    def test_constant_image_unchanged(self):
        img = Image16.from_array(np.full((10, 10), 7777, dtype=np.uint16))
        out = apply_transform(img, TransformSpec("hist_eq", {}))
        np.testing.assert_array_equal(out.pixels, img.pixels)

    def test_output_stays_in_occupied_band(self):
        img = random_patch(8, lo=10000, hi=20000)
        out = apply_transform(img, TransformSpec("hist_eq", {}))
        assert out.pixels.min() >= img.pixels.min()
        assert out.pixels.max() <= img.pixels.max()
        assert out.pixels.min() == img.pixels.min()
        assert out.pixels.max() == img.pixels.max()

    def test_matches_cdf_oracle(self):
        rng = np.random.default_rng(9)
        pix = rng.integers(100, 400, size=(20, 20)).astype(np.uint16)
        img = Image16.from_array(pix)
        out = apply_transform(img, TransformSpec("hist_eq", {}))
        lo, hi = int(pix.min()), int(pix.max())
        flat = np.sort(pix.ravel())
        for y in range(20):
            for x in range(20):
                v = pix[y, x]
                cdf_v = np.searchsorted(flat, v, side="right")
                cdf_lo = np.searchsorted(flat, lo, side="right")
                cdf_hi = np.searchsorted(flat, hi, side="right")
                expected = int(
                    np.floor(lo + (cdf_v - cdf_lo) / (cdf_hi - cdf_lo) * (hi - lo) + 0.5)
                )
                assert out.pixels[y, x] == expected

    def test_two_level_image_spreads_to_band_edges(self):
        pix = np.full((4, 4), 1000, dtype=np.uint16)
        pix[2:] = 3000
        out = apply_transform(Image16.from_array(pix), TransformSpec("hist_eq", {}))
        assert set(np.unique(out.pixels)) == {1000, 3000}

    def test_equalized_histogram_is_flat_for_distinct_values(self):
        # a permutation of distinct values maps onto evenly spaced levels
        rng = np.random.default_rng(10)
        values = rng.permutation(np.arange(5000, 5256)).astype(np.uint16)
        img = Image16.from_array(values.reshape(16, 16))
        out = apply_transform(img, TransformSpec("hist_eq", {}))
        counts = np.bincount(out.pixels.ravel())
        assert counts.max() <= 2  # evenly spread, no pile-up


class TestCropResize:
    def test_offset_selects_region(self):
        pix = np.zeros((64, 64), dtype=np.uint16)
        pix[:, 32:] = 65535
        img = Image16.from_array(pix)
        left = apply_transform(
            img, TransformSpec("crop_resize", {"scale": 0.5, "offset_x": 0.0, "offset_y": 0.0})
        )
        right = apply_transform(
            img, TransformSpec("crop_resize", {"scale": 0.5, "offset_x": 1.0, "offset_y": 0.0})
        )
        assert np.all(left.pixels == 0)
        assert np.all(right.pixels == 65535)

    def test_output_size_preserved(self):
        img = random_patch(11, size=50)
        out = apply_transform(
            img,
            TransformSpec("crop_resize", {"scale": 0.63, "offset_x": 0.4, "offset_y": 0.7}),
        )
        assert (out.width, out.height) == (50, 50)

    def test_constant_image_invariant(self):
        img = Image16.from_array(np.full((32, 32), 4242, dtype=np.uint16))
        out = apply_transform(
            img,
            TransformSpec("crop_resize", {"scale": 0.5, "offset_x": 0.3, "offset_y": 0.9}),
        )
        assert np.all(out.pixels == 4242)


class TestViewPairs:
    def test_same_seed_identical_views(self):
        img = random_patch(12)
        pipe = AugmentPipeline(("gamma", "brightness"), seed=77)
        a1, b1 = make_view_pair(img, pipe)
        a2, b2 = make_view_pair(img, pipe)
        np.testing.assert_array_equal(a1.pixels, a2.pixels)
        np.testing.assert_array_equal(b1.pixels, b2.pixels)

    def test_degenerate_range_gives_input_back(self):
        img = random_patch(13)
        ranges = ParamRanges(gamma_exponent=(1.0, 1.0))
        pipe = AugmentPipeline(("gamma",), ranges=ranges, seed=0)
        a, b = make_view_pair(img, pipe)
        np.testing.assert_array_equal(a.pixels, img.pixels)
        np.testing.assert_array_equal(b.pixels, img.pixels)

    def test_views_sample_distinct_parameters(self):
        distinct = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            pipe = AugmentPipeline(("brightness",), seed=seed)
            spec_a = sample_spec("brightness", pipe.ranges, rng)
            spec_b = sample_spec("brightness", pipe.ranges, rng)
            if spec_a.params["delta"] != spec_b.params["delta"]:
                distinct += 1
        assert distinct == 100

    def test_views_differ_for_wide_ranges(self):
        img = random_patch(14)
        pipe = AugmentPipeline(("brightness",), seed=3)
        a, b = make_view_pair(img, pipe)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_every_kind_samples_and_applies(self):
        img = random_patch(15)
        ranges = ParamRanges()
        rng = np.random.default_rng(0)
        for kind in TRANSFORM_KINDS:
            out = apply_transform(img, sample_spec(kind, ranges, rng))
            assert (out.width, out.height) == (img.width, img.height)

    def test_pipeline_rejects_empty_and_triple(self):
        with pytest.raises(ValueError):
            AugmentPipeline(())
        with pytest.raises(ValueError):
            AugmentPipeline(("gamma", "contrast", "crop_resize"))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            TransformSpec("solarize", {})
        with pytest.raises(ValueError):
            AugmentPipeline(("solarize",))


class TestThreeChannel:
    def test_channels_identical(self):
        img = random_patch(16)
        out = to_three_channel(img)
        assert out.shape == (48, 48, 3)
        np.testing.assert_array_equal(out[:, :, 0], img.pixels)
        np.testing.assert_array_equal(out[:, :, 1], img.pixels)
        np.testing.assert_array_equal(out[:, :, 2], img.pixels)

    def test_channel_sum(self):
        img = random_patch(17)
        out = to_three_channel(img).astype(np.int64)
        np.testing.assert_array_equal(out.sum(axis=2), img.pixels.astype(np.int64) * 3)

    def test_round_trip_channel_zero(self):
        img = random_patch(18)
        np.testing.assert_array_equal(to_three_channel(img)[:, :, 0], img.pixels)
