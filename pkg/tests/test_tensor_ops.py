"""Reference-op tests: hand-derived examples, naive-loop oracles,
algebraic properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import naive_dilated_conv_1d, naive_dilated_conv_2d
from toolseg.tensor_ops import (DilatedConvSpec, bilinear_upsample,
                                conv_output_size, dilated_conv_1d,
                                dilated_conv_2d, effective_kernel_extent,
                                upsample_weights)


class TestDilatedConv1d:
    def test_hand_example(self):
        # y[0] = x[2] + 2*x[6] = 17, y[1] = x[3] + 2*x[7] = 20
        y = dilated_conv_1d([1, 2, 3, 4, 5, 6, 7, 8], [1, 0, 2], 2)
        assert y.tolist() == [17.0, 20.0]

    def test_single_tap_is_shift(self):
        assert dilated_conv_1d([5, 6, 7, 8], [1], 3).tolist() == [8.0]

    def test_short_input_gives_empty_output(self):
        assert dilated_conv_1d([5, 6, 7], [1], 3).size == 0

    def test_rate_one(self):
        assert dilated_conv_1d([1, 2, 3], [1, 1], 1).tolist() == [5.0]

    def test_empty_filter_rejected(self):
        with pytest.raises(ValueError):
            dilated_conv_1d([1, 2, 3], [], 1)

    @pytest.mark.parametrize("rate", [0, -1])
    def test_nonpositive_rate_rejected(self, rate):
        with pytest.raises(ValueError):
            dilated_conv_1d([1, 2, 3], [1], rate)

    @pytest.mark.parametrize("rate", [1, 2, 3, 4])
    def test_matches_naive_oracle(self, rate):
        rng = np.random.default_rng(rate)
        for _ in range(25):
            n = int(rng.integers(4, 40))
            k = int(rng.integers(1, 5))
            x = rng.normal(size=n)
            w = rng.normal(size=k)
            np.testing.assert_allclose(dilated_conv_1d(x, w, rate),
                                       naive_dilated_conv_1d(x, w, rate),
                                       rtol=1e-12, atol=0)

    @pytest.mark.parametrize("rate", [2, 3, 4])
    def test_subsampling_equivalence(self, rate):
        # stride-1 rate-r output at i equals the rate-1 conv on the
        # subsequence x[i], x[i+r], x[i+2r], ...
        rng = np.random.default_rng(10 + rate)
        for _ in range(20):
            n = int(rng.integers(3 * rate + 2, 60))
            k = int(rng.integers(1, 4))
            x = rng.normal(size=n)
            w = rng.normal(size=k)
            y = dilated_conv_1d(x, w, rate)
            for i in range(len(y)):
                sub = x[i::rate]
                expected = dilated_conv_1d(sub, w, 1)
                np.testing.assert_allclose(y[i], expected[0], rtol=1e-12)


class TestDilatedConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(5, 7, 3))
        spec = DilatedConvSpec(1, rate=5, in_channels=3, out_channels=3)
        w = np.eye(3).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(dilated_conv_2d(x, spec, w), x)

    def test_constant_field_sum(self):
        # 3x3 kernel, rate 2, all-ones weights on a constant-1 9x9 input
        spec = DilatedConvSpec(3, rate=2, in_channels=1, out_channels=1)
        y = dilated_conv_2d(np.ones((9, 9, 1)), spec, np.ones((3, 3, 1, 1)))
        assert y.shape == (5, 5, 1)
        np.testing.assert_array_equal(y, np.full((5, 5, 1), 9.0))

    def test_matches_conv_on_subsampled_input(self):
        # rate-2 stride-1 conv at even output positions equals the
        # standard conv applied to the 2x subsampled input
        rng = np.random.default_rng(1)
        x = rng.normal(size=(12, 12, 2))
        w = rng.normal(size=(3, 3, 2, 4))
        dilated = dilated_conv_2d(
            x, DilatedConvSpec(3, rate=2, in_channels=2, out_channels=4), w)
        plain = dilated_conv_2d(
            x[::2, ::2], DilatedConvSpec(3, in_channels=2, out_channels=4), w)
        np.testing.assert_allclose(dilated[::2, ::2], plain, rtol=1e-12)

    def test_channel_mismatch_rejected(self):
        spec = DilatedConvSpec(3, in_channels=2, out_channels=1)
        with pytest.raises(ValueError):
            dilated_conv_2d(np.ones((5, 5, 3)), spec, np.ones((3, 3, 2, 1)))

    def test_weights_shape_rejected(self):
        spec = DilatedConvSpec(3, in_channels=2, out_channels=1)
        with pytest.raises(ValueError):
            dilated_conv_2d(np.ones((5, 5, 2)), spec, np.ones((3, 3, 1, 1)))

    @pytest.mark.parametrize("rate,stride,padding", [
        (1, 1, 0), (2, 1, 0), (3, 1, 2), (2, 2, 1), (4, 1, 4), (1, 2, 1),
    ])
    def test_matches_naive_oracle(self, rate, stride, padding):
        rng = np.random.default_rng(rate * 10 + stride)
        for _ in range(5):
            h, w_in = int(rng.integers(6, 14)), int(rng.integers(6, 14))
            k = int(rng.integers(1, 4))
            c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            if (k - 1) * rate + 1 > min(h, w_in) + 2 * padding:
                continue
            x = rng.normal(size=(h, w_in, c_in))
            weights = rng.normal(size=(k, k, c_in, c_out))
            bias = rng.normal(size=c_out)
            spec = DilatedConvSpec(k, rate=rate, stride=stride, padding=padding,
                                   in_channels=c_in, out_channels=c_out)
            got = dilated_conv_2d(x, spec, weights, bias)
            want = naive_dilated_conv_2d(x, weights, bias, stride, padding, rate)
            np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        spec = DilatedConvSpec(3, rate=2, in_channels=2, out_channels=3)
        w = rng.normal(size=(3, 3, 2, 3))
        for _ in range(10):
            x = rng.normal(size=(9, 9, 2))
            z = rng.normal(size=(9, 9, 2))
            a, b = rng.normal(), rng.normal()
            lhs = dilated_conv_2d(a * x + b * z, spec, w)
            rhs = a * dilated_conv_2d(x, spec, w) + b * dilated_conv_2d(z, spec, w)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)

    def test_output_size_formula(self):
        assert effective_kernel_extent(3, 2) == 5
        assert conv_output_size(9, 3, stride=1, padding=0, rate=2) == 5
        assert conv_output_size(4, 3, stride=1, padding=0, rate=2) == 0


class TestDilatedConvSpec:
    def test_effective_extent(self):
        assert DilatedConvSpec(3, rate=2).effective_extent == (5, 5)
        assert DilatedConvSpec(3, rate=1).effective_extent == (3, 3)

    def test_invalid_fields_rejected(self):
        with pytest.raises(ValueError):
            DilatedConvSpec(0)
        with pytest.raises(ValueError):
            DilatedConvSpec(3, rate=0)
        with pytest.raises(ValueError):
            DilatedConvSpec(3, padding=-1)


class TestBilinearUpsample:
    def test_row_example(self):
        # corner-aligned: [0, 3] at factor 2 interpolates to [0, 1, 2, 3]
        out = bilinear_upsample(np.array([[0.0, 3.0]]), 2)
        np.testing.assert_allclose(out[0], [0.0, 1.0, 2.0, 3.0])

    def test_factor_one_is_identity(self):
        x = np.random.default_rng(3).normal(size=(4, 5, 2))
        np.testing.assert_array_equal(bilinear_upsample(x, 1), x)

    def test_constant_preserved(self):
        out = bilinear_upsample(np.full((3, 4, 2), 4.2), 8)
        assert out.shape == (24, 32, 2)
        np.testing.assert_allclose(out, 4.2)

    def test_invalid_factor_rejected(self):
        with pytest.raises(ValueError):
            bilinear_upsample(np.ones((2, 2, 1)), 0)

    def test_matches_np_interp(self):
        # independent oracle: separable np.interp over corner-aligned grids
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 7))
        factor = 3
        out = bilinear_upsample(x, factor)
        rows = np.array([np.interp(np.arange(7 * factor) * 6 / (7 * factor - 1),
                                   np.arange(7), row) for row in x])
        full = np.array([np.interp(np.arange(5 * factor) * 4 / (5 * factor - 1),
                                   np.arange(5), col) for col in rows.T]).T
        np.testing.assert_allclose(out, full, rtol=1e-12, atol=1e-12)

    @settings(deadline=None, max_examples=30)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5),
           st.integers(0, 2 ** 32 - 1))
    def test_bounds_preserved(self, factor, h, w, seed):
        x = np.random.default_rng(seed).normal(size=(h, w, 2))
        out = bilinear_upsample(x, factor)
        assert out.min() >= x.min() - 1e-12
        assert out.max() <= x.max() + 1e-12

    def test_weights_rows_sum_to_one(self):
        for n, f in [(1, 4), (2, 3), (7, 8)]:
            np.testing.assert_allclose(upsample_weights(n, f).sum(axis=1), 1.0)
