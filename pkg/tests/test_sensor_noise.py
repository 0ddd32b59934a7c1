"""Attenuation, noise laws, quantization and parameter sampling"""
import numpy as np
import pytest
from scipy import stats

from color_pipeline import CcmMode, ColorState
from error_handler import ConfigurationError, ParameterError
from helpers import constant_image
from sensor_noise import (
    DegradationParams, ParamRanges, QuantMode, RngPurpose, SeededRng, TruncatedGaussian, UniformRange,
    attenuate, quantization_half_width, quantization_noise, sample_param_table, sample_params,
    shot_read_noise,
)


class TestSeededRng:

    def test_same_stream_same_draws(self):
        a = SeededRng(42, 3).generator(RngPurpose.NOISE).random(16)
        b = SeededRng(42, 3).generator(RngPurpose.NOISE).random(16)
        np.testing.assert_array_equal(a, b)

    def test_streams_and_purposes_are_independent(self):
        base = SeededRng(42, 3).generator(RngPurpose.NOISE).random(16)
        assert not np.array_equal(base, SeededRng(42, 4).generator(RngPurpose.NOISE).random(16))
        assert not np.array_equal(base, SeededRng(42, 3).generator(RngPurpose.PARAMS).random(16))

    @pytest.mark.parametrize("seed, stream", [(-1, 0), (2 ** 64, 0), (0, -2)])
    def test_invalid_seed(self, seed, stream):
        with pytest.raises(ParameterError):
            SeededRng(seed, stream)


class TestAttenuate:

    def test_unit_k_is_identity(self):
        img = constant_image(0.3, state=ColorState.LINEAR_CAMERA)
        np.testing.assert_array_equal(attenuate(img, 1.0).data, img.data)

    def test_constant_image(self):
        out = attenuate(constant_image(0.5, state=ColorState.LINEAR_CAMERA), 0.1)
        np.testing.assert_allclose(out.data, 0.05)

    def test_linearity(self):
        gen = np.random.default_rng(0)
        x, y = gen.random((4, 4, 3)), gen.random((4, 4, 3))
        state = ColorState.LINEAR_CAMERA
        lhs = attenuate(constant_image(0, (4, 4), state).with_data(x + y), 0.3).data
        rhs = attenuate(constant_image(0, (4, 4), state).with_data(x), 0.3).data \
            + attenuate(constant_image(0, (4, 4), state).with_data(y), 0.3).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-9

    @pytest.mark.parametrize("k", [0.0, 0.005, 1.5])
    def test_out_of_range(self, k):
        with pytest.raises(ParameterError):
            attenuate(constant_image(0.5, state=ColorState.LINEAR_CAMERA), k)


class TestShotReadNoise:

    def test_zero_noise_is_exact(self):
        signal = np.full(1000, 0.05)
        out = shot_read_noise(signal, 0.0, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, signal)

    def test_moments(self):
        signal = np.full(10 ** 5, 0.1 * 0.5)
        out = shot_read_noise(signal, 0.001, 0.01, np.random.default_rng(11))
        assert out.mean() == pytest.approx(0.05, abs=4 * np.sqrt(1.5e-4) / np.sqrt(10 ** 5))
        assert out.var() == pytest.approx(1.5e-4, rel=0.05)

    @pytest.mark.slow
    def test_moments_million_samples(self):
        signal = np.full(10 ** 6, 0.05)
        out = shot_read_noise(signal, 0.001, 0.01, np.random.default_rng(12))
        assert abs(out.mean() - 0.05) <= 4 * np.sqrt(1.5e-4) / 1e3
        assert abs(out.var() - 1.5e-4) <= 0.02 * 1.5e-4

    def test_negative_signal_has_only_read_variance(self):
        out = shot_read_noise(np.full(10 ** 5, -0.01), 0.01, 0.001, np.random.default_rng(5))
        assert out.var() == pytest.approx(1e-6, rel=0.05)


class TestQuantization:

    def test_half_width_rules(self):
        assert quantization_half_width(12, QuantMode.LITERAL) == pytest.approx(1 / 24)
        assert quantization_half_width(12, QuantMode.BITDEPTH) == 2.0 ** -13
        assert quantization_half_width(12, QuantMode.OFF) == 0.0

    def test_literal_bounds(self):
        noise = quantization_noise(np.zeros(10 ** 5), 12, np.random.default_rng(0))
        assert noise.min() >= -1 / 24 and noise.max() <= 1 / 24

    def test_high_bit_depth_vanishes(self):
        noise = quantization_noise(np.zeros(1000), 30, np.random.default_rng(0), QuantMode.BITDEPTH)
        assert np.max(np.abs(noise)) < 1e-9

    def test_off_returns_input(self):
        values = np.linspace(0, 1, 10)
        assert quantization_noise(values, 12, np.random.default_rng(0), QuantMode.OFF) is values

    def test_uniformity(self):
        noise = quantization_noise(np.zeros(10 ** 5), 14, np.random.default_rng(3))
        half = 1 / 28
        counts, _ = np.histogram(noise, bins=20, range=(-half, half))
        assert stats.chisquare(counts).pvalue > 0.01

    @pytest.mark.parametrize("bits", [0, 2.5, 8, 13, 24])
    def test_invalid_bits(self, bits):
        with pytest.raises(ParameterError):
            quantization_half_width(bits, QuantMode.LITERAL)

    def test_bitdepth_mode_takes_any_positive_bits(self):
        assert quantization_half_width(8, QuantMode.BITDEPTH) == 2.0 ** -9

    def test_noise_is_uncorrelated_between_neighbours(self):
        values = np.full(10 ** 5 + 1, 0.05)
        for noise in (quantization_noise(np.zeros(10 ** 5 + 1), 14, np.random.default_rng(6)),
                      shot_read_noise(values, 0.001, 0.01, np.random.default_rng(7)) - values):
            r = np.corrcoef(noise[:-1], noise[1:])[0, 1]
            assert abs(r) < 0.01


class TestParamRanges:

    def test_defaults(self):
        ranges = ParamRanges()
        assert ranges.k == TruncatedGaussian(0.1, 0.08, 0.01, 1.0)
        assert ranges.bits == (12, 14, 16)
        assert ranges.g_r == UniformRange(1.9, 2.4)
        assert ranges.read_noise.intercept == pytest.approx(0.12)

    def test_inverted_bounds_name_the_field(self):
        with pytest.raises(ConfigurationError) as info:
            ParamRanges.from_dict({"g_r": {"low": 2.4, "high": 1.9}})
        assert info.value.field_name == "ranges.g_r.high"

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError) as info:
            ParamRanges.from_dict({"k": {"mean": 0.1, "sigma": 0.2}})
        assert info.value.field_name == "ranges.k.sigma"

    def test_gamma_outside_supported_interval(self):
        with pytest.raises(ConfigurationError):
            ParamRanges.from_dict({"gamma": {"low": 1.5, "high": 3.0}})

    def test_dict_round_trip(self):
        ranges = ParamRanges.from_dict({"k": {"high": 0.5}, "bits": [12]})
        assert ParamRanges.from_dict(ranges.to_dict()) == ranges


class TestSampling:

    def test_draws_stay_in_range(self):
        table = sample_param_table(np.random.default_rng(0), ParamRanges(), 10 ** 5)
        assert table['k'].min() >= 0.01 and table['k'].max() <= 1.0
        assert table['g_r'].min() >= 1.9 and table['g_r'].max() <= 2.4
        assert table['g_b'].min() >= 1.5 and table['g_b'].max() <= 1.9
        assert table['gamma'].min() >= 2.0 and table['gamma'].max() <= 3.5
        assert table['delta_s'].min() >= 1e-4 and table['delta_s'].max() <= 1e-2
        assert table['delta_r'].min() > 0
        assert set(np.unique(table['bits'])) <= {12, 14, 16}

    def test_k_mean(self):
        dist = ParamRanges().k
        a, b = (dist.low - dist.mean) / dist.std, (dist.high - dist.mean) / dist.std
        expected = stats.truncnorm(a, b, loc=dist.mean, scale=dist.std).mean()
        mean = sample_param_table(np.random.default_rng(1), ParamRanges(), 10 ** 5)['k'].mean()
        assert mean == pytest.approx(expected, abs=0.002)
        assert 0.1 < mean < 0.125

    def test_k_matches_truncated_gaussian(self):
        dist = ParamRanges().k
        k = sample_param_table(np.random.default_rng(2), ParamRanges(), 20000)['k']
        a, b = (dist.low - dist.mean) / dist.std, (dist.high - dist.mean) / dist.std
        assert stats.kstest(k, stats.truncnorm(a, b, loc=dist.mean, scale=dist.std).cdf).pvalue > 0.01

    def test_bit_depth_frequencies(self):
        bits = sample_param_table(np.random.default_rng(3), ParamRanges(), 10 ** 5)['bits']
        for b in (12, 14, 16):
            assert np.mean(bits == b) == pytest.approx(1 / 3, abs=0.02)

    def test_overridden_upper_bound(self):
        ranges = ParamRanges.from_dict({"k": {"high": 0.5}})
        assert sample_param_table(np.random.default_rng(4), ranges, 10 ** 5)['k'].max() <= 0.5

    def test_same_stream_same_params(self, default_ccms):
        a = sample_params(SeededRng(9, 2), ParamRanges(), default_ccms)
        b = sample_params(SeededRng(9, 2), ParamRanges(), default_ccms)
        assert a == b
        assert ParamRanges().violations(a) == []

    def test_mixture_mode_records_weights(self, default_ccms):
        params = sample_params(SeededRng(9, 2), ParamRanges(), default_ccms, CcmMode.CONVEX_MIXTURE)
        assert params.ccm_selection.mode is CcmMode.CONVEX_MIXTURE
        assert sum(params.ccm_selection.weights) == pytest.approx(1.0)

    def test_params_dict_round_trip(self, default_ccms):
        params = sample_params(SeededRng(1, 0), ParamRanges(), default_ccms)
        assert DegradationParams.from_dict(params.to_dict()) == params
