import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmfc.entropy import (
    MAX_SUPPORT_BINS,
    PMF_FLOOR,
    PROB_TOTAL,
    CdfTable,
    DecodeError,
    EntropyModel,
    bin_pmf,
    build_cdf_table,
    estimate_rate_bits,
    quantize,
    rc_decode,
    rc_encode,
)


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def table(kmin, cdf):
    return CdfTable(kmin=np.array([kmin]), nbins=np.array([len(cdf) - 1]), offsets=np.array([0]),
                    cdf=np.array(cdf, dtype=np.int64))


def random_model(rng, channels):
    return EntropyModel("m", channels, loc=rng.normal(scale=3, size=channels), scale=rng.uniform(0.05, 8, size=channels))


class TestQuantize:
    def test_round_ties_to_even(self):
        np.testing.assert_array_equal(quantize(np.array([0.4, -1.5, 2.5, 0.5, -0.6])), [0, -2, 2, 0, -1])

    def test_integers_unchanged(self):
        x = np.arange(-5, 6, dtype=float)
        np.testing.assert_array_equal(quantize(x), x)

    def test_noise_mean_abs(self, rng):
        x = rng.normal(size=10**6)
        assert np.abs(quantize(x, "noise", rng) - x).mean() == pytest.approx(0.25, abs=0.01)

    def test_noise_needs_rng(self):
        with pytest.raises(ValueError):
            quantize(np.zeros(3), "noise")


class TestBinPmf:
    def test_standard_logistic_centre(self):
        m = EntropyModel("m", 1, loc=0.0, scale=1.0)
        expected = sigmoid(0.5) - sigmoid(-0.5)
        # floored far bins take a little mass from the centre after renormalising
        assert bin_pmf(m, 0, 0) == pytest.approx(expected, abs=1e-4)
        assert bin_pmf(m, 0, 0) == pytest.approx(0.2449, abs=1e-4)

    @pytest.mark.parametrize("k", [1, 2, 5, 17])
    def test_symmetric(self, k):
        m = EntropyModel("m", 1, loc=0.0, scale=2.3)
        assert bin_pmf(m, 0, k) == pytest.approx(bin_pmf(m, 0, -k), rel=1e-12)

    def test_wide_scale_nearly_uniform(self):
        m = EntropyModel("m", 1, loc=0.0, scale=1e4)
        p = np.array([bin_pmf(m, 0, k) for k in range(-20, 21)])
        assert p.max() / p.min() < 1.001

    def test_floor(self):
        m = EntropyModel("m", 1, loc=0.0, scale=0.1)
        assert bin_pmf(m, 0, 1) >= PMF_FLOOR * 0.99

    def test_sums_to_one_with_tails(self):
        m = EntropyModel("m", 1, loc=0.3, scale=0.7)
        t = build_cdf_table(m)
        lo, hi = t.support(0)
        total = sum(bin_pmf(m, 0, k) for k in range(lo, hi + 1)) + bin_pmf(m, 0, lo - 1) + bin_pmf(m, 0, hi + 1)
        assert total == pytest.approx(1.0, abs=1e-12)


class TestRateEstimate:
    def test_half_probability_is_one_bit(self):
        m = EntropyModel("m", 1, loc=0.5, scale=1e-3)
        assert estimate_rate_bits(np.array([[0.0]]), m) == pytest.approx(1.0, abs=1e-3)

    def test_concentrated_model_near_zero(self):
        m = EntropyModel("m", 4, loc=0.0, scale=1e-4)
        assert estimate_rate_bits(np.zeros((100, 4)), m) / 400 < 1e-3

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            estimate_rate_bits(np.zeros((3, 5)), EntropyModel("m", 4))

    def test_tuple_model_equivalent(self, rng):
        m = random_model(rng, 6)
        y = rng.normal(scale=3, size=(50, 6))
        assert estimate_rate_bits(y, m) == estimate_rate_bits(y, m.logistic())

    def test_matches_payload(self, rng):
        m = random_model(rng, 16)
        y = np.rint(rng.logistic(m.loc.tensor, m.scale, size=(512, 16)))
        est = estimate_rate_bits(y, m)
        bits = 8 * len(rc_encode(y, build_cdf_table(m)))
        assert abs(est - bits) <= 0.02 * est + 64

    def test_noise_mode_differs_from_round(self, rng):
        m = random_model(rng, 4)
        y = rng.normal(size=(100, 4))
        assert estimate_rate_bits(y, m, "noise") != estimate_rate_bits(y, m, "round")


class TestCdfTable:
    def test_terminal_value_and_strict_monotonicity(self, rng):
        t = build_cdf_table(random_model(rng, 32))
        for c in range(t.channels):
            cdf = t.channel_cdf(c)
            assert cdf[0] == 0 and cdf[-1] == PROB_TOTAL == 2**16
            assert np.all(np.diff(cdf) > 0)

    def test_central_bin_largest(self):
        t = build_cdf_table(EntropyModel("m", 1, loc=0.0, scale=1.0))
        freq = t.frequencies(0)
        lo, _ = t.support(0)
        assert int(np.argmax(freq)) - 1 + lo == 0

    def test_support_bounds(self):
        t = build_cdf_table(EntropyModel("m", 1, loc=0.0, scale=1.0))
        assert t.support(0) == (-16, 16)

    def test_support_capped(self):
        t = build_cdf_table(EntropyModel("m", 1, loc=0.0, scale=1000.0))
        assert t.nbins[0] - 2 <= MAX_SUPPORT_BINS

    def test_deterministic(self, rng):
        m = random_model(rng, 8)
        a, b = build_cdf_table(m), build_cdf_table(m.logistic())
        np.testing.assert_array_equal(a.cdf, b.cdf)
        np.testing.assert_array_equal(a.kmin, b.kmin)

    def test_built_from_quantized_parameters(self):
        # parameters differing below 1/512 share a table
        a = build_cdf_table((np.array([0.1]), np.array([1.0])))
        b = build_cdf_table((np.array([0.1 + 1e-4]), np.array([1.0 - 1e-4])))
        np.testing.assert_array_equal(a.cdf, b.cdf)


class TestRangeCoder:
    def test_empty(self, rng):
        t = build_cdf_table(random_model(rng, 3))
        assert rc_encode([], t) == b""
        assert rc_decode(b"garbage", t, 0).size == 0

    def test_two_symbol_uniform_size(self, rng):
        t = table(0, [0, 1, 32768, 65535, 65536])
        n = 10_000
        s = rng.integers(0, 2, n)
        payload = rc_encode(s, t)
        assert len(payload) <= n / 8 + 8
        np.testing.assert_array_equal(rc_decode(payload, t, n), s)

    def test_certain_symbol_tiny(self):
        t = table(0, [0, 1, 65535, 65536])
        payload = rc_encode([0], t)
        assert len(payload) <= 2
        assert rc_decode(payload, t, 1).tolist() == [0]

    def test_tail_literals(self, rng):
        m = EntropyModel("m", 2, loc=0.0, scale=0.5)
        s = np.array([0, 1, 10**6, -(2**31), 2**31 - 1, -40, 3, 0])
        np.testing.assert_array_equal(rc_decode(rc_encode(s, build_cdf_table(m)), build_cdf_table(m), s.size), s)

    def test_out_of_range_literal(self):
        with pytest.raises(ValueError):
            rc_encode([2**31], build_cdf_table(EntropyModel("m", 1)))

    def test_explicit_channels(self, rng):
        t = build_cdf_table(random_model(rng, 5))
        ch = rng.integers(0, 5, 300)
        s = rng.integers(-20, 20, 300)
        np.testing.assert_array_equal(rc_decode(rc_encode(s, t, ch), t, 300, ch), s)

    def test_truncated_payload(self, rng):
        m = random_model(rng, 8)
        t = build_cdf_table(m)
        s = np.rint(rng.logistic(m.loc.tensor, m.scale, size=(200, 8)))
        payload = rc_encode(s, t)
        with pytest.raises(DecodeError) as err:
            rc_decode(payload[: len(payload) // 2], t, s.size)
        assert err.value.offset is not None

    def test_strict_rejects_trailing_bytes(self, rng):
        t = build_cdf_table(random_model(rng, 4))
        s = rng.integers(-3, 3, 400)
        payload = rc_encode(s, t)
        with pytest.raises(DecodeError):
            rc_decode(payload + b"\x00\x01", t, s.size, strict=True)

    def test_deterministic(self, rng):
        t = build_cdf_table(random_model(rng, 4))
        s = rng.integers(-10, 10, 1000)
        assert rc_encode(s, t) == rc_encode(s.copy(), t)


@given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(0, 3000))
def test_roundtrip_property(seed, channels, n):
    r = np.random.default_rng(seed)
    m = random_model(r, channels)
    t = build_cdf_table(m)
    s = np.rint(r.logistic(np.resize(m.loc.tensor, n), np.resize(m.scale, n) * r.uniform(0.5, 3)))
    np.testing.assert_array_equal(rc_decode(rc_encode(s, t), t, n, strict=True), s)


@given(st.floats(-50, 50), st.floats(0.01, 200))
def test_table_invariants_property(loc, scale):
    t = build_cdf_table((np.array([loc]), np.array([scale])))
    cdf = t.channel_cdf(0)
    assert cdf[-1] == 2**16 and np.all(np.diff(cdf) >= 1)
