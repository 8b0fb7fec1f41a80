import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmfc.bitstream import Bitstream, BitstreamError
from mmfc.codec_anf import (
    AnfCodec,
    CodecMismatchError,
    anf_forward,
    anf_inverse,
    compress,
    decompress,
    load_codec,
)
from mmfc.entropy import estimate_rate_bits
from mmfc.featuremap import FeatureMap


def zero_nets(codec):
    for step in codec.steps:
        for p in step.params:
            p.tensor[...] = 0


class TestFlow:
    def test_zero_nets_are_identity(self, rng):
        codec = AnfCodec(4, 16, seed=1)
        zero_nets(codec)
        x = rng.normal(size=(4, 16)).astype(np.float32)
        z, r = anf_forward(codec, x)
        np.testing.assert_array_equal(z, 0)
        np.testing.assert_array_equal(r, x)

    def test_latent_width_default(self):
        assert AnfCodec(8, 32).latent_dim == 8
        assert AnfCodec(8, 2).latent_dim == 1

    def test_shape_mismatch(self, rng):
        codec = AnfCodec(4, 16)
        with pytest.raises(ValueError):
            anf_forward(codec, rng.normal(size=(4, 12)))
        with pytest.raises(ValueError):
            anf_inverse(codec, np.zeros((4, 3)), np.zeros((4, 16)))

    def test_trained_codec_invertible(self, small_codecs):
        codec = small_codecs["anf"]
        x = small_codecs["test"][1][0]
        z, r = anf_forward(codec, x)
        assert np.abs(anf_inverse(codec, z, r) - x).max() <= 1e-5

    def test_identity_quantizer_hook(self, small_codecs, rng):
        codec = small_codecs["anf"]
        x = small_codecs["test"][1][1]
        z, _ = anf_forward(codec, x)
        expect = anf_inverse(codec, z, np.zeros_like(x))
        np.testing.assert_allclose(codec.roundtrip(x, quantizer=lambda v: v), expect, atol=1e-6)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(2, 40), st.floats(0.1, 5.0))
def test_invertible_float32(seed, q, d, spread):
    r = np.random.default_rng(seed)
    codec = AnfCodec(q, d, seed=seed, dtype=np.float32)
    x = (spread * r.normal(size=(q, d))).astype(np.float32)
    z, res = codec.forward(x)
    assert np.abs(codec.inverse(z, res) - x).max() <= 1e-5 * max(1.0, spread)


@given(st.integers(0, 2**31), st.integers(2, 40))
def test_invertible_float64(seed, d):
    r = np.random.default_rng(seed)
    codec = AnfCodec(3, d, seed=seed, dtype=np.float64)
    x = r.normal(size=(3, d))
    z, res = codec.forward(x)
    assert np.abs(codec.inverse(z, res) - x).max() <= 1e-10


class TestCompression:
    def test_deterministic(self, small_codecs):
        codec = small_codecs["anf"]
        x = small_codecs["test"][1][2]
        assert compress(codec, x).to_bytes() == compress(codec, x.copy()).to_bytes()

    def test_payload_close_to_estimate(self, small_codecs):
        codec = small_codecs["anf"]
        for x in small_codecs["test"][1][:10]:
            est = estimate_rate_bits(codec.latent_symbols(x), codec.entropy, "round")
            bits = 8 * len(compress(codec, x).payload)
            assert abs(est - bits) <= 0.02 * est + 64

    def test_zero_input_among_smallest(self, small_codecs):
        codec = small_codecs["anf"]
        test = small_codecs["test"][1]
        sizes = [len(compress(codec, x).payload) for x in test]
        assert len(compress(codec, np.zeros_like(test[0])).payload) <= min(sizes)

    def test_decode_matches_roundtrip_and_is_deterministic(self, small_codecs):
        codec = small_codecs["anf"]
        x = small_codecs["test"][1][3]
        bs = Bitstream.from_bytes(compress(codec, x).to_bytes())
        a, b = decompress(codec, bs), decompress(codec, bs)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_allclose(a.values, codec.roundtrip(x), atol=1e-6)
        assert np.isfinite(np.mean((a.values - x) ** 2))

    def test_header_fields(self, small_codecs):
        codec = small_codecs["anf"]
        bs = compress(codec, FeatureMap(small_codecs["test"][1][0], "lidar"), approach=1, lambda_index=3)
        assert (bs.approach, bs.role, bs.lambda_index, bs.q, bs.d) == (1, 2, 3, 64, 32)
        assert bs.model_hash == codec.entropy.digest()

    def test_mse_falls_during_training(self, small_codecs):
        mse = np.array([r.mse for r in small_codecs["anf_log"].records])
        half = len(mse) // 2
        assert mse[half:].mean() < mse[:half].mean()
        assert mse[-1] < mse[0]

    def test_wrong_model_refused(self, small_codecs):
        bs = compress(small_codecs["anf"], small_codecs["test"][1][0])
        with pytest.raises(CodecMismatchError):
            decompress(small_codecs["predictor"], bs)

    def test_wrong_shape_refused(self, small_codecs):
        bs = compress(small_codecs["anf"], small_codecs["test"][1][0])
        with pytest.raises(CodecMismatchError):
            decompress(AnfCodec(8, 32), bs)

    def test_truncated_payload(self, small_codecs):
        codec = small_codecs["anf"]
        bs = compress(codec, small_codecs["test"][1][0])
        cut = Bitstream(bs.approach, bs.role, bs.lambda_index, bs.q, bs.d, bs.model_hash, bs.payload[:-20])
        with pytest.raises(BitstreamError) as err:
            decompress(codec, cut)
        assert err.value.offset is not None

    def test_input_shape_checked(self, small_codecs):
        with pytest.raises(ValueError):
            compress(small_codecs["anf"], np.zeros((10, 32), np.float32))

    def test_checkpoint_roundtrip(self, small_codecs, tmp_path):
        codec = small_codecs["anf"]
        codec.save(tmp_path / "c.bin")
        again = load_codec(tmp_path / "c.bin")
        x = small_codecs["test"][1][4]
        assert compress(again, x).to_bytes() == compress(codec, x).to_bytes()
        assert again.meta["lambda_index"] == 3


def test_trained_residual_small(full_run):
    """Fully trained fused codecs drive the discarded x-branch towards zero."""
    exp = full_run["exp"]
    x = exp.fused("test").reshape(-1, exp.cfg.data.d)
    ratios = []
    for i in range(len(exp.lambda_grid)):
        _, r = exp.load(f"anf_fused_l{i}").forward(x)
        ratios.append(float((r.astype(np.float64) ** 2).sum() / (x.astype(np.float64) ** 2).sum()))
    assert max(ratios) < 0.05, ratios
