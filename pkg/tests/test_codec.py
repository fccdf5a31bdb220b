"""Bitstream round trips, trace consistency, rate accounting, framing."""

import numpy as np
import pytest

from cccodec import codec
from cccodec.codec import (HEADER_BYTES, StreamHeader, decode_latents,
                           encode_latents, hyper_quantized_bits, quantize)
from cccodec.container import save_checkpoint
from cccodec.context import (KIND_GROUPED, KIND_MASK3D, KIND_SPATIAL2D,
                             build_bundle, hyper_analysis_np)
from cccodec.training import generate_synthetic_latents, make_latent_spec

KINDS3 = (KIND_SPATIAL2D, KIND_MASK3D, KIND_GROUPED)


def make_case(kind, N=16, H=8, W=8, G=4, seed=0):
    bundle = build_bundle(kind, N, G=G, seed=seed)
    spec = make_latent_spec(N, H, W, seed=seed)
    y = generate_synthetic_latents(spec, 1, seed=seed + 100)[0]
    lat = quantize(y)
    z = quantize(hyper_analysis_np(bundle, y))
    return bundle, lat, z


class TestQuantize:
    def test_round_ties_away_from_zero(self):
        got = quantize(np.array([0.5, -0.5, 1.5, -1.5, 2.4, -2.6]))
        assert list(got) == [1, -1, 2, -2, 2, -3]

    def test_noise_mode_needs_rng(self):
        with pytest.raises(ValueError):
            quantize(np.zeros(3), "noise")

    def test_noise_bounded(self):
        rng = np.random.default_rng(0)
        y = np.zeros(1000)
        noisy = quantize(y, "noise", rng)
        assert np.all(np.abs(noisy) <= 0.5)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            quantize(np.array([np.inf]))


@pytest.mark.parametrize("kind", KINDS3)
def test_round_trip_exact(kind):
    bundle, lat, z = make_case(kind)
    blob = encode_latents(bundle, lat, z)
    result = decode_latents(blob, bundle)
    assert np.array_equal(result.latents, lat)
    assert np.array_equal(result.hyper, z)


@pytest.mark.parametrize("kind", KINDS3)
def test_decoder_trace_equals_encoder_trace(kind):
    bundle, lat, z = make_case(kind, seed=1)
    blob, enc_trace = encode_latents(bundle, lat, z, return_trace=True)
    result = decode_latents(blob, bundle, collect_trace=True)
    assert enc_trace.residual == result.trace.residual
    assert enc_trace.sigma_index == result.trace.sigma_index
    assert enc_trace.mu == result.trace.mu
    assert enc_trace.sigma == result.trace.sigma


@pytest.mark.parametrize("kind", KINDS3)
def test_audit_mode_round_trip(kind):
    bundle, lat, z = make_case(kind, seed=2)
    blob = encode_latents(bundle, lat, z)
    result = decode_latents(blob, bundle, audit=True)
    assert np.array_equal(result.latents, lat)


def test_escape_path_round_trip():
    # huge outliers exceed any reasonable alphabet and force escapes
    bundle, lat, z = make_case(KIND_GROUPED, seed=3)
    lat = lat.copy()
    lat[0, 0, 0] = 30000
    lat[5, 3, 3] = -30000
    blob = encode_latents(bundle, lat, z)
    result = decode_latents(blob, bundle)
    assert np.array_equal(result.latents, lat)


def test_all_zero_latents():
    bundle, lat, z = make_case(KIND_SPATIAL2D, seed=4)
    lat = np.zeros_like(lat)
    z = np.zeros_like(z)
    blob = encode_latents(bundle, lat, z)
    result = decode_latents(blob, bundle)
    assert np.array_equal(result.latents, lat)
    assert np.array_equal(result.hyper, z)


def test_deterministic_bitstream():
    bundle, lat, z = make_case(KIND_GROUPED, seed=5)
    assert encode_latents(bundle, lat, z) == encode_latents(bundle, lat, z)


class TestRateAccounting:
    @pytest.mark.parametrize("kind", KINDS3)
    def test_actual_bits_within_bound(self, kind):
        bundle, lat, z = make_case(kind, seed=6)
        blob, trace = encode_latents(bundle, lat, z, return_trace=True)
        header = StreamHeader.unpack(blob)
        payload_bits = (len(blob) - HEADER_BYTES) * 8
        est = trace.quantized_cdf_bits(bundle, header.L_latent)
        est += hyper_quantized_bits(bundle, z, header.L_hyper)
        segments = codec.segment_count(bundle)
        assert est <= payload_bits <= est + 32 + 8 * segments

    def test_estimate_uses_quantized_cdfs(self):
        # quantized-CDF estimate differs from the float model estimate,
        # so the bound test above is not vacuous
        bundle, lat, z = make_case(KIND_SPATIAL2D, seed=7)
        blob, trace = encode_latents(bundle, lat, z, return_trace=True)
        header = StreamHeader.unpack(blob)
        q = trace.quantized_cdf_bits(bundle, header.L_latent)
        assert q > 0


class TestFraming:
    def test_truncation_detected(self):
        bundle, lat, z = make_case(KIND_GROUPED, seed=8)
        blob = encode_latents(bundle, lat, z)
        for cut in (len(blob) - 1, len(blob) - 10, HEADER_BYTES + 3):
            with pytest.raises(codec.CodecError):
                decode_latents(blob[:cut], bundle)

    def test_header_corruption_detected(self):
        bundle, lat, z = make_case(KIND_GROUPED, seed=9)
        blob = bytearray(encode_latents(bundle, lat, z))
        blob[6] ^= 0xFF
        with pytest.raises(codec.CodecError):
            decode_latents(bytes(blob), bundle)

    def test_payload_corruption_detected(self):
        bundle, lat, z = make_case(KIND_GROUPED, seed=10)
        blob = bytearray(encode_latents(bundle, lat, z))
        blob[-3] ^= 0x55
        with pytest.raises(codec.CodecError):
            decode_latents(bytes(blob), bundle)

    def test_wrong_magic_rejected(self):
        bundle, _, _ = make_case(KIND_GROUPED, seed=11)
        with pytest.raises(codec.CodecError):
            decode_latents(b"JUNK" + bytes(100), bundle)

    def test_kind_mismatch_rejected(self):
        bundle, lat, z = make_case(KIND_GROUPED, seed=12)
        blob = encode_latents(bundle, lat, z)
        other = build_bundle(KIND_SPATIAL2D, 16, seed=12)
        with pytest.raises(codec.CodecError):
            decode_latents(blob, other)

    def test_fingerprint_mismatch_rejected(self, tmp_path):
        bundle, lat, z = make_case(KIND_GROUPED, seed=13)
        save_checkpoint(bundle, str(tmp_path / "a.cccw"))
        blob = encode_latents(bundle, lat, z)
        other = build_bundle(KIND_GROUPED, 16, G=4, seed=99)
        save_checkpoint(other, str(tmp_path / "b.cccw"))
        with pytest.raises(codec.CodecError):
            decode_latents(blob, other)

    def test_unsaved_bundle_skips_fingerprint_check(self):
        bundle, lat, z = make_case(KIND_GROUPED, seed=14)
        blob = encode_latents(bundle, lat, z)
        fresh = build_bundle(KIND_GROUPED, 16, G=4, seed=14)
        result = decode_latents(blob, fresh)
        assert np.array_equal(result.latents, lat)

    def test_header_pack_unpack_round_trip(self):
        h = StreamHeader(kind=KIND_GROUPED, N=64, H=16, W=16, G=8,
                         hyper_shape=(8, 8, 8), sigma_min=0.11,
                         sigma_max=256.0, table_size=64, precision=16,
                         L_latent=31, L_hyper=7, fingerprint=12345,
                         lam=0.0130)
        assert StreamHeader.unpack(h.pack()) == h


class TestSerialSteps:
    def test_step_counts(self):
        for kind, want in ((KIND_SPATIAL2D, 64), (KIND_MASK3D, 16 * 64),
                           (KIND_GROUPED, 5 * 64)):
            bundle, lat, z = make_case(kind, seed=15)
            blob = encode_latents(bundle, lat, z)
            result = decode_latents(blob, bundle)
            assert result.serial_steps == want


def test_empty_hyper_channels():
    # a bundle always has >= 2 hyper channels, but the hyper coder itself
    # must handle zero channels for robustness of the framing layer
    from cccodec.codec import decode_hyper, encode_hyper
    from cccodec.entropy import FactorizedPrior
    from cccodec.rangecoder import RangeDecoder
    prior = FactorizedPrior(np.zeros(1), np.ones(1))
    payload = encode_hyper(np.zeros((0, 4, 4), dtype=np.int32), prior, 1)
    out = decode_hyper(RangeDecoder(payload), (0, 4, 4), prior, 1)
    assert out.shape == (0, 4, 4)


def test_hyper_round_trip_standalone():
    from cccodec.codec import decode_hyper, encode_hyper
    from cccodec.entropy import FactorizedPrior
    from cccodec.rangecoder import RangeDecoder
    rng = np.random.default_rng(16)
    prior = FactorizedPrior(np.array([0.0, 1.0]), np.array([1.0, 2.0]))
    z = rng.integers(-9, 10, (2, 6, 6)).astype(np.int32)
    L = int(np.abs(z).max())
    payload = encode_hyper(z, prior, L)
    out = decode_hyper(RangeDecoder(payload), z.shape, prior, L)
    assert np.array_equal(out, z)
