"""MAD reports, serial-step formulas, BD-rate, profiling."""

import numpy as np
import pytest

from cccodec import analysis, codec
from cccodec.analysis import (RDCurve, ScheduleProfile, bd_rate,
                              bd_rate_dense_oracle, mad_match, profile_codec,
                              read_rd_csv, serial_ops)
from cccodec.context import (KIND_GROUPED, KIND_MASK3D, KIND_SPATIAL2D,
                             build_bundle, hyper_analysis_np)
from cccodec.training import generate_synthetic_latents, make_latent_spec


class TestMadMatch:
    def test_planted_copy_recovered(self):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((12, 8, 8))
        y[10] = y[3] + 0.01 * rng.standard_normal((8, 8))
        rep = mad_match(y)
        assert rep.matched[10 - 1] == 3

    def test_duplicate_channel_mad_zero(self):
        rng = np.random.default_rng(1)
        y = rng.standard_normal((5, 6, 6))
        y[4] = y[1]
        rep = mad_match(y)
        assert rep.matched[3] == 1
        assert rep.mad_matched[3] == 0.0

    def test_matched_index_precedes_channel(self):
        rng = np.random.default_rng(2)
        rep = mad_match(rng.standard_normal((20, 4, 4)))
        for c in range(1, 20):
            assert 0 <= rep.matched[c - 1] < c
            assert rep.mad_matched[c - 1] <= rep.mad_adjacent[c - 1]

    def test_duplicating_batch_leaves_report_unchanged(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal((2, 10, 6, 6))
        doubled = np.concatenate([y, y], axis=0)
        a, b = mad_match(y), mad_match(doubled)
        assert np.array_equal(a.matched, b.matched)
        assert np.allclose(a.mad_matched, b.mad_matched)

    def test_ties_break_to_smallest_index(self):
        y = np.zeros((4, 3, 3))
        y[3] = 1.0  # channels 0..2 all tie at MAD 1
        rep = mad_match(y)
        assert rep.matched[2] == 0

    def test_synthetic_family_high_recovery(self):
        spec = make_latent_spec(64, 16, 16, seed=7)
        y = generate_synthetic_latents(spec, 4, seed=8)
        rep = mad_match(y)
        planted = {t: s for t, s, _, _ in spec.match_map}
        hits = sum(1 for t, s in planted.items() if rep.matched[t - 1] == s)
        assert hits / len(planted) >= 0.95

    def test_needs_two_channels(self):
        with pytest.raises(ValueError):
            mad_match(np.zeros((1, 4, 4)))

    def test_csv_header(self, tmp_path):
        rng = np.random.default_rng(4)
        rep = mad_match(rng.standard_normal((3, 4, 4)))
        path = str(tmp_path / "mad.csv")
        rep.write_csv(path)
        assert open(path).readline().strip() == \
            "channel,matched,mad_matched,mad_adjacent"


class TestSerialOps:
    def test_published_counts(self):
        assert serial_ops(KIND_GROUPED, 64, 16, 16, 8) == 9 * 256
        assert serial_ops(KIND_SPATIAL2D, 64, 16, 16) == 256
        assert serial_ops(KIND_MASK3D, 192, 16, 16) == 49152

    def test_group_count_dependence(self):
        for G in (2, 4, 8, 12):
            assert serial_ops(KIND_GROUPED, 48, 8, 8, G) == (G + 1) * 64

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            serial_ops("other", 1, 1, 1)

    @pytest.mark.parametrize("kind,N,H,W,G", [
        (KIND_SPATIAL2D, 8, 4, 4, 1), (KIND_SPATIAL2D, 16, 6, 4, 1),
        (KIND_MASK3D, 8, 4, 4, 1), (KIND_MASK3D, 12, 4, 6, 1),
        (KIND_GROUPED, 8, 4, 4, 2), (KIND_GROUPED, 16, 4, 4, 4),
        (KIND_GROUPED, 16, 6, 6, 8), (KIND_GROUPED, 24, 4, 4, 4),
    ])
    def test_closed_form_matches_instrumented_decode(self, kind, N, H, W, G):
        bundle = build_bundle(kind, N, G=G, seed=1)
        spec = make_latent_spec(N, H, W, seed=1)
        y = generate_synthetic_latents(spec, 1, seed=2)[0]
        lat = codec.quantize(y)
        z = codec.quantize(hyper_analysis_np(bundle, y))
        blob = codec.encode_latents(bundle, lat, z)
        result = codec.decode_latents(blob, bundle)
        assert result.serial_steps == serial_ops(kind, N, H, W, G)


PTS = [(0.25, 30.0), (0.5, 33.0), (1.0, 36.0), (1.6, 38.0), (2.2, 39.5)]


class TestBdRate:
    def test_identical_curves_zero(self):
        assert bd_rate(RDCurve(PTS), RDCurve(list(PTS))) == pytest.approx(0.0,
                                                                          abs=1e-9)

    def test_uniform_scaling(self):
        test = RDCurve([(b * 0.9, q) for b, q in PTS])
        assert bd_rate(RDCurve(PTS), test) == pytest.approx(-10.0, abs=0.1)

    def test_dense_grid_oracle_agreement(self):
        rng = np.random.default_rng(5)
        qs = np.sort(rng.uniform(28, 42, 6))
        ref = RDCurve(sorted((float(2 ** (0.12 * q + rng.normal(0, 0.05))), float(q))
                             for q in qs))
        test = RDCurve([(b * rng.uniform(0.85, 0.95), q) for b, q in ref.points])
        got = bd_rate(ref, test)
        oracle = bd_rate_dense_oracle(ref, test)
        assert abs(got - oracle) < 0.2

    def test_antisymmetric_under_swap(self):
        test = RDCurve([(b * 0.9, q) for b, q in PTS])
        fwd = bd_rate(RDCurve(PTS), test)
        bwd = bd_rate(test, RDCurve(PTS))
        # -10% one way is +11.11% the other; log-domain averages negate
        assert (1 + fwd / 100) * (1 + bwd / 100) == pytest.approx(1.0, abs=2e-3)

    def test_needs_four_points(self):
        short = RDCurve(PTS[:3])
        with pytest.raises(ValueError):
            bd_rate(short, short)

    def test_no_overlap_rejected(self):
        hi = RDCurve([(b, q + 50) for b, q in PTS])
        with pytest.raises(ValueError):
            bd_rate(RDCurve(PTS), hi)

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            RDCurve([(1.0, 30.0), (0.5, 33.0)])  # bpp not increasing
        with pytest.raises(ValueError):
            RDCurve([(-1.0, 30.0), (0.5, 33.0)])

    def test_csv_round_trip(self, tmp_path):
        path = str(tmp_path / "rd.csv")
        RDCurve(PTS).write_csv(path)
        assert open(path).readline().strip() == "bpp,psnr"
        back = read_rd_csv(path)
        assert np.allclose(back.bpps(), RDCurve(PTS).bpps())


class TestProfile:
    def test_steps_match_formula_and_csv_shape(self):
        bundle = build_bundle(KIND_GROUPED, 8, G=4, seed=6)
        spec = make_latent_spec(8, 4, 4, seed=6)
        y = generate_synthetic_latents(spec, 1, seed=7)[0]
        lat = codec.quantize(y)
        z = codec.quantize(hyper_analysis_np(bundle, y))
        prof = profile_codec(bundle, lat, z, repetitions=2)
        assert prof.steps == serial_ops(KIND_GROUPED, 8, 4, 4, 4)
        assert prof.enc_ms > 0 and prof.dec_ms > 0
        assert not prof.single_sample
        row = prof.csv_row()
        assert len(row) == len(ScheduleProfile.CSV_HEADER)

    def test_single_repetition_flagged(self):
        bundle = build_bundle(KIND_SPATIAL2D, 8, seed=8)
        spec = make_latent_spec(8, 4, 4, seed=8)
        y = generate_synthetic_latents(spec, 1, seed=9)[0]
        lat = codec.quantize(y)
        z = codec.quantize(hyper_analysis_np(bundle, y))
        prof = profile_codec(bundle, lat, z, repetitions=1)
        assert prof.single_sample

    def test_grouped_decode_slower_than_spatial2d(self):
        spec = make_latent_spec(16, 8, 8, seed=10)
        y = generate_synthetic_latents(spec, 1, seed=11)[0]
        times = {}
        for kind in (KIND_SPATIAL2D, KIND_GROUPED):
            bundle = build_bundle(kind, 16, G=8, seed=10)
            lat = codec.quantize(y)
            z = codec.quantize(hyper_analysis_np(bundle, y))
            times[kind] = profile_codec(bundle, lat, z, repetitions=3).dec_ms
        assert times[KIND_GROUPED] > times[KIND_SPATIAL2D]
