"""Group partitioning, published width schedule, causality, estimators."""

import numpy as np
import pytest

from cccodec import nn
from cccodec.context import (KIND_GROUPED, KIND_MASK3D, KIND_SPATIAL2D,
                             ContextModelBundle, CoderPlan, GroupPartition,
                             build_bundle, causality_probe,
                             estimate_segment_params, estimate_fields,
                             hyper_synthesis_np, legal_dependency_region,
                             match_spatial2d_widths, partition_channels,
                             segment_widths)


class TestGroupPartition:
    def test_segments_n192_g8(self):
        p = partition_channels(192, 8)
        assert p.segments == [(0, 1), (1, 24), (24, 48), (48, 72), (72, 96),
                              (96, 120), (120, 144), (144, 168), (168, 192)]
        assert len(p) == 9

    def test_segments_n192_g12(self):
        p = partition_channels(192, 12)
        assert p.segments[0] == (0, 1)
        assert p.segments[1] == (1, 16)
        assert p.segments[-1] == (176, 192)
        assert len(p) == 13

    def test_covers_channels_disjointly(self):
        p = partition_channels(64, 8)
        seen = []
        for a, b in p.segments:
            seen.extend(range(a, b))
        assert seen == list(range(64))

    def test_segment_of_channel(self):
        p = partition_channels(64, 8)
        assert p.segment_of_channel(0) == 0
        assert p.segment_of_channel(1) == 1
        assert p.segment_of_channel(7) == 1
        assert p.segment_of_channel(8) == 2
        assert p.segment_of_channel(63) == 8

    def test_rejects_indivisible(self):
        with pytest.raises(ValueError):
            partition_channels(190, 8)

    def test_rejects_degenerate_groups(self):
        with pytest.raises(ValueError):
            partition_channels(8, 8)  # group size 1 cannot split group 1


def expected_width_table(N):
    """The published width schedule for G=8, all nine coding segments."""
    cols = []
    cols.append({"Ic": 0, "Is": 1, "c": 0, "m": 2, "Id": 2 * N,
                 "e1": N + 1, "e2": (N + 1) // 2, "e3": 2})
    cols.append({"Ic": 1, "Is": N // 8, "c": N // 4 - 2, "m": N // 4 - 2,
                 "Id": 2 * N, "e1": 5 * N // 4 - 2, "e2": 5 * N // 8 - 1,
                 "e3": N // 4 - 2})
    for g in range(1, 8):
        cols.append({"Ic": g * N // 8, "Is": (g + 1) * N // 8, "c": N // 4,
                     "m": N // 4, "Id": 2 * N, "e1": 5 * N // 4,
                     "e2": 5 * N // 8, "e3": N // 4})
    return cols


@pytest.mark.parametrize("N", [128, 192])
def test_width_schedule_matches_published_table(N):
    part = partition_channels(N, 8)
    want = expected_width_table(N)
    for (a, b), exp in zip(part.segments, want):
        got = segment_widths(N, a, b)
        for key, val in exp.items():
            assert got[key] == val, f"N={N} segment [{a},{b}) column {key}"


def test_built_bundle_parameter_shapes_follow_schedule():
    N = 128
    bundle = build_bundle(KIND_GROUPED, N, G=8, seed=0)
    for k, (a, b) in enumerate(bundle.partition.segments):
        w = segment_widths(N, a, b)
        p = bundle.params
        assert p[f"seg{k}.cs.w"].shape == (w["m"], w["Is"], 5, 5)
        if w["has_cc"]:
            assert p[f"seg{k}.cc.proj.w"].shape == (w["c"], w["Ic"], 3, 3)
        ep_in = w["Id"] + w["m"] + w["c"]
        assert p[f"seg{k}.ep1.w"].shape == (w["e1"], ep_in, 1, 1)
        assert p[f"seg{k}.ep2.w"].shape == (w["e2"], w["e1"], 1, 1)
        assert p[f"seg{k}.ep3.w"].shape == (w["e3"], w["e2"], 1, 1)


class TestBuilders:
    def test_same_seed_identical(self):
        a = build_bundle(KIND_GROUPED, 32, G=4, seed=9)
        b = build_bundle(KIND_GROUPED, 32, G=4, seed=9)
        for k in a.params:
            assert np.array_equal(a.params[k].data, b.params[k].data)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            build_bundle("transformer", 32)

    def test_parameter_count_excludes_hyper(self):
        b = build_bundle(KIND_SPATIAL2D, 16)
        total = sum(p.data.size for p in b.params.values())
        hyper = sum(p.data.size for k, p in b.params.items()
                    if k.startswith(("hyper.", "prior.")))
        assert b.context_parameter_count() == total - hyper

    def test_width_matching_within_tolerance(self):
        target = build_bundle(KIND_GROUPED, 64, G=8).context_parameter_count()
        widths = match_spatial2d_widths(64, target)
        got = build_bundle(KIND_SPATIAL2D, 64,
                           spatial2d_widths=widths).context_parameter_count()
        assert abs(got - target) / target < 0.10


def make_inputs(bundle, H=6, W=6, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((bundle.N, H, W)) * 2.0
    z = np.round(rng.standard_normal((bundle.config.hyper_channels,
                                      H // 2, W // 2)) * 2.0)
    psi = hyper_synthesis_np(bundle, z)
    return y, psi


class TestEstimators:
    def test_sigma_within_bounds(self):
        for kind in (KIND_GROUPED, KIND_SPATIAL2D, KIND_MASK3D):
            bundle = build_bundle(kind, 16, G=4, seed=1)
            y, psi = make_inputs(bundle)
            _, sg = estimate_fields(bundle, nn.tensor(y), nn.tensor(psi))
            assert np.all(sg.data >= bundle.config.sigma_min)
            assert np.all(sg.data <= bundle.config.sigma_max)
            assert sg.data.shape == y.shape

    def test_segment_fields_agree_with_full(self):
        bundle = build_bundle(KIND_GROUPED, 16, G=4, seed=2)
        y, psi = make_inputs(bundle)
        mu, sg = estimate_fields(bundle, nn.tensor(y), nn.tensor(psi))
        for k, (a, b) in enumerate(bundle.partition.segments):
            mk, sk = estimate_segment_params(bundle, k, nn.tensor(y),
                                             nn.tensor(psi))
            assert np.array_equal(mk.data, mu.data[a:b])
            assert np.array_equal(sk.data, sg.data[a:b])

    def test_segment_isolation(self):
        # changing channels of later segments must not change segment k
        bundle = build_bundle(KIND_GROUPED, 16, G=4, seed=3)
        y, psi = make_inputs(bundle)
        mu, _ = estimate_segment_params(bundle, 2, nn.tensor(y), nn.tensor(psi))
        y2 = y.copy()
        y2[8:] += 100.0  # segments 3 and 4
        mu2, _ = estimate_segment_params(bundle, 2, nn.tensor(y2), nn.tensor(psi))
        assert np.array_equal(mu.data, mu2.data)

    def test_coder_plan_matches_field_estimator(self):
        # the serial per-position path and the vectorized path are separate
        # implementations of the same network; they must agree closely
        for kind in (KIND_GROUPED, KIND_SPATIAL2D, KIND_MASK3D):
            bundle = build_bundle(kind, 8, G=4, seed=4)
            y, psi = make_inputs(bundle)
            mu, sg = estimate_fields(bundle, nn.tensor(y), nn.tensor(psi))
            plan = CoderPlan(bundle)
            xpad = np.pad(y, ((0, 0), (2, 2), (2, 2)))
            if kind == KIND_GROUPED:
                for k, seg in enumerate(plan.segments):
                    cc = plan.cc_features(k, y)
                    a = seg["start"]
                    m, s = plan.grouped_params_at(k, xpad, psi, cc, 3, 2)
                    assert np.allclose(m, mu.data[a:seg["stop"], 3, 2], atol=1e-10)
                    assert np.allclose(s, sg.data[a:seg["stop"], 3, 2], atol=1e-10)
            elif kind == KIND_SPATIAL2D:
                m, s = plan.spatial2d_params_at(xpad, psi, 2, 5)
                assert np.allclose(m, mu.data[:, 2, 5], atol=1e-10)
                assert np.allclose(s, sg.data[:, 2, 5], atol=1e-10)
            else:
                for c in (0, 3, 7):
                    m, s = plan.mask3d_params_at(c, xpad, psi, 1, 4)
                    assert np.allclose(m, mu.data[c:c + 1, 1, 4], atol=1e-10)
                    assert np.allclose(s, sg.data[c:c + 1, 1, 4], atol=1e-10)


class TestCausality:
    @pytest.mark.parametrize("kind", [KIND_GROUPED, KIND_SPATIAL2D, KIND_MASK3D])
    def test_probe_within_legal_region(self, kind):
        bundle = build_bundle(kind, 8, G=4, seed=5)
        y, psi = make_inputs(bundle, H=4, W=4, seed=5)
        for position in [(0, 1, 2), (3, 2, 1), (7, 0, 0)]:
            deps = causality_probe(bundle, y, psi, position)
            legal = legal_dependency_region(bundle, position, y.shape)
            illegal = deps - legal
            assert not illegal, f"{kind} at {position}: {sorted(illegal)[:5]}"

    def test_grouped_uses_colocated_and_later_positions_of_prior_groups(self):
        # the defining property: context from previously coded groups is a
        # full (unmasked) neighbourhood, including the co-located element
        bundle = build_bundle(KIND_GROUPED, 8, G=4, seed=6)
        y, psi = make_inputs(bundle, H=4, W=4, seed=6)
        deps = causality_probe(bundle, y, psi, (4, 1, 1))
        assert (0, 1, 1) in deps          # co-located, earlier segment
        assert (1, 2, 2) in deps          # raster-later, earlier segment

    def test_spatial2d_never_sees_colocated(self):
        bundle = build_bundle(KIND_SPATIAL2D, 8, seed=7)
        y, psi = make_inputs(bundle, H=4, W=4, seed=7)
        deps = causality_probe(bundle, y, psi, (3, 1, 1))
        assert all((yy, xx) != (1, 1) for _, yy, xx in deps)


class TestBundleConfig:
    def test_hyper_channels_default(self):
        b = build_bundle(KIND_GROUPED, 64, G=8)
        assert b.config.hyper_channels == 8

    def test_prior_scale_positive(self):
        b = build_bundle(KIND_SPATIAL2D, 16)
        b.params["prior.scale_raw"].data[:] = -50.0
        prior = b.prior()
        assert np.all(prior.scale >= 1e-3)
