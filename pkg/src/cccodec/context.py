"""Grouped cross-channel + spatial context models.

The grouped model codes channel segments serially: segment 0 is the first
channel of group 1, segment 1 the rest of group 1, then one segment per
remaining group.  Each segment owns a cross-channel net (full 2D convs
over all previously coded channels), a 5x5 causal masked conv for spatial
context, and a three-layer 1x1-conv entropy net fusing both with the
hyper-synthesis output psi.  The spatial2d and mask3d baselines share the
same entropy-net pattern with a single shared context extractor.

Channel widths follow the grouped schedule exactly (for G=8 they are the
published table values): with s channels in a segment, the context
feature widths are c = m = 2s, the entropy net sees 2N + m (+ c) inputs
and narrows by halves down to e3 = 2s, split into mu and raw sigma.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .entropy import (CDF_PRECISION, SCALE_TABLE_SIZE, SIGMA_MAX, SIGMA_MIN,
                      FactorizedPrior, ScaleTable)

KIND_GROUPED = "cross-channel-grouped"
KIND_SPATIAL2D = "spatial2d"
KIND_MASK3D = "mask3d"
KINDS = (KIND_SPATIAL2D, KIND_MASK3D, KIND_GROUPED)

LEAKY_SLOPE = 0.01


class GroupPartition:
    """Ordered channel segments: [0,1), [1, N/G), then whole groups."""

    def __init__(self, N: int, G: int):
        if G < 1:
            raise ValueError("group count must be >= 1")
        if N % G != 0:
            raise ValueError(f"channel count {N} not divisible by group count {G}")
        gs = N // G
        if gs < 2:
            raise ValueError("degenerate group size (need N/G >= 2)")
        self.N = N
        self.G = G
        self.group_size = gs
        self.segments = [(0, 1), (1, gs)]
        for g in range(1, G):
            self.segments.append((g * gs, (g + 1) * gs))

    def __len__(self):
        return len(self.segments)

    def segment_of_channel(self, c: int) -> int:
        for k, (a, b) in enumerate(self.segments):
            if a <= c < b:
                return k
        raise ValueError(f"channel {c} out of range")


def partition_channels(N: int, G: int) -> GroupPartition:
    return GroupPartition(N, G)


def segment_widths(N: int, start: int, stop: int) -> dict:
    """Network widths for the segment covering channels [start, stop)."""
    s = stop - start
    Ic = start
    has_cc = start >= 1
    c = 2 * s if has_cc else 0
    m = 2 * s
    Id = 2 * N
    ep_in = Id + m + c
    e1 = ep_in // 2
    e2 = e1 // 2
    e3 = 2 * s
    return {"Ic": Ic, "Is": stop, "c": c, "m": m, "Id": Id,
            "e1": e1, "e2": e2, "e3": e3, "channels": s, "has_cc": start >= 1}


@dataclass
class BundleConfig:
    kind: str
    N: int
    G: int = 1
    hyper_channels: int = 0
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    table_size: int = SCALE_TABLE_SIZE
    precision: int = CDF_PRECISION
    mask3d_features: int = 0
    spatial2d_widths: tuple | None = None  # (m, e1, e2) override

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown context model kind: {self.kind!r}")
        if self.hyper_channels <= 0:
            self.hyper_channels = max(2, self.N // 8)
        if self.kind == KIND_MASK3D and self.mask3d_features <= 0:
            self.mask3d_features = max(4, self.N // 4)

    def fingerprint_fields(self):
        sw = self.spatial2d_widths or (0, 0, 0)
        return (self.kind, self.N, self.G, self.hyper_channels,
                self.mask3d_features, sw[0], sw[1], sw[2])


class ContextModelBundle:
    """Immutable-after-construction model: config + named parameter tensors."""

    def __init__(self, config: BundleConfig, params: dict[str, nn.Tensor]):
        self.config = config
        self.params = params
        self.partition = (GroupPartition(config.N, config.G)
                          if config.kind == KIND_GROUPED else None)
        self.scale_table = ScaleTable(config.sigma_min, config.sigma_max,
                                      config.table_size, config.precision)
        self.fingerprint = 0  # set when saved to / loaded from a checkpoint

    @property
    def kind(self):
        return self.config.kind

    @property
    def N(self):
        return self.config.N

    def prior(self) -> FactorizedPrior:
        loc = self.params["prior.loc"].data
        raw = self.params["prior.scale_raw"].data
        scale = np.log1p(np.exp(-np.abs(raw))) + np.maximum(raw, 0.0)
        return FactorizedPrior(loc, np.maximum(scale, 1e-3), self.config.precision)

    def context_parameter_count(self) -> int:
        """Parameters of the context/entropy nets (hyper branch excluded)."""
        return sum(p.data.size for k, p in self.params.items()
                   if not k.startswith(("hyper.", "prior.")))


# ---------------------------------------------------------------------------
# builders

def _conv_param(rng, out_ch, in_ch, kh, kw, name, params):
    fan_in = in_ch * kh * kw
    params[name + ".w"] = nn.tensor(nn.he_uniform(rng, (out_ch, in_ch, kh, kw), fan_in),
                                    requires_grad=True, name=name + ".w")
    params[name + ".b"] = nn.tensor(np.zeros(out_ch), requires_grad=True,
                                    name=name + ".b")


_SIGMA_BIAS = 0.5413248546129181  # softplus(x) = 1.0


def _entropy_head_bias(params, name, e3):
    # start sigma near 1 so early training is not rate-saturated
    b = params[name + ".b"].data
    b[e3 // 2:] = _SIGMA_BIAS


def _hyper_params(rng, N, Cz, params):
    _conv_param(rng, Cz, N, 3, 3, "hyper.ha", params)
    _conv_param(rng, 2 * N, Cz, 3, 3, "hyper.hs", params)
    params["prior.loc"] = nn.tensor(np.zeros(Cz), requires_grad=True, name="prior.loc")
    params["prior.scale_raw"] = nn.tensor(np.full(Cz, 2.0), requires_grad=True,
                                          name="prior.scale_raw")


def build_bundle(kind: str, N: int, G: int = 8, seed: int = 0,
                 hyper_channels: int = 0, mask3d_features: int = 0,
                 spatial2d_widths: tuple | None = None) -> ContextModelBundle:
    config = BundleConfig(kind=kind, N=N, G=G if kind == KIND_GROUPED else 1,
                          hyper_channels=hyper_channels,
                          mask3d_features=mask3d_features,
                          spatial2d_widths=spatial2d_widths)
    rng = np.random.default_rng(seed)
    params: dict[str, nn.Tensor] = {}
    if kind == KIND_GROUPED:
        part = GroupPartition(N, config.G)
        for k, (a, b) in enumerate(part.segments):
            w = segment_widths(N, a, b)
            _conv_param(rng, w["m"], w["Is"], 5, 5, f"seg{k}.cs", params)
            if w["has_cc"]:
                _conv_param(rng, w["c"], w["Ic"], 3, 3, f"seg{k}.cc.proj", params)
                _conv_param(rng, w["c"], w["c"], 3, 3, f"seg{k}.cc.r1", params)
                _conv_param(rng, w["c"], w["c"], 3, 3, f"seg{k}.cc.r2", params)
            ep_in = w["Id"] + w["m"] + w["c"]
            _conv_param(rng, w["e1"], ep_in, 1, 1, f"seg{k}.ep1", params)
            _conv_param(rng, w["e2"], w["e1"], 1, 1, f"seg{k}.ep2", params)
            _conv_param(rng, w["e3"], w["e2"], 1, 1, f"seg{k}.ep3", params)
            _entropy_head_bias(params, f"seg{k}.ep3", w["e3"])
    elif kind == KIND_SPATIAL2D:
        if config.spatial2d_widths is not None:
            m, e1, e2 = config.spatial2d_widths
        else:
            m = N
            e1 = (2 * N + m) // 2
            e2 = e1 // 2
            config.spatial2d_widths = (m, e1, e2)
        _conv_param(rng, m, N, 5, 5, "cs", params)
        _conv_param(rng, e1, 2 * N + m, 1, 1, "ep1", params)
        _conv_param(rng, e2, e1, 1, 1, "ep2", params)
        _conv_param(rng, 2 * N, e2, 1, 1, "ep3", params)
        _entropy_head_bias(params, "ep3", 2 * N)
    else:  # mask3d
        F = config.mask3d_features
        _conv_param(rng, F, 3, 5, 5, "k3", params)
        fin = 2 + F
        _conv_param(rng, fin, fin, 1, 1, "ep1", params)
        _conv_param(rng, max(2, fin // 2), fin, 1, 1, "ep2", params)
        _conv_param(rng, 2, max(2, fin // 2), 1, 1, "ep3", params)
        _entropy_head_bias(params, "ep3", 2)
    _hyper_params(rng, N, config.hyper_channels, params)
    return ContextModelBundle(config, params)


def match_spatial2d_widths(N: int, target_count: int) -> tuple:
    """Scale the spatial2d width profile to hit a context-net parameter
    budget within 10% (binary search on a common multiplier)."""

    def count(alpha):
        m = max(2, int(round(alpha * N)))
        e1 = max(4, int(round(alpha * (2 * N + m) / 2)))
        e2 = max(2, e1 // 2)
        b = build_bundle(KIND_SPATIAL2D, N, spatial2d_widths=(m, e1, e2))
        return b.context_parameter_count(), (m, e1, e2)

    lo, hi = 0.05, 16.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        n, widths = count(mid)
        if abs(n - target_count) / target_count < 0.02:
            return widths
        if n < target_count:
            lo = mid
        else:
            hi = mid
    return count(0.5 * (lo + hi))[1]


# ---------------------------------------------------------------------------
# full-tensor parameter estimation (training / analysis path)

def _sigma_act(raw: nn.Tensor, cfg: BundleConfig) -> nn.Tensor:
    return nn.clamp(nn.softplus(raw), cfg.sigma_min, cfg.sigma_max)


def _ep_chain(fused, params, prefix):
    h = nn.leaky_relu(nn.conv2d(fused, params[prefix + "1.w"], params[prefix + "1.b"]),
                      LEAKY_SLOPE)
    h = nn.leaky_relu(nn.conv2d(h, params[prefix + "2.w"], params[prefix + "2.b"]),
                      LEAKY_SLOPE)
    return nn.conv2d(h, params[prefix + "3.w"], params[prefix + "3.b"])


def _grouped_segment_field(bundle, k, y, psi):
    part = bundle.partition
    a, b = part.segments[k]
    w = segment_widths(bundle.N, a, b)
    p = bundle.params
    sp_w = nn.apply_mask(p[f"seg{k}.cs.w"], "causal-A")
    phi_si = nn.conv2d(nn.slice_channels(y, 0, w["Is"]), sp_w, p[f"seg{k}.cs.b"])
    parts = [psi]
    if w["has_cc"]:
        prev = nn.slice_channels(y, 0, w["Ic"])
        h = nn.conv2d(prev, p[f"seg{k}.cc.proj.w"], p[f"seg{k}.cc.proj.b"])
        phi_cc = nn.residual_block(h, p[f"seg{k}.cc.r1.w"], p[f"seg{k}.cc.r1.b"],
                                   p[f"seg{k}.cc.r2.w"], p[f"seg{k}.cc.r2.b"],
                                   LEAKY_SLOPE)
        parts.append(phi_cc)
    parts.append(phi_si)
    out = _ep_chain(nn.concat_channels(parts), p, f"seg{k}.ep")
    s = w["channels"]
    mu = nn.slice_channels(out, 0, s)
    sigma = _sigma_act(nn.slice_channels(out, s, 2 * s), bundle.config)
    return mu, sigma


def estimate_segment_params(bundle: ContextModelBundle, k: int,
                            y: nn.Tensor, psi: nn.Tensor):
    """(mu, sigma) for segment k of the grouped model.

    y carries all N channels; only channels of segments <= k influence the
    result (later channels are sliced away, causality within the current
    segment comes from the mask).
    """
    if bundle.kind != KIND_GROUPED:
        raise ValueError("estimate_segment_params requires the grouped model")
    if psi.data.shape[-3] != 2 * bundle.N:
        raise ValueError("psi must have 2N channels")
    if y.data.shape[-3] != bundle.N:
        raise ValueError("latent channel count does not match bundle")
    return _grouped_segment_field(bundle, k, y, psi)


def estimate_fields(bundle: ContextModelBundle, y: nn.Tensor, psi: nn.Tensor):
    """Full (mu, sigma) fields over all N channels for any model kind."""
    if y.data.shape[-3] != bundle.N:
        raise ValueError("latent channel count does not match bundle")
    if psi.data.shape[-3] != 2 * bundle.N:
        raise ValueError("psi must have 2N channels")
    p = bundle.params
    cfg = bundle.config
    if bundle.kind == KIND_GROUPED:
        mus, sigmas = [], []
        for k in range(len(bundle.partition)):
            mu_k, sg_k = _grouped_segment_field(bundle, k, y, psi)
            mus.append(mu_k)
            sigmas.append(sg_k)
        return nn.concat_channels(mus), nn.concat_channels(sigmas)
    if bundle.kind == KIND_SPATIAL2D:
        sp_w = nn.apply_mask(p["cs.w"], "causal-A")
        phi_si = nn.conv2d(y, sp_w, p["cs.b"])
        out = _ep_chain(nn.concat_channels([psi, phi_si]), p, "ep")
        mu = nn.slice_channels(out, 0, cfg.N)
        sigma = _sigma_act(nn.slice_channels(out, cfg.N, 2 * cfg.N), cfg)
        return mu, sigma
    # mask3d: fold channels into a batch axis, shared weights across channels
    N = cfg.N
    win = nn.stack_new_axis([nn.shift_channels(y, 1), y, nn.shift_channels(y, -1)])
    k3 = nn.apply_mask(p["k3.w"], "causal-3d")
    feats = nn.conv2d(win, k3, p["k3.b"])  # (..., N, F, H, W)
    psi_pc = nn.reshape_lead(psi, (N, 2))  # (..., N, 2, H, W)
    out = _ep_chain(nn.concat_channels([psi_pc, feats]), p, "ep")
    mu = nn.merge_lead(nn.slice_channels(out, 0, 1))
    sigma = _sigma_act(nn.merge_lead(nn.slice_channels(out, 1, 2)), cfg)
    return mu, sigma


def causality_probe(bundle: ContextModelBundle, y: np.ndarray, psi: np.ndarray,
                    position: tuple, eps: float = 1.0) -> set:
    """Latent positions whose perturbation changes (mu, sigma) at `position`.

    Exhaustive: re-runs the full estimator once per latent element.
    """
    c0, y0, x0 = position
    base_mu, base_sg = estimate_fields(bundle, nn.tensor(y), nn.tensor(psi))
    bm = base_mu.data[c0, y0, x0]
    bs = base_sg.data[c0, y0, x0]
    deps = set()
    N, H, W = y.shape
    for c in range(N):
        for yy in range(H):
            for xx in range(W):
                pert = y.copy()
                pert[c, yy, xx] += eps
                mu, sg = estimate_fields(bundle, nn.tensor(pert), nn.tensor(psi))
                if mu.data[c0, y0, x0] != bm or sg.data[c0, y0, x0] != bs:
                    deps.add((c, yy, xx))
    return deps


def legal_dependency_region(bundle: ContextModelBundle, position: tuple,
                            shape: tuple) -> set:
    """The admissible context set for `position` under the bundle's kind."""
    c0, y0, x0 = position
    N, H, W = shape
    legal = set()

    def raster_before(yy, xx):
        return yy < y0 or (yy == y0 and xx < x0)

    if bundle.kind == KIND_GROUPED:
        part = bundle.partition
        k0 = part.segment_of_channel(c0)
        a, b = part.segments[k0]
        for c in range(N):
            k = part.segment_of_channel(c)
            for yy in range(H):
                for xx in range(W):
                    if k < k0 or (k == k0 and raster_before(yy, xx)):
                        legal.add((c, yy, xx))
    elif bundle.kind == KIND_SPATIAL2D:
        for c in range(N):
            for yy in range(H):
                for xx in range(W):
                    if raster_before(yy, xx):
                        legal.add((c, yy, xx))
    else:  # mask3d: one previous channel fully, current channel causally
        for c in (c0 - 1, c0):
            if c < 0:
                continue
            for yy in range(H):
                for xx in range(W):
                    if c < c0 or raster_before(yy, xx):
                        legal.add((c, yy, xx))
    return legal


# ---------------------------------------------------------------------------
# deterministic numpy helpers shared by encoder and decoder

def np_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray,
              stride: int = 1) -> np.ndarray:
    """Plain-numpy twin of nn.conv2d (same tap order, 'same' padding)."""
    O, I, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    H, W = x.shape[-2:]
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for ky in range(kh):
        for kx in range(kw):
            xs = xp[:, ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
            out += np.einsum("oi,iyx->oyx", w[:, :, ky, kx], xs)
    return out + b[:, None, None]


def np_upsample2x(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=-2).repeat(2, axis=-1)


def np_lrelu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def np_softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def hyper_synthesis_np(bundle: ContextModelBundle, z_hat: np.ndarray) -> np.ndarray:
    """psi from quantized hyper latents; identical on encoder and decoder."""
    p = bundle.params
    return np_conv2d(np_upsample2x(z_hat.astype(np.float64)),
                     p["hyper.hs.w"].data, p["hyper.hs.b"].data)


def hyper_analysis_np(bundle: ContextModelBundle, y: np.ndarray) -> np.ndarray:
    p = bundle.params
    return np_conv2d(y.astype(np.float64), p["hyper.ha.w"].data,
                     p["hyper.ha.b"].data, stride=2)


class CoderPlan:
    """Precomputed numpy weights for the serial per-position coding path.

    Both the encoder and the decoder evaluate (mu, sigma) through this
    plan, so their parameter sequences agree bit for bit by construction.
    """

    def __init__(self, bundle: ContextModelBundle):
        self.bundle = bundle
        cfg = bundle.config
        p = bundle.params
        self.cfg = cfg
        if cfg.kind == KIND_GROUPED:
            self.segments = []
            for k, (a, b) in enumerate(bundle.partition.segments):
                w = segment_widths(cfg.N, a, b)
                mask = nn.conv_mask("causal-A", 5, 5, w["Is"])
                cs_w = p[f"seg{k}.cs.w"].data * mask
                seg = {
                    "start": a, "stop": b, "widths": w,
                    "cs_w2": np.ascontiguousarray(cs_w.reshape(w["m"], -1)),
                    "cs_b": p[f"seg{k}.cs.b"].data,
                    "ep": [(p[f"seg{k}.ep{i}.w"].data.reshape(
                        p[f"seg{k}.ep{i}.w"].data.shape[0], -1),
                        p[f"seg{k}.ep{i}.b"].data) for i in (1, 2, 3)],
                }
                if w["has_cc"]:
                    seg["cc"] = [(p[f"seg{k}.cc.{n}.w"].data, p[f"seg{k}.cc.{n}.b"].data)
                                 for n in ("proj", "r1", "r2")]
                self.segments.append(seg)
        elif cfg.kind == KIND_SPATIAL2D:
            mask = nn.conv_mask("causal-A", 5, 5, cfg.N)
            self.cs_w2 = np.ascontiguousarray((p["cs.w"].data * mask).reshape(
                p["cs.w"].data.shape[0], -1))
            self.cs_b = p["cs.b"].data
            self.ep = [(p[f"ep{i}.w"].data.reshape(p[f"ep{i}.w"].data.shape[0], -1),
                        p[f"ep{i}.b"].data) for i in (1, 2, 3)]
        else:
            mask = nn.conv_mask("causal-3d", 5, 5, 3)
            self.k3_w2 = np.ascontiguousarray((p["k3.w"].data * mask).reshape(
                p["k3.w"].data.shape[0], -1))
            self.k3_b = p["k3.b"].data
            self.ep = [(p[f"ep{i}.w"].data.reshape(p[f"ep{i}.w"].data.shape[0], -1),
                        p[f"ep{i}.b"].data) for i in (1, 2, 3)]

    def cc_features(self, k: int, y_np: np.ndarray) -> np.ndarray | None:
        """Cross-channel features for grouped segment k (one pass per segment)."""
        seg = self.segments[k]
        if "cc" not in seg:
            return None
        prev = y_np[:seg["widths"]["Ic"]].astype(np.float64)
        (pw, pb), (r1w, r1b), (r2w, r2b) = seg["cc"]
        h = np_conv2d(prev, pw, pb)
        branch = np_conv2d(np_lrelu(np_conv2d(h, r1w, r1b)), r2w, r2b)
        return h + branch

    def _ep_eval(self, ep, v: np.ndarray) -> np.ndarray:
        (w1, b1), (w2, b2), (w3, b3) = ep
        h = np_lrelu(w1 @ v + b1)
        h = np_lrelu(w2 @ h + b2)
        return w3 @ h + b3

    def _finish_sigma(self, raw: np.ndarray) -> np.ndarray:
        return np.clip(np_softplus(raw), self.cfg.sigma_min, self.cfg.sigma_max)

    def grouped_params_at(self, k: int, xpad: np.ndarray, psi: np.ndarray,
                          cc: np.ndarray | None, yy: int, xx: int):
        """(mu, sigma) for all channels of segment k at one spatial position.

        xpad is the working latent tensor padded by 2 on each spatial side.
        """
        seg = self.segments[k]
        w = seg["widths"]
        win = xpad[:w["Is"], yy:yy + 5, xx:xx + 5].reshape(-1)
        phi = seg["cs_w2"] @ win + seg["cs_b"]
        if cc is not None:
            v = np.concatenate([psi[:, yy, xx], cc[:, yy, xx], phi])
        else:
            v = np.concatenate([psi[:, yy, xx], phi])
        out = self._ep_eval(seg["ep"], v)
        s = w["channels"]
        return out[:s], self._finish_sigma(out[s:])

    def spatial2d_params_at(self, xpad: np.ndarray, psi: np.ndarray,
                            yy: int, xx: int):
        win = xpad[:, yy:yy + 5, xx:xx + 5].reshape(-1)
        phi = self.cs_w2 @ win + self.cs_b
        out = self._ep_eval(self.ep, np.concatenate([psi[:, yy, xx], phi]))
        N = self.cfg.N
        return out[:N], self._finish_sigma(out[N:])

    def mask3d_params_at(self, c: int, xpad: np.ndarray, psi: np.ndarray,
                         yy: int, xx: int):
        N = self.cfg.N
        win = np.zeros((3, 5, 5))
        if c >= 1:
            win[0] = xpad[c - 1, yy:yy + 5, xx:xx + 5]
        win[1] = xpad[c, yy:yy + 5, xx:xx + 5]
        if c + 1 < N:
            win[2] = xpad[c + 1, yy:yy + 5, xx:xx + 5]
        feat = self.k3_w2 @ win.reshape(-1) + self.k3_b
        v = np.concatenate([psi[2 * c:2 * c + 2, yy, xx], feat])
        out = self._ep_eval(self.ep, v)
        return out[:1], self._finish_sigma(out[1:])
