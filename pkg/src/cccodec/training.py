"""Toy-scale training: synthetic correlated latents, a small autoencoder,
the rate-distortion loss, and the two-phase Adam loop.

The synthetic family plants cross-channel structure on purpose: base
channels are smoothed seeded noise, derived channels copy a deliberately
non-adjacent earlier channel plus fresh noise.  A grouped cross-channel
model can exploit the co-located copies; a purely spatial context model
cannot, which is the comparison the experiments run.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nn
from .codec import encode_latents, quantize
from .container import save_checkpoint
from .context import (ContextModelBundle, build_bundle, estimate_fields,
                      hyper_analysis_np)
from .entropy import latent_rate_bits

# lambda presets as published (the leading 0.018 is reproduced verbatim,
# see the project notes) with their paired latent channel counts
LAMBDA_PRESETS = (0.018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483)
LAMBDA_CHANNELS = (128, 128, 128, 192, 192, 192)

PSNR_CAP = 99.0


@dataclass
class SyntheticLatentSpec:
    N: int
    H: int
    W: int
    base_channels: int
    match_map: list  # (target, source, scale, noise_level)
    smoothing: float = 0.8
    base_scale: float = 2.5
    seed: int = 0

    def __post_init__(self):
        group8 = max(1, self.N // 8)
        far = False
        for t, s, _, _ in self.match_map:
            if s >= t:
                raise ValueError("match-map source must precede its target")
            if t - s > group8:
                far = True
        if self.match_map and not far:
            raise ValueError("need at least one source more than a group away")


def default_match_map(N: int, base_channels: int,
                      noise_level: float = 0.25) -> list:
    """Derived channels cycle through source distances {5, 7, 16}: the short
    distances split across group boundaries only for finer partitions, the
    long one is always more than a group away."""
    distances = (5, 7, 16)
    mm = []
    for i, t in enumerate(range(base_channels, N)):
        d = distances[i % len(distances)]
        s = t - d
        if s < 0:
            s = t % max(1, base_channels - 1)
        if s >= t - 1:  # keep sources non-adjacent
            s = max(0, t - 2)
        mm.append((t, s, 1.0, noise_level))
    return mm


def make_latent_spec(N: int, H: int, W: int, seed: int = 0,
                     noise_level: float = 0.25) -> SyntheticLatentSpec:
    B = max(2, N // 4)
    return SyntheticLatentSpec(N=N, H=H, W=W, base_channels=B,
                               match_map=default_match_map(N, B, noise_level),
                               seed=seed)


def _smooth_noise(rng, shape, smoothing, scale):
    g = rng.standard_normal(shape)
    if smoothing > 0:
        sig = (0,) * (g.ndim - 2) + (smoothing, smoothing)
        g = gaussian_filter(g, sigma=sig, mode="wrap")
    std = g.std(axis=(-2, -1), keepdims=True)
    return g / np.maximum(std, 1e-9) * scale


def generate_synthetic_latents(spec: SyntheticLatentSpec, batch: int = 1,
                               seed: int | None = None) -> np.ndarray:
    """(batch, N, H, W) float latents, deterministic per seed."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    out = np.zeros((batch, spec.N, spec.H, spec.W))
    out[:, :spec.base_channels] = _smooth_noise(
        rng, (batch, spec.base_channels, spec.H, spec.W),
        spec.smoothing, spec.base_scale)
    derived = {t: (s, a, nl) for t, s, a, nl in spec.match_map}
    for t in range(spec.base_channels, spec.N):
        if t in derived:
            s, a, nl = derived[t]
            noise = rng.standard_normal((batch, spec.H, spec.W)) * nl
            out[:, t] = a * out[:, s] + noise
        else:
            out[:, t] = _smooth_noise(rng, (batch, 1, spec.H, spec.W),
                                      spec.smoothing, spec.base_scale)[:, 0]
    return out


# ---------------------------------------------------------------------------
# toy autoencoder (images mode)

def add_autoencoder_params(bundle: ContextModelBundle, in_ch: int = 1,
                           seed: int = 7):
    rng = np.random.default_rng(seed)
    N = bundle.N
    mid = max(4, N // 2)
    p = bundle.params

    def conv(name, o, i, k):
        p[name + ".w"] = nn.tensor(nn.he_uniform(rng, (o, i, k, k), i * k * k),
                                   requires_grad=True, name=name + ".w")
        p[name + ".b"] = nn.tensor(np.zeros(o), requires_grad=True, name=name + ".b")

    conv("ae.ga1", mid, in_ch, 3)
    conv("ae.ga2", N, mid, 3)
    conv("ae.gs1", mid, N, 3)
    conv("ae.gs2", in_ch, mid, 3)


def analysis_transform(bundle, x):
    p = bundle.params
    h = nn.leaky_relu(nn.conv2d(x, p["ae.ga1.w"], p["ae.ga1.b"], stride=2))
    return nn.conv2d(h, p["ae.ga2.w"], p["ae.ga2.b"], stride=2)


def synthesis_transform(bundle, y):
    p = bundle.params
    h = nn.leaky_relu(nn.conv2d(nn.upsample2x(y), p["ae.gs1.w"], p["ae.gs1.b"]))
    return nn.conv2d(nn.upsample2x(h), p["ae.gs2.w"], p["ae.gs2.b"])


def hyper_analysis(bundle, y):
    p = bundle.params
    return nn.conv2d(y, p["hyper.ha.w"], p["hyper.ha.b"], stride=2)


def hyper_synthesis(bundle, z):
    p = bundle.params
    return nn.conv2d(nn.upsample2x(z), p["hyper.hs.w"], p["hyper.hs.b"])


def generate_synthetic_images(rng, batch, H, W):
    """Smoothed noise patches in [0, 1] for the optional images mode."""
    g = gaussian_filter(rng.standard_normal((batch, 1, H, W)),
                        sigma=(0.0, 0.0, 2.0, 2.0), mode="wrap")
    lo = g.min(axis=(-2, -1), keepdims=True)
    hi = g.max(axis=(-2, -1), keepdims=True)
    return (g - lo) / np.maximum(hi - lo, 1e-9)


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossBreakdown:
    rate_latent: float  # bits per pixel
    rate_hyper: float
    mse: float
    lam: float

    @property
    def total(self) -> float:
        return self.rate_latent + self.rate_hyper + self.lam * self.mse


@dataclass
class TrainConfig:
    kind: str
    N: int = 64
    G: int = 8
    H: int = 16
    W: int = 16
    lam: float = 0.0130
    steps: int = 20000 + 10000
    lr: float = 1e-4
    lr_drop_step: int = 20000  # two-phase schedule, scaled to desk budgets
    lr_drop: float = 5e-5
    batch: int = 4
    seed: int = 0
    mode: str = "latents"  # "latents" | "images"
    noise_level: float = 0.25
    hyper_channels: int = 0
    spatial2d_widths: tuple | None = None
    log_every: int = 50

    def latent_spec(self) -> SyntheticLatentSpec:
        return make_latent_spec(self.N, self.H, self.W, seed=self.seed,
                                noise_level=self.noise_level)


def _prior_tensors(bundle):
    loc = bundle.params["prior.loc"]
    scale = nn.softplus(bundle.params["prior.scale_raw"])
    return loc, scale


def rd_loss(bundle: ContextModelBundle, x: np.ndarray, config: TrainConfig,
            noise_rng: np.random.Generator):
    """Differentiable Eq.-4 style loss on one batch.

    latents mode: x is a float latent batch, distortion is the uniform
    quantization error (parameter-free).  images mode: x is an image
    batch run through the toy autoencoder.
    """
    lam = config.lam
    if config.mode == "latents":
        y = nn.tensor(x)
        x_ref = y
    else:
        x_t = nn.tensor(x)
        y = analysis_transform(bundle, x_t)
        x_ref = x_t
    y_noisy = nn.add(y, nn.tensor(noise_rng.uniform(-0.5, 0.5, y.shape)))
    z = hyper_analysis(bundle, y)
    z_noisy = nn.add(z, nn.tensor(noise_rng.uniform(-0.5, 0.5, z.shape)))
    psi = hyper_synthesis(bundle, z_noisy)
    mu, sigma = estimate_fields(bundle, y_noisy, psi)
    bits_y = nn.tsum(nn.gaussian_bits(y_noisy, mu, sigma))
    loc, scale = _prior_tensors(bundle)
    bits_z = nn.tsum(nn.logistic_bits(z_noisy, loc, scale))
    # rate is normalized per pixel: latent positions in latents mode,
    # image pixels in images mode
    npix = float(x.shape[0] * x_ref.data.shape[-2] * x_ref.data.shape[-1])
    rate_latent = nn.scale(bits_y, 1.0 / npix)
    rate_hyper = nn.scale(bits_z, 1.0 / npix)
    if config.mode == "latents":
        mse_val = float(np.mean((y_noisy.data - y.data) ** 2))
        total = nn.add(rate_latent, rate_hyper)
        breakdown = LossBreakdown(float(rate_latent.data), float(rate_hyper.data),
                                  mse_val, lam)
        return total, breakdown
    x_hat = synthesis_transform(bundle, y_noisy)
    mse = nn.tmean(nn.square(nn.sub(x_ref, x_hat)))
    total = nn.add(nn.add(rate_latent, rate_hyper), nn.scale(mse, lam))
    breakdown = LossBreakdown(float(rate_latent.data), float(rate_hyper.data),
                              float(mse.data), lam)
    return total, breakdown


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainResult:
    bundle: ContextModelBundle
    metrics: list
    checkpoint_path: str | None = None
    aborted: bool = False


def build_training_bundle(config: TrainConfig) -> ContextModelBundle:
    bundle = build_bundle(config.kind, config.N, G=config.G, seed=config.seed,
                          hyper_channels=config.hyper_channels,
                          spatial2d_widths=config.spatial2d_widths)
    if config.mode == "images":
        add_autoencoder_params(bundle, seed=config.seed + 1)
    return bundle


def train(config: TrainConfig, out_dir: str | None = None,
          metrics_path: str | None = None) -> TrainResult:
    """Seeded two-phase Adam loop; per-step LossBreakdown rows logged."""
    bundle = build_training_bundle(config)
    params = bundle.params
    adam = nn.AdamState(params, lr=config.lr)
    data_rng = np.random.default_rng((config.seed, 0xDA7A))
    noise_rng = np.random.default_rng((config.seed, 0x4015E))
    spec = config.latent_spec()
    metrics = []
    writer = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if metrics_path is None:
            metrics_path = os.path.join(out_dir, "metrics.csv")
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step", "rate_latent", "rate_hyper", "mse", "total"])
    last_good = None
    aborted = False
    try:
        for step in range(config.steps):
            if step == config.lr_drop_step:
                adam.lr = config.lr_drop
            if config.mode == "latents":
                batch = generate_synthetic_latents(
                    spec, config.batch,
                    seed=int(data_rng.integers(0, 2 ** 63 - 1)))
            else:
                batch = generate_synthetic_images(data_rng, config.batch,
                                                  4 * config.H, 4 * config.W)
            loss, breakdown = rd_loss(bundle, batch, config, noise_rng)
            if not math.isfinite(breakdown.total):
                aborted = True
                break
            last_good = {k: p.data.copy() for k, p in params.items()}
            nn.zero_grads(params)
            loss.backward()
            nn.adam_step(params, adam)
            row = (step, breakdown.rate_latent, breakdown.rate_hyper,
                   breakdown.mse, breakdown.total)
            metrics.append(row)
            if writer is not None and (step % config.log_every == 0
                                       or step == config.steps - 1):
                writer.writerow([f"{v:.6f}" if isinstance(v, float) else v
                                 for v in row])
    finally:
        if fh is not None:
            fh.close()
    if aborted and last_good is not None:
        for k, p in params.items():
            p.data = last_good[k]
    path = None
    if out_dir is not None:
        path = os.path.join(out_dir, "model.cccw")
        save_checkpoint(bundle, path)
    return TrainResult(bundle, metrics, path, aborted)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalPoint:
    bpp: float
    psnr: float
    est_bpp: float
    mse: float


def eval_rd(bundle: ContextModelBundle, spec: SyntheticLatentSpec,
            images: int = 4, seed: int = 1000, scale: float = 1.0,
            lam: float = 0.0) -> EvalPoint:
    """Rate from real bitstream bytes, distortion from dequantized latents.

    `scale` trades rate against quantization distortion without
    retraining (coarser or finer effective step size).
    """
    rng = np.random.default_rng((seed, 0xE7A1))
    bpps, mses, est_bpps = [], [], []
    npix = spec.H * spec.W
    for i in range(images):
        y = generate_synthetic_latents(spec, 1,
                                       seed=int(rng.integers(0, 2 ** 63 - 1)))[0]
        y_scaled = y * scale
        lat = quantize(y_scaled, "round")
        z = quantize(hyper_analysis_np(bundle, y_scaled), "round")
        blob = encode_latents(bundle, lat, z, lam=lam)
        bpps.append(len(blob) * 8.0 / npix)
        y_hat = lat.astype(np.float64) / scale
        mses.append(float(np.mean((y - y_hat) ** 2)))
        psi = hyper_synthesis(bundle, nn.tensor(z.astype(np.float64)))
        mu, sg = estimate_fields(bundle, nn.tensor(lat.astype(np.float64)), psi)
        est = latent_rate_bits(lat, mu.data, sg.data)
        est_bpps.append(est / npix)
    mse = float(np.mean(mses))
    psnr = PSNR_CAP if mse <= 0 else min(PSNR_CAP, -10.0 * math.log10(mse))
    return EvalPoint(float(np.mean(bpps)), psnr, float(np.mean(est_bpps)), mse)


# ---------------------------------------------------------------------------
# gradient checking

def gradient_check(config: TrainConfig, h: float = 1e-4,
                   max_params: int | None = None, seed: int = 0):
    """Central finite differences for every parameter scalar of the full
    pipeline loss; returns (max relative error, worst parameter name).

    Where the difference quotient disagrees with the analytic gradient the
    step is refined (h/10, h/100): a central difference straddling a
    leaky-relu kink measures the kink, not the derivative, and only a
    converged quotient is a valid reference."""
    bundle = build_training_bundle(config)
    spec = config.latent_spec()
    if config.mode == "latents":
        batch = generate_synthetic_latents(spec, 1, seed=seed + 17)
    else:
        batch = generate_synthetic_images(np.random.default_rng(seed + 17), 1,
                                          4 * config.H, 4 * config.W)
    frozen_noise = np.random.default_rng(seed + 23)
    state = frozen_noise.bit_generator.state

    def loss_value():
        frozen_noise.bit_generator.state = state
        loss, _ = rd_loss(bundle, batch, config, frozen_noise)
        return float(loss.data)

    frozen_noise.bit_generator.state = state
    loss, _ = rd_loss(bundle, batch, config, frozen_noise)
    nn.zero_grads(bundle.params)
    loss.backward()
    worst = (0.0, "")
    checked = 0
    for name, p in bundle.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            if max_params is not None and checked >= max_params:
                return worst
            orig = flat[i]
            rel = None
            for hh in (h, h / 10, h / 100):
                flat[i] = orig + hh
                up = loss_value()
                flat[i] = orig - hh
                dn = loss_value()
                flat[i] = orig
                fd = (up - dn) / (2 * hh)
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                r = abs(fd - gflat[i]) / denom
                rel = r if rel is None else min(rel, r)
                if rel < 1e-5:
                    break
            if rel > worst[0]:
                worst = (rel, f"{name}[{i}]")
            checked += 1
    return worst
