"""Measurement tooling: matched-channel MAD reports, the serial-step
complexity model, RD curves and BD-rate, and codec wall-clock profiling."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import Akima1DInterpolator

from .codec import decode_latents, encode_latents
from .context import KIND_GROUPED, KIND_MASK3D, KIND_SPATIAL2D


# ---------------------------------------------------------------------------
# MAD matched-channel analysis

@dataclass
class MatchReport:
    """For each channel c >= 1: the previous channel with minimum mean
    absolute difference of co-located elements, plus the adjacent-channel
    MAD for comparison."""
    matched: np.ndarray       # (C-1,) int, entry i describes channel i+1
    mad_matched: np.ndarray   # (C-1,) float
    mad_adjacent: np.ndarray  # (C-1,) float

    @property
    def channels(self) -> int:
        return len(self.matched) + 1

    def nonadjacent_fraction(self) -> float:
        c = np.arange(1, self.channels)
        return float(np.mean(self.matched != c - 1))

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["channel", "matched", "mad_matched", "mad_adjacent"])
            for i in range(len(self.matched)):
                w.writerow([i + 1, int(self.matched[i]),
                            f"{self.mad_matched[i]:.6f}",
                            f"{self.mad_adjacent[i]:.6f}"])


def mad_match(latents: np.ndarray) -> MatchReport:
    """Ties broken toward the smallest channel index."""
    y = np.asarray(latents, dtype=np.float64)
    if y.ndim == 3:
        y = y[None]
    if y.ndim != 4 or y.shape[1] < 2:
        raise ValueError("mad_match needs a (C,H,W) tensor with C >= 2")
    C = y.shape[1]
    flat = y.transpose(1, 0, 2, 3).reshape(C, -1)
    matched = np.zeros(C - 1, dtype=np.int64)
    mad_m = np.zeros(C - 1)
    mad_a = np.zeros(C - 1)
    for c in range(1, C):
        mads = np.mean(np.abs(flat[:c] - flat[c]), axis=1)
        matched[c - 1] = int(np.argmin(mads))  # argmin takes the first minimum
        mad_m[c - 1] = mads[matched[c - 1]]
        mad_a[c - 1] = mads[c - 1]
    return MatchReport(matched, mad_m, mad_a)


# ---------------------------------------------------------------------------
# serial-operation complexity model

def serial_ops(kind: str, C: int, H: int, W: int, G: int = 8) -> int:
    """Closed-form count of strictly sequential decode steps."""
    if kind == KIND_SPATIAL2D:
        return H * W
    if kind == KIND_MASK3D:
        return C * H * W
    if kind == KIND_GROUPED:
        # the first group is split into its first channel and the rest,
        # adding one pass on top of the G groups
        return (G + 1) * H * W
    raise ValueError(f"unknown context kind: {kind!r}")


# ---------------------------------------------------------------------------
# RD curves and BD-rate

@dataclass
class RDCurve:
    points: list            # ordered (bpp, quality)
    quality_tag: str = "psnr"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.points) >= 2:
            bpps = [p[0] for p in self.points]
            if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
                raise ValueError("bpp must be strictly increasing")
        if any(p[0] <= 0 for p in self.points):
            raise ValueError("bpp must be positive")

    def bpps(self):
        return np.array([p[0] for p in self.points])

    def qualities(self):
        return np.array([p[1] for p in self.points])

    def write_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bpp", self.quality_tag])
            for bpp, q in self.points:
                w.writerow([f"{bpp:.6f}", f"{q:.6f}"])


def read_rd_csv(path: str) -> RDCurve:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    tag = rows[0][1]
    pts = [(float(r[0]), float(r[1])) for r in rows[1:]]
    return RDCurve(pts, quality_tag=tag)


def _log_rate_interp(curve: RDCurve):
    q = curve.qualities()
    r = np.log2(curve.bpps())
    order = np.argsort(q)
    q, r = q[order], r[order]
    if len(q) != len(np.unique(q)):
        raise ValueError("duplicate quality values on RD curve")
    return Akima1DInterpolator(q, r), q.min(), q.max()


def _overlap(reference: RDCurve, test: RDCurve):
    fr, rlo, rhi = _log_rate_interp(reference)
    ft, tlo, thi = _log_rate_interp(test)
    lo, hi = max(rlo, tlo), min(rhi, thi)
    if hi <= lo:
        raise ValueError("RD curves have no overlapping quality range")
    return fr, ft, lo, hi


def bd_rate(reference: RDCurve, test: RDCurve) -> float:
    """Average percent rate difference of `test` vs `reference` over the
    shared quality range; negative means the test curve saves rate.

    Piecewise-cubic (Akima) interpolation of log2(bpp) as a function of
    quality, integrated exactly over the overlap.
    """
    for c in (reference, test):
        if len(c.points) < 4:
            raise ValueError("BD-rate needs at least 4 RD points per curve")
    fr, ft, lo, hi = _overlap(reference, test)
    avg = (ft.integrate(lo, hi) - fr.integrate(lo, hi)) / (hi - lo)
    return float((2.0 ** avg - 1.0) * 100.0)


def bd_rate_dense_oracle(reference: RDCurve, test: RDCurve,
                         grid: int = 20000) -> float:
    """Trapezoid-on-dense-grid cross-check for the exact integral above."""
    fr, ft, lo, hi = _overlap(reference, test)
    q = np.linspace(lo, hi, grid)
    avg = np.trapezoid(ft(q) - fr(q), q) / (hi - lo)
    return float((2.0 ** avg - 1.0) * 100.0)


# ---------------------------------------------------------------------------
# profiling

@dataclass
class ScheduleProfile:
    kind: str
    C: int
    H: int
    W: int
    G: int
    steps: int
    enc_ms: float
    dec_ms: float
    single_sample: bool = False

    CSV_HEADER = ["kind", "C", "H", "W", "G", "steps", "enc_ms", "dec_ms"]

    def csv_row(self):
        return [self.kind, self.C, self.H, self.W, self.G, self.steps,
                f"{self.enc_ms:.3f}", f"{self.dec_ms:.3f}"]


def profile_codec(bundle, latents: np.ndarray, z_hat: np.ndarray,
                  repetitions: int = 3) -> ScheduleProfile:
    """Median wall-clock encode/decode times; one warm-up round excluded."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    blob = encode_latents(bundle, latents, z_hat)  # warm-up
    decode_latents(blob, bundle)
    enc_times, dec_times = [], []
    result = None
    for _ in range(repetitions):
        t0 = time.perf_counter()
        blob = encode_latents(bundle, latents, z_hat)
        t1 = time.perf_counter()
        result = decode_latents(blob, bundle)
        t2 = time.perf_counter()
        enc_times.append((t1 - t0) * 1e3)
        dec_times.append((t2 - t1) * 1e3)
    C, H, W = latents.shape
    return ScheduleProfile(
        kind=bundle.kind, C=C, H=H, W=W, G=bundle.config.G,
        steps=result.serial_steps,
        enc_ms=statistics.median(enc_times),
        dec_ms=statistics.median(dec_times),
        single_sample=repetitions == 1)
