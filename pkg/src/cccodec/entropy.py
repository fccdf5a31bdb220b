"""Probability models for coding.

Discretized conditional Gaussian for latents, a per-channel discretized
logistic prior for hyper latents, and the integer-CDF quantization that
makes range coding bit-exact.  Alphabet is [-L, L] plus a trailing escape
symbol; anything outside the range is coded via the escape path.
"""

from __future__ import annotations

import numpy as np

from . import nn

SIGMA_MIN = 0.11
SIGMA_MAX = 256.0
SCALE_TABLE_SIZE = 64
CDF_PRECISION = 16


class SymbolAlphabet:
    """Integer range [-L, L] plus one escape symbol (index 2L + 1)."""

    def __init__(self, L: int):
        if L < 1:
            raise ValueError("alphabet half-width L must be >= 1")
        self.L = L
        self.size = 2 * L + 2  # symbols plus escape

    @property
    def escape_index(self) -> int:
        return self.size - 1

    def index_of(self, symbol: int) -> int:
        if abs(symbol) > self.L:
            return self.escape_index
        return symbol + self.L

    def symbol_of(self, index: int) -> int:
        if index == self.escape_index:
            raise ValueError("escape index has no direct symbol")
        return index - self.L


def discretized_gaussian_prob(symbol, mu, sigma):
    """P(symbol) = Phi((s + .5 - mu)/sigma) - Phi((s - .5 - mu)/sigma).

    sigma is clamped to [SIGMA_MIN, SIGMA_MAX] rather than rejected.
    """
    s = np.asarray(symbol, dtype=np.float64)
    sig = np.clip(np.asarray(sigma, dtype=np.float64), SIGMA_MIN, SIGMA_MAX)
    return nn.std_gaussian_mass(s, np.asarray(mu, dtype=np.float64), sig)


def quantize_cdf(probs: np.ndarray, precision: int = CDF_PRECISION) -> np.ndarray:
    """Quantize a probability vector into a monotone integer CDF.

    Total mass 2**precision, every symbol gets >= 1 count, rounding is
    deterministic largest-remainder.  Returns uint32 array of length K + 1.
    """
    p = np.asarray(probs, dtype=np.float64)
    K = p.size
    if K < 2:
        raise ValueError("degenerate alphabet (need >= 2 symbols)")
    if np.any(p < 0) or p.sum() > 1.0 + 1e-9:
        raise ValueError("invalid probability vector")
    total = 1 << precision
    if K > total:
        raise ValueError("alphabet larger than 2**precision")
    # renormalize onto total - K so the +1 floor cannot overshoot
    psum = p.sum()
    if psum <= 0:
        scaled = np.full(K, (total - K) / K)
    else:
        scaled = p / psum * (total - K)
    base = np.floor(scaled).astype(np.int64) + 1
    rem = total - int(base.sum())
    if rem > 0:
        frac = scaled - np.floor(scaled)
        # ties broken by lowest index for determinism
        order = np.lexsort((np.arange(K), -frac))
        base[order[:rem]] += 1
    cdf = np.zeros(K + 1, dtype=np.uint32)
    cdf[1:] = np.cumsum(base)
    return cdf


def cdf_freqs(cdf: np.ndarray) -> np.ndarray:
    return np.diff(cdf.astype(np.int64))


class ScaleTable:
    """Log-spaced sigma grid with lazily built integer CDFs per entry."""

    def __init__(self, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX,
                 size=SCALE_TABLE_SIZE, precision=CDF_PRECISION):
        if size < 1 or sigma_min <= 0 or sigma_max <= sigma_min:
            raise ValueError("invalid scale table parameters")
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)
        self.size = int(size)
        self.precision = int(precision)
        self.sigmas = np.exp(np.linspace(np.log(self.sigma_min),
                                         np.log(self.sigma_max), self.size))
        self._cdfs: dict[tuple[int, int], np.ndarray] = {}

    def index_of(self, sigma: float) -> int:
        """Smallest index whose table sigma >= input sigma, clamped at ends."""
        i = int(np.searchsorted(self.sigmas, sigma, side="left"))
        return min(i, self.size - 1)

    def indices_of(self, sigma: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.sigmas, np.asarray(sigma), side="left")
        return np.minimum(idx, self.size - 1)

    def cdf(self, index: int, alphabet: SymbolAlphabet) -> np.ndarray:
        """Zero-centred quantized CDF over the alphabet for table entry index."""
        key = (index, alphabet.L)
        got = self._cdfs.get(key)
        if got is not None:
            return got
        sigma = self.sigmas[index]
        symbols = np.arange(-alphabet.L, alphabet.L + 1, dtype=np.float64)
        probs = discretized_gaussian_prob(symbols, 0.0, sigma)
        full = np.empty(alphabet.size)
        full[:-1] = probs
        full[-1] = max(0.0, 1.0 - probs.sum())  # escape gets the tails
        cdf = quantize_cdf(full, self.precision)
        self._cdfs[key] = cdf
        return cdf

    def header_params(self):
        return (self.sigma_min, self.sigma_max, self.size, self.precision)


class FactorizedPrior:
    """Per-channel discretized logistic over hyper-latent symbols."""

    def __init__(self, loc: np.ndarray, scale: np.ndarray,
                 precision: int = CDF_PRECISION):
        loc = np.asarray(loc, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if loc.shape != scale.shape or loc.ndim != 1:
            raise ValueError("loc/scale must be matching 1-D arrays")
        if np.any(scale <= 0):
            raise ValueError("prior scale must be positive")
        self.loc = loc
        self.scale = scale
        self.precision = precision
        self._cdfs: dict[tuple[int, int], np.ndarray] = {}

    @property
    def channels(self) -> int:
        return self.loc.size

    def prob(self, symbol, channel: int) -> np.ndarray:
        s = np.asarray(symbol, dtype=np.float64)
        a = (s - 0.5 - self.loc[channel]) / self.scale[channel]
        b = (s + 0.5 - self.loc[channel]) / self.scale[channel]
        return nn._sigmoid(b) - nn._sigmoid(a)

    def cdf(self, channel: int, alphabet: SymbolAlphabet) -> np.ndarray:
        key = (channel, alphabet.L)
        got = self._cdfs.get(key)
        if got is not None:
            return got
        symbols = np.arange(-alphabet.L, alphabet.L + 1)
        probs = self.prob(symbols, channel)
        full = np.empty(alphabet.size)
        full[:-1] = probs
        full[-1] = max(0.0, 1.0 - probs.sum())
        cdf = quantize_cdf(full, self.precision)
        self._cdfs[key] = cdf
        return cdf


def latent_rate_bits(latents: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Eq.-style rate estimate: sum of -log2 p(symbol) under the float model."""
    latents = np.asarray(latents)
    if latents.shape != np.asarray(mu).shape or latents.shape != np.asarray(sigma).shape:
        raise ValueError("latent/parameter shape mismatch")
    p = discretized_gaussian_prob(latents.astype(np.float64), mu, sigma)
    p = np.maximum(p, nn._P_FLOOR)
    return float(-np.log2(p).sum())
