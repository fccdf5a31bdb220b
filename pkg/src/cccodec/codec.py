"""Group-serial encode/decode schedulers and the bitstream container.

The latent payload is one continuous range-coded stream: hyper latents
first under the factorized prior, then the latent segments in coding
order.  Within a segment the scan is raster order over spatial positions
with all segment channels emitted per position.  The symbol for each
element is the residual against round(mu), coded with the zero-centred
CDF of its sigma's scale-table entry; residuals outside [-L, L] take the
escape path (sign + Exp-Golomb magnitude).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .context import (KIND_GROUPED, KIND_MASK3D, KIND_SPATIAL2D, KINDS,
                      ContextModelBundle, CoderPlan, hyper_synthesis_np)
from .entropy import SymbolAlphabet
from .rangecoder import (RangeDecoder, RangeDecoderError, RangeEncoder,
                         decode_bits, decode_exp_golomb, encode_bits,
                         encode_exp_golomb)

BITSTREAM_MAGIC = b"CCCB"
BITSTREAM_VERSION = 1
MAX_L = 4095  # residuals beyond this always go through escape


class CodecError(Exception):
    pass


def quantize(y: np.ndarray, mode: str = "round",
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Round to nearest (ties away from zero) or add U(-0.5, 0.5) noise."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite quantizer input")
    if mode == "round":
        return np.copysign(np.floor(np.abs(y) + 0.5), y).astype(np.int32)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise mode requires a seeded generator")
        return y + rng.uniform(-0.5, 0.5, size=y.shape)
    raise ValueError(f"unknown quantization mode: {mode!r}")


def round_half_away(x):
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


# ---------------------------------------------------------------------------
# header

_HEADER_FMT = "<4sBBHHHHHHHddHBHHQd"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


@dataclass
class StreamHeader:
    kind: str
    N: int
    H: int
    W: int
    G: int
    hyper_shape: tuple
    sigma_min: float
    sigma_max: float
    table_size: int
    precision: int
    L_latent: int
    L_hyper: int
    fingerprint: int
    lam: float = 0.0

    def pack(self) -> bytes:
        cz, hz, wz = self.hyper_shape
        raw = struct.pack(
            _HEADER_FMT, BITSTREAM_MAGIC, BITSTREAM_VERSION,
            KINDS.index(self.kind), self.N, self.H, self.W, self.G,
            cz, hz, wz, self.sigma_min, self.sigma_max, self.table_size,
            self.precision, self.L_latent, self.L_hyper, self.fingerprint,
            self.lam)
        return raw + struct.pack("<I", zlib.crc32(raw))

    @classmethod
    def unpack(cls, blob: bytes) -> "StreamHeader":
        if len(blob) < _HEADER_SIZE + 4:
            raise CodecError("truncated header")
        raw = blob[:_HEADER_SIZE]
        (crc,) = struct.unpack_from("<I", blob, _HEADER_SIZE)
        if zlib.crc32(raw) != crc:
            raise CodecError("header checksum mismatch")
        (magic, version, kind_i, N, H, W, G, cz, hz, wz, smin, smax, S, P,
         Ll, Lh, fp, lam) = struct.unpack(_HEADER_FMT, raw)
        if magic != BITSTREAM_MAGIC:
            raise CodecError("not a bitstream")
        if version != BITSTREAM_VERSION:
            raise CodecError(f"unsupported bitstream version {version}")
        return cls(KINDS[kind_i], N, H, W, G, (cz, hz, wz), smin, smax,
                   S, P, Ll, Lh, fp, lam)


HEADER_BYTES = _HEADER_SIZE + 4 + 8  # header + header crc + payload len/crc


@dataclass
class EncodeTrace:
    """Per-symbol coding decisions, in stream order."""
    mu: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    sigma_index: list = field(default_factory=list)
    residual: list = field(default_factory=list)

    def quantized_cdf_bits(self, bundle: ContextModelBundle, L: int) -> float:
        """Rate of the latent symbols under the quantized table CDFs."""
        alphabet = SymbolAlphabet(L)
        total = float(1 << bundle.config.precision)
        bits = 0.0
        for idx, r in zip(self.sigma_index, self.residual):
            cdf = bundle.scale_table.cdf(idx, alphabet).astype(np.int64)
            if abs(r) <= L:
                i = alphabet.index_of(r)
                bits += -np.log2((cdf[i + 1] - cdf[i]) / total)
            else:
                i = alphabet.escape_index
                bits += -np.log2((cdf[i + 1] - cdf[i]) / total)
                mag = abs(r) - L - 1
                bits += 1 + 2 * (mag + 1).bit_length() - 1  # sign + exp-golomb
        return bits


def _emit_residual(enc, r, L, cdf, alphabet):
    if abs(r) <= L:
        enc.encode_symbol(alphabet.index_of(r), cdf)
    else:
        enc.encode_symbol(alphabet.escape_index, cdf)
        encode_bits(enc, 1 if r < 0 else 0, 1)
        encode_exp_golomb(enc, abs(r) - L - 1)


def _read_residual(dec, L, cdf, alphabet):
    i = dec.decode_symbol(cdf)
    if i != alphabet.escape_index:
        return alphabet.symbol_of(i)
    sign = -1 if decode_bits(dec, 1) else 1
    return sign * (decode_exp_golomb(dec) + L + 1)


# ---------------------------------------------------------------------------
# hyper payload

def encode_hyper(z_hat: np.ndarray, prior, L: int,
                 enc: RangeEncoder | None = None) -> bytes | None:
    """Per-channel independent coding of hyper symbols; raster order."""
    standalone = enc is None
    if standalone:
        enc = RangeEncoder()
    C = z_hat.shape[0]
    if C > 0:
        alphabet = SymbolAlphabet(L)
        for c in range(C):
            cdf = prior.cdf(c, alphabet)
            for v in z_hat[c].ravel():
                _emit_residual(enc, int(v), L, cdf, alphabet)
    return enc.finish() if standalone else None


def hyper_quantized_bits(bundle: ContextModelBundle, z_hat: np.ndarray,
                         L: int) -> float:
    """Rate of the hyper symbols under the quantized prior CDFs."""
    if z_hat.size == 0:
        return 0.0
    prior = bundle.prior()
    alphabet = SymbolAlphabet(L)
    total = float(1 << bundle.config.precision)
    bits = 0.0
    for c in range(z_hat.shape[0]):
        cdf = prior.cdf(c, alphabet).astype(np.int64)
        for v in z_hat[c].ravel():
            v = int(v)
            if abs(v) <= L:
                i = alphabet.index_of(v)
                bits += -np.log2((cdf[i + 1] - cdf[i]) / total)
            else:
                i = alphabet.escape_index
                bits += -np.log2((cdf[i + 1] - cdf[i]) / total)
                bits += 2 * (abs(v) - L).bit_length()  # sign + exp-golomb
    return bits


def decode_hyper(dec: RangeDecoder, shape: tuple, prior, L: int) -> np.ndarray:
    C, H, W = shape
    out = np.zeros(shape, dtype=np.int32)
    if C == 0:
        return out
    alphabet = SymbolAlphabet(L)
    for c in range(C):
        cdf = prior.cdf(c, alphabet)
        for yy in range(H):
            for xx in range(W):
                out[c, yy, xx] = _read_residual(dec, L, cdf, alphabet)
    return out


# ---------------------------------------------------------------------------
# latent schedule

def segment_count(bundle) -> int:
    if bundle.kind == KIND_GROUPED:
        return len(bundle.partition)
    if bundle.kind == KIND_SPATIAL2D:
        return 1
    return bundle.N


def compute_trace(bundle: ContextModelBundle, latents: np.ndarray,
                  psi: np.ndarray) -> EncodeTrace:
    """Walk the serial schedule over the true latents, recording (mu, sigma,
    sigma table index, residual) per symbol in coding order."""
    plan = CoderPlan(bundle)
    N, H, W = latents.shape
    lat_f = latents.astype(np.float64)
    xpad = np.pad(lat_f, ((0, 0), (2, 2), (2, 2)))
    table = bundle.scale_table
    trace = EncodeTrace()
    if bundle.kind == KIND_GROUPED:
        for k, seg in enumerate(plan.segments):
            cc = plan.cc_features(k, lat_f)
            a = seg["start"]
            for yy in range(H):
                for xx in range(W):
                    mu, sg = plan.grouped_params_at(k, xpad, psi, cc, yy, xx)
                    _record(trace, table, mu, sg, lat_f[a:seg["stop"], yy, xx])
    elif bundle.kind == KIND_SPATIAL2D:
        for yy in range(H):
            for xx in range(W):
                mu, sg = plan.spatial2d_params_at(xpad, psi, yy, xx)
                _record(trace, table, mu, sg, lat_f[:, yy, xx])
    else:
        for c in range(N):
            for yy in range(H):
                for xx in range(W):
                    mu, sg = plan.mask3d_params_at(c, xpad, psi, yy, xx)
                    _record(trace, table, mu, sg, lat_f[c:c + 1, yy, xx])
    return trace


def _record(trace, table, mu, sg, values):
    for j in range(mu.size):
        r = int(values[j] - round_half_away(mu[j]))
        trace.mu.append(mu[j])
        trace.sigma.append(sg[j])
        trace.sigma_index.append(table.index_of(sg[j]))
        trace.residual.append(r)


def encode_latents(bundle: ContextModelBundle, latents: np.ndarray,
                   z_hat: np.ndarray, lam: float = 0.0,
                   return_trace: bool = False):
    """Serial encode: hyper payload then latent segments; returns the full
    framed bitstream (optionally with the parameter trace)."""
    latents = np.asarray(latents)
    z_hat = np.asarray(z_hat)
    N, H, W = latents.shape
    if N != bundle.N:
        raise CodecError("latent channel count does not match bundle")
    psi = hyper_synthesis_np(bundle, z_hat)
    if psi.shape[-2:] != (H, W):
        raise CodecError("hyper latent shape inconsistent with latents")
    trace = compute_trace(bundle, latents, psi)
    res = np.abs(np.array(trace.residual, dtype=np.int64)) if trace.residual else np.array([0])
    L = int(min(max(1, res.max()), MAX_L))
    L_h = int(min(max(1, np.abs(z_hat).max() if z_hat.size else 1), MAX_L))
    header = StreamHeader(
        kind=bundle.kind, N=N, H=H, W=W, G=bundle.config.G,
        hyper_shape=z_hat.shape, sigma_min=bundle.config.sigma_min,
        sigma_max=bundle.config.sigma_max, table_size=bundle.config.table_size,
        precision=bundle.config.precision, L_latent=L, L_hyper=L_h,
        fingerprint=bundle.fingerprint, lam=lam)

    enc = RangeEncoder()
    encode_hyper(z_hat, bundle.prior(), L_h, enc)
    alphabet = SymbolAlphabet(L)
    table = bundle.scale_table
    for idx, r in zip(trace.sigma_index, trace.residual):
        _emit_residual(enc, r, L, table.cdf(idx, alphabet), alphabet)
    payload = enc.finish()
    blob = header.pack() + struct.pack("<II", len(payload), zlib.crc32(payload)) + payload
    return (blob, trace) if return_trace else blob


@dataclass
class DecodeResult:
    latents: np.ndarray
    hyper: np.ndarray
    header: StreamHeader
    serial_steps: int
    trace: EncodeTrace | None = None


def decode_latents(blob: bytes, bundle: ContextModelBundle,
                   collect_trace: bool = False,
                   audit: bool = False) -> DecodeResult:
    """Bit-exact inverse of encode_latents.

    In audit mode every context read is checked against the set of already
    decoded positions (padding counts as decoded zeros).
    """
    header = StreamHeader.unpack(blob)
    ofs = _HEADER_SIZE + 4
    if len(blob) < ofs + 8:
        raise CodecError("truncated stream")
    plen, pcrc = struct.unpack_from("<II", blob, ofs)
    payload = blob[ofs + 8:ofs + 8 + plen]
    if len(payload) != plen or zlib.crc32(payload) != pcrc:
        raise CodecError("payload checksum mismatch (truncated or corrupt)")
    if header.kind != bundle.kind or header.N != bundle.N \
            or header.G != bundle.config.G:
        raise CodecError("bitstream/model configuration mismatch")
    if header.fingerprint and bundle.fingerprint \
            and header.fingerprint != bundle.fingerprint:
        raise CodecError("model fingerprint mismatch")

    dec = RangeDecoder(payload)
    z_hat = decode_hyper(dec, header.hyper_shape, bundle.prior(), header.L_hyper)
    psi = hyper_synthesis_np(bundle, z_hat)

    plan = CoderPlan(bundle)
    N, H, W = header.N, header.H, header.W
    xpad = np.zeros((N, H + 4, W + 4))
    decoded = np.zeros((N, H + 4, W + 4), dtype=bool) if audit else None
    if audit:
        decoded[:, :2, :] = decoded[:, -2:, :] = True
        decoded[:, :, :2] = decoded[:, :, -2:] = True
    alphabet = SymbolAlphabet(header.L_latent)
    table = bundle.scale_table
    trace = EncodeTrace() if collect_trace else None
    steps = 0

    def read_segment(mu, sg, channels, yy, xx):
        for j, c in enumerate(channels):
            cdf = table.cdf(table.index_of(sg[j]), alphabet)
            r = _read_residual(dec, header.L_latent, cdf, alphabet)
            xpad[c, yy + 2, xx + 2] = r + round_half_away(mu[j])
            if audit:
                decoded[c, yy + 2, xx + 2] = True
            if trace is not None:
                trace.mu.append(mu[j])
                trace.sigma.append(sg[j])
                trace.sigma_index.append(table.index_of(sg[j]))
                trace.residual.append(r)

    if bundle.kind == KIND_GROUPED:
        for k, seg in enumerate(plan.segments):
            cc = plan.cc_features(k, xpad[:, 2:-2, 2:-2])
            channels = list(range(seg["start"], seg["stop"]))
            taps = _nonzero_taps(seg["cs_w2"], seg["widths"]["Is"]) if audit else None
            for yy in range(H):
                for xx in range(W):
                    if audit:
                        _check_reads(decoded, taps, yy, xx)
                    mu, sg = plan.grouped_params_at(k, xpad, psi, cc, yy, xx)
                    read_segment(mu, sg, channels, yy, xx)
                    steps += 1
    elif bundle.kind == KIND_SPATIAL2D:
        taps = _nonzero_taps(plan.cs_w2, N) if audit else None
        for yy in range(H):
            for xx in range(W):
                if audit:
                    _check_reads(decoded, taps, yy, xx)
                mu, sg = plan.spatial2d_params_at(xpad, psi, yy, xx)
                read_segment(mu, sg, list(range(N)), yy, xx)
                steps += 1
    else:
        for c in range(N):
            win_taps = _nonzero_taps(plan.k3_w2, 3) if audit else None
            for yy in range(H):
                for xx in range(W):
                    if audit:
                        _check_reads(decoded, [(c - 1 + ci, dy, dx)
                                               for ci, dy, dx in win_taps
                                               if 0 <= c - 1 + ci < N], yy, xx)
                    mu, sg = plan.mask3d_params_at(c, xpad, psi, yy, xx)
                    read_segment(mu, sg, [c], yy, xx)
                    steps += 1

    latents = np.asarray(round_half_away(xpad[:, 2:-2, 2:-2]), dtype=np.int32)
    return DecodeResult(latents, z_hat, header, steps, trace)


def _nonzero_taps(w2: np.ndarray, in_ch: int):
    """(channel, dy, dx) taps with any nonzero weight, from a flattened kernel."""
    w = w2.reshape(w2.shape[0], in_ch, 5, 5)
    used = np.any(w != 0.0, axis=0)
    return [tuple(t) for t in np.argwhere(used)]


def _check_reads(decoded, taps, yy, xx):
    for ci, dy, dx in taps:
        if not decoded[ci, yy + dy, xx + dx]:
            raise CodecError(
                f"read-before-decode at channel {ci}, offset ({dy - 2}, {dx - 2}) "
                f"from position ({yy}, {xx})")
