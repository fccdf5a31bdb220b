"""Bit-exact 32-bit range coder with byte-wise renormalization.

Carry handling uses pending-byte counting (cache + run of 0xFF bytes).
The encoder's guaranteed-zero leading byte is dropped and trailing zero
bytes are stripped; the decoder zero-fills past end of payload, so both
are transparent.  decode(encode(seq)) is exact for any CDF sequence.
"""

from __future__ import annotations

import numpy as np

TOP = 1 << 24
MASK32 = (1 << 32) - 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if (self.low & MASK32) < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, cum: int, freq: int, total: int):
        if freq <= 0 or cum < 0 or cum + freq > total or total > self.range:
            raise ValueError("invalid frequency interval")
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, index: int, cdf: np.ndarray):
        c = cdf.astype(np.int64) if cdf.dtype != np.int64 else cdf
        self.encode(int(c[index]), int(c[index + 1] - c[index]), int(c[-1]))

    def finish(self) -> bytes:
        # ceil low to a multiple of 2^24 inside [low, low+range); the 24
        # cleared bits become trailing zero bytes and are stripped below
        self.low = (self.low + 0x00FFFFFF) & ~0x00FFFFFF
        for _ in range(5):
            self._shift_low()
        payload = bytes(self.out[1:])  # leading byte is always zero
        return payload.rstrip(b"\x00")


class RangeDecoderError(Exception):
    pass


class RangeDecoder:
    def __init__(self, payload: bytes):
        self._buf = payload
        self._pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._buf):
            b = self._buf[self._pos]
            self._pos += 1
            return b
        self._pos += 1
        return 0  # stripped trailing zeros

    def decode_symbol(self, cdf: np.ndarray) -> int:
        c = cdf.astype(np.int64) if cdf.dtype != np.int64 else cdf
        total = int(c[-1])
        r = self.range // total
        v = self.code // r
        if v >= total:
            v = total - 1
        index = int(np.searchsorted(c, v, side="right")) - 1
        cum = int(c[index])
        freq = int(c[index + 1]) - cum
        if freq <= 0:
            raise RangeDecoderError("corrupt stream: empty symbol interval")
        self.code -= r * cum
        self.range = r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8
        return index


_BIT_CDF = np.array([0, 1 << 15, 1 << 16], dtype=np.uint32)


def encode_bits(enc: RangeEncoder, value: int, nbits: int):
    """MSB-first raw bits at probability one half each."""
    for i in range(nbits - 1, -1, -1):
        enc.encode_symbol((value >> i) & 1, _BIT_CDF)


def decode_bits(dec: RangeDecoder, nbits: int) -> int:
    v = 0
    for _ in range(nbits):
        v = (v << 1) | dec.decode_symbol(_BIT_CDF)
    return v


def encode_exp_golomb(enc: RangeEncoder, value: int):
    """Order-0 Exp-Golomb for value >= 0 via fair bits."""
    if value < 0:
        raise ValueError("Exp-Golomb encodes nonnegative values")
    v = value + 1
    nbits = v.bit_length()
    encode_bits(enc, 0, nbits - 1)  # prefix zeros
    encode_bits(enc, v, nbits)


def decode_exp_golomb(dec: RangeDecoder) -> int:
    zeros = 0
    while decode_bits(dec, 1) == 0:
        zeros += 1
        if zeros > 64:
            raise RangeDecoderError("corrupt stream: runaway Exp-Golomb prefix")
    v = 1
    for _ in range(zeros):
        v = (v << 1) | decode_bits(dec, 1)
    return v - 1
