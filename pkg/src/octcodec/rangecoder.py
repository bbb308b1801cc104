"""Carry-less 32-bit range coder (Subbotin style) with 16-bit frequency tables.

Symbols are coded against integer CDF rows whose total is ``PROB_TOTAL``.
``quantize_pmf`` turns float probabilities into such rows with every entry at
least one quantum, so any symbol in a table is codable.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS
_TOP = 1 << 24
_BOT = 1 << 16
_MASK = 0xFFFFFFFF


class RangeCoderError(ValueError):
    """Raised when a stream cannot be decoded consistently."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total: int = PROB_TOTAL) -> None:
        if freq < 1 or cum < 0 or cum + freq > total or total > PROB_TOTAL:
            raise RangeCoderError(f"invalid interval cum={cum} freq={freq} total={total}")
        r = self.range // total
        self.low += r * cum
        self.range = r * freq
        low, rng, out = self.low, self.range, self.out
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def encode_bits(self, value: int, nbits: int) -> None:
        """Equiprobable bypass coding of an unsigned ``nbits`` value, 16 bits at a time."""
        while nbits > 0:
            chunk = min(nbits, PROB_BITS)
            nbits -= chunk
            self.encode((value >> nbits) & ((1 << chunk) - 1), 1, 1 << chunk)

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise RangeCoderError("range decoder ran past the end of the stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self, total: int = PROB_TOTAL) -> int:
        self.range //= total
        value = ((self.code - self.low) & _MASK) // self.range
        if value >= total:
            raise RangeCoderError("corrupt stream: cumulative target out of range")
        return value

    def consume(self, cum: int, freq: int) -> None:
        low = self.low + cum * self.range
        rng = self.range * freq
        code = self.code
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOT:
                rng = -low & (_BOT - 1)
            else:
                break
            code = ((code << 8) | self._byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def decode_bits(self, nbits: int) -> int:
        value = 0
        while nbits > 0:
            chunk = min(nbits, PROB_BITS)
            nbits -= chunk
            v = self.target(1 << chunk)
            self.consume(v, 1)
            value = (value << chunk) | v
        return value

    def check_exhausted(self) -> None:
        if self.pos != len(self.data):
            raise RangeCoderError(f"{len(self.data) - self.pos} unread bytes after the last symbol")


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Map rows of probabilities to integer CDFs with total ``PROB_TOTAL``.

    Returns an int64 array of shape (rows, n + 1) starting at 0 and ending at
    ``PROB_TOTAL``; every symbol receives at least one quantum.
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    rows, n = pmf.shape
    if n + 1 > PROB_TOTAL:
        raise ValueError(f"alphabet of {n} symbols does not fit {PROB_BITS}-bit precision")
    pmf = np.clip(pmf, 0.0, None)
    mass = pmf.sum(axis=1, keepdims=True)
    pmf = pmf / np.where(mass > 0, mass, 1.0)
    freq = np.floor(pmf * (PROB_TOTAL - n)).astype(np.int64) + 1
    slack = PROB_TOTAL - freq.sum(axis=1)
    freq[np.arange(rows), np.argmax(freq, axis=1)] += slack
    cdf = np.zeros((rows, n + 1), dtype=np.int64)
    np.cumsum(freq, axis=1, out=cdf[:, 1:])
    return cdf


def encode_symbols(enc: RangeEncoder, indices: Sequence[int], cdfs: np.ndarray) -> None:
    """Code ``indices[i]`` with CDF row ``cdfs[i]``."""
    lo = cdfs[np.arange(len(indices)), indices].tolist()
    hi = cdfs[np.arange(len(indices)), np.asarray(indices) + 1].tolist()
    for c, h in zip(lo, hi):
        enc.encode(c, h - c)


def decode_symbol(dec: RangeDecoder, cdf_row: list) -> int:
    t = dec.target()
    idx = bisect_right(cdf_row, t) - 1
    dec.consume(cdf_row[idx], cdf_row[idx + 1] - cdf_row[idx])
    return idx


def range_encode(symbols: Sequence[int], cdfs: np.ndarray) -> bytes:
    """Code symbol indices, one CDF row per symbol."""
    enc = RangeEncoder()
    if len(symbols):
        encode_symbols(enc, symbols, cdfs)
    return enc.finish()


def range_decode(data: bytes, cdfs: np.ndarray, count: int) -> list[int]:
    """Inverse of :func:`range_encode`; ``cdfs`` may be a single row reused for all symbols."""
    dec = RangeDecoder(data)
    rows = np.atleast_2d(cdfs).tolist()
    shared = len(rows) == 1
    out = [decode_symbol(dec, rows[0] if shared else rows[i]) for i in range(count)]
    dec.check_exhausted()
    return out
