"""Integer range coder with 16-bit frequency tables.

32-bit range, byte-wise renormalisation, carry propagation through a cached
byte (the LZMA scheme). The stream is the 5 flush bytes' worth longer than
the payload at most. Bit-exact on every platform: only Python ints are used.

>>> cdf = quantize_cdf([0.5, 0.25, 0.25])
>>> data = encode([0, 2, 1, 0], [cdf] * 4)
>>> decode(data, [cdf] * 4)
[0, 2, 1, 0]
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeCoderError(ValueError):
    pass


class TruncatedStreamError(RangeCoderError):
    pass


@dataclass(frozen=True)
class CdfTable:
    """Cumulative counts ``cum`` of length n+1, ``cum[0] = 0``, ``cum[-1] = 2**16``."""

    cum: np.ndarray

    @property
    def size(self) -> int:
        return len(self.cum) - 1

    def freq(self, s: int) -> int:
        return int(self.cum[s + 1] - self.cum[s])

    def bits(self, s: int) -> float:
        return PRECISION - float(np.log2(self.freq(s)))


def quantize_counts(probs: np.ndarray) -> np.ndarray:
    """Largest-remainder integer counts summing to 2**16, each at least 1.

    Works row-wise on a 2-D array. One count per symbol is reserved up front;
    the remaining ``2**16 - n`` are apportioned by largest remainder, ties to
    the lower index.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n = p.shape[1]
    if n > TOTAL:
        raise RangeCoderError(f"alphabet of {n} symbols exceeds 2**{PRECISION}")
    if n == 0:
        raise RangeCoderError("empty alphabet")
    p = np.maximum(p, 0.0)
    total = p.sum(axis=1, keepdims=True)
    p = np.where(total > 0, p / np.where(total > 0, total, 1.0), 1.0 / n)
    free = TOTAL - n
    scaled = p * free
    base = np.floor(scaled)
    rem = scaled - base
    deficit = free - base.sum(axis=1).astype(np.int64)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(n)[None, :].repeat(len(p), axis=0), axis=1)
    counts = 1 + base.astype(np.int64) + (rank < deficit[:, None])
    return counts


def quantize_cdf(probabilities: Sequence[float]) -> CdfTable:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1:
        raise RangeCoderError("probabilities must be a vector")
    if (p < 0).any() or not np.isfinite(p).all():
        raise RangeCoderError("probabilities must be finite and nonnegative")
    if abs(p.sum() - 1.0) > 1e-3:
        raise RangeCoderError(f"probabilities sum to {p.sum()}, not 1")
    counts = quantize_counts(p)[0]
    return CdfTable(np.concatenate([[0], np.cumsum(counts)]).astype(np.int64))


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.count = 0

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        """Code the interval [start, start + freq) out of 2**16."""
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()
        self.count += 1

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = memoryview(bytes(data))
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()
        self.code &= _MASK32

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("range-coded stream ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        """Scaled position inside the current range, in [0, 2**16)."""
        self._r = self.range >> PRECISION
        v = self.code // self._r
        if v >= TOTAL:
            raise RangeCoderError("corrupt stream: target outside table")
        return v

    def consume(self, start: int, freq: int) -> None:
        self.code -= self._r * start
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8

    def decode_cum(self, cum: np.ndarray) -> int:
        v = self.target()
        s = int(np.searchsorted(cum, v, side="right")) - 1
        self.consume(int(cum[s]), int(cum[s + 1] - cum[s]))
        return s


@dataclass
class EncodedStream:
    data: bytes
    n_symbols: int


def encode(symbols: Sequence[int], cdfs: Sequence[CdfTable]) -> EncodedStream:
    if len(symbols) != len(cdfs):
        raise RangeCoderError(f"{len(symbols)} symbols but {len(cdfs)} tables")
    enc = RangeEncoder()
    for i, (s, table) in enumerate(zip(symbols, cdfs)):
        s = int(s)
        if not 0 <= s < table.size:
            raise RangeCoderError(f"symbol {s} at index {i} outside alphabet of {table.size}")
        freq = table.freq(s)
        if freq <= 0:
            raise RangeCoderError(f"symbol {s} at index {i} has zero frequency")
        enc.encode(int(table.cum[s]), freq)
    return EncodedStream(enc.finish(), len(symbols))


def decode(stream: EncodedStream | bytes, cdfs: Sequence[CdfTable]) -> list[int]:
    data = stream.data if isinstance(stream, EncodedStream) else stream
    if isinstance(stream, EncodedStream) and stream.n_symbols != len(cdfs):
        raise RangeCoderError(f"stream holds {stream.n_symbols} symbols, {len(cdfs)} tables given")
    dec = RangeDecoder(data)
    return [dec.decode_cum(t.cum) for t in cdfs]
