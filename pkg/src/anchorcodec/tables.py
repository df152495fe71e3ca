"""Quantized CDF tables for coding Gaussian and factorized symbols.

Each table covers a finite symbol window plus one escape entry. A symbol
outside the window is sent as the escape followed by its 16-bit two's
complement offset in two uniform bytes, so the whole [-32768, 32767] range
stays codable while tables stay small.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
from scipy.special import ndtr

from .entropy import SYMBOL_MAX, SYMBOL_MIN, FactorizedPrior, SymbolOverflowError, gaussian_mass
from .rangecoder import RangeDecoder, RangeEncoder, quantize_counts

TAIL_SIGMAS = 7.0
RADIUS_LADDER = np.array(
    [1, 2, 3, 4, 5, 6, 8, 10, 12, 16, 20, 24, 32, 40, 48, 64, 80, 96, 128, 160, 192,
     256, 320, 384, 512, 640, 768, 1024, 1280, 1536, 2048], dtype=np.int64)
MAX_RADIUS = int(RADIUS_LADDER[-1])
FACTORIZED_TAIL = 1e-10
CHUNK_ENTRIES = 1 << 22

_BYTE_CUM = np.arange(257, dtype=np.int64) * 256


def gaussian_radius(ratio: np.ndarray) -> np.ndarray:
    """Window half-width for bins of width ``ratio`` = delta / sigma."""
    need = TAIL_SIGMAS / np.asarray(ratio, dtype=np.float64)
    idx = np.searchsorted(RADIUS_LADDER, need, side="left")
    return RADIUS_LADDER[np.minimum(idx, len(RADIUS_LADDER) - 1)]


def gaussian_table_probs(ratio: np.ndarray, radius: int) -> np.ndarray:
    """Rows of bin masses over [-radius, radius] followed by the escape mass."""
    ratio = np.asarray(ratio, dtype=np.float64)[:, None]
    s = np.arange(-radius, radius + 1, dtype=np.float64)[None, :]
    mass = gaussian_mass(s, 1.0 / ratio, 1.0)
    escape = 2.0 * ndtr(-(radius + 0.5) * ratio)
    return np.concatenate([mass, escape], axis=1)


def _cum_rows(probs: np.ndarray) -> np.ndarray:
    counts = quantize_counts(probs)
    cum = np.zeros((counts.shape[0], counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cum[:, 1:])
    return cum


def gaussian_tables(ratio: np.ndarray) -> Iterator[tuple[list[np.ndarray], np.ndarray]]:
    """Yield (cum rows, window lows) for consecutive chunks of symbols, in order."""
    ratio = np.asarray(ratio, dtype=np.float64).reshape(-1)
    radius = gaussian_radius(ratio)
    sizes = 2 * radius + 3
    start = 0
    n = len(ratio)
    while start < n:
        cs = np.cumsum(sizes[start:])
        stop = start + max(1, int(np.searchsorted(cs, CHUNK_ENTRIES, side="right")))
        rows: list[np.ndarray] = [None] * (stop - start)  # type: ignore[list-item]
        rad = radius[start:stop]
        for r in np.unique(rad):
            sel = np.flatnonzero(rad == r)
            cum = _cum_rows(gaussian_table_probs(ratio[start:stop][sel], int(r)))
            for j, row in zip(sel, cum):
                rows[j] = row
        yield rows, -rad
        start = stop


def factorized_tables(prior: FactorizedPrior) -> tuple[list[np.ndarray], np.ndarray]:
    """One (cum, low) table per hyperprior channel."""
    grid = np.arange(-MAX_RADIUS - 1, MAX_RADIUS + 1, dtype=np.float64)
    c = prior.channels
    upper = prior.cdf(np.repeat((grid + 0.5)[None, :], c, axis=0))  # cdf(s + 1/2)
    rows, lows = [], []
    for ch in range(c):
        below = np.flatnonzero(upper[ch] <= FACTORIZED_TAIL)  # cdf(s + 1/2) small
        above = np.flatnonzero(1.0 - upper[ch] <= FACTORIZED_TAIL)
        lo = int(grid[below[-1]]) + 1 if len(below) else -MAX_RADIUS
        hi = int(grid[above[0]]) if len(above) else MAX_RADIUS
        lo = max(lo, -MAX_RADIUS)
        hi = min(max(hi, lo), MAX_RADIUS)
        s = np.arange(lo, hi + 1, dtype=np.float64)
        centres = np.zeros((len(s), c))
        centres[:, ch] = s
        mass = prior.bin_mass(centres)[:, ch]
        tails = prior.cdf(np.array([[lo - 0.5, hi + 0.5]]).repeat(c, axis=0))[ch]
        escape = tails[0] + (1.0 - tails[1])
        rows.append(_cum_rows(np.concatenate([mass, [escape]])[None, :])[0])
        lows.append(lo)
    return rows, np.asarray(lows, dtype=np.int64)


def encode_values(enc: RangeEncoder, values, rows, lows) -> None:
    for v, cum, lo in zip(values, rows, lows):
        idx = int(v) - int(lo)
        n_in = len(cum) - 2
        if 0 <= idx < n_in:
            enc.encode(int(cum[idx]), int(cum[idx + 1] - cum[idx]))
        else:
            if not SYMBOL_MIN <= int(v) <= SYMBOL_MAX:
                raise SymbolOverflowError(f"symbol {int(v)} does not fit in 16 bits")
            enc.encode(int(cum[n_in]), int(cum[n_in + 1] - cum[n_in]))
            raw = int(v) - SYMBOL_MIN
            enc.encode(int(_BYTE_CUM[raw >> 8]), 256)
            enc.encode(int(_BYTE_CUM[raw & 0xFF]), 256)


def decode_values(dec: RangeDecoder, rows, lows) -> list[int]:
    out = []
    for cum, lo in zip(rows, lows):
        idx = dec.decode_cum(cum)
        if idx == len(cum) - 2:
            hi = dec.decode_cum(_BYTE_CUM)
            lo_b = dec.decode_cum(_BYTE_CUM)
            out.append(((hi << 8) | lo_b) + SYMBOL_MIN)
        else:
            out.append(idx + int(lo))
    return out


def table_bits(values, rows, lows) -> float:
    """Exact code length implied by the quantized tables (before coder overhead)."""
    total = 0.0
    for v, cum, lo in zip(values, rows, lows):
        idx = int(v) - int(lo)
        n_in = len(cum) - 2
        if 0 <= idx < n_in:
            total += 16.0 - np.log2(float(cum[idx + 1] - cum[idx]))
        else:
            total += 16.0 - np.log2(float(cum[n_in + 1] - cum[n_in])) + 16.0
    return total
