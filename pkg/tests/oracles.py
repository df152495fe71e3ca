"""Independent reference implementations used as test oracles.

These are deliberately written from scratch in plain Python (exact rationals,
dicts, loops) and share no code with the package.
"""

from __future__ import annotations

import math
import struct
from fractions import Fraction

# ----------------------------------------------------------------- partition


def round_half_away_exact(q: Fraction) -> int:
    n = math.floor(abs(q))
    if abs(q) - n >= Fraction(1, 2):
        n += 1
    return n if q >= 0 else -n


def voxel_key(p, eps: float) -> tuple[int, int, int]:
    out = []
    for x in p:
        q = x / eps
        frac = abs(q) - math.floor(abs(q))
        if abs(frac - 0.5) < 1e-6:  # near a tie: settle it with exact rationals
            out.append(round_half_away_exact(Fraction(x) / Fraction(eps)))
        else:
            out.append(int(math.copysign(math.floor(abs(q) + 0.5), q)))
    return tuple(out)


def f32(x: float) -> float:
    return struct.unpack("<f", struct.pack("<f", x))[0]


def f32_next_up(x: float) -> float:
    bits = struct.unpack("<I", struct.pack("<f", x))[0]
    bits = bits + 1 if x >= 0 else bits - 1
    return struct.unpack("<f", struct.pack("<I", bits))[0]


def voxel_size(kappa: float, eps: float) -> float:
    """float32 voxel size for kappa * eps, strictly above eps."""
    e = f32(kappa * eps)
    while e <= eps:
        e = f32_next_up(e)
    return e


def representatives(members: list[int], positions, eps: float) -> dict:
    """voxel key -> lowest member index in that voxel."""
    reps: dict = {}
    for i in sorted(members):
        reps.setdefault(voxel_key(positions[i], eps), i)
    return reps


def search(members, positions, eps, target, tol=1e-9, max_iter=64):
    """kappa search: double the bracket, then bisect; keep the closest count."""
    tried: dict[float, int] = {}

    def count(kappa):
        if kappa not in tried:
            tried[kappa] = len(representatives(members, positions, voxel_size(kappa, eps)))
        return tried[kappa]

    lo, hi, n = 1.0, 2.0, 0
    while count(hi) > target and n < max_iter:
        lo, hi, n = hi, 2.0 * hi, n + 1
    if count(hi) <= target:
        for _ in range(max_iter):
            if hi - lo <= tol * hi:
                break
            mid = (lo + hi) / 2.0
            c = count(mid)
            if c == target:
                break
            if c > target:
                lo = mid
            else:
                hi = mid
    best = sorted(tried, key=lambda k: (abs(tried[k] - target), k))[0]
    return best, voxel_size(best, eps)


def brute_partition(positions, levels: int, tau: float, eps0: float):
    """Bottom-up partition by set differences; returns (eps, level_of, parent_of)."""
    n = len(positions)
    positions = [tuple(float(c) for c in p) for p in positions]
    hats = [list(range(n))]
    eps = [f32(eps0)]
    reps_by_level = []
    for _ in range(1, levels):
        members = hats[-1]
        if not members:
            eps.append(voxel_size(2.0, eps[-1]))
            reps_by_level.append({})
            hats.append([])
            continue
        target = max(1, math.floor(tau * len(members) + 0.5))
        _, e = search(members, positions, eps[-1], target)
        eps.append(e)
        reps = representatives(members, positions, e)
        reps_by_level.append(reps)
        hats.append(sorted(reps.values()))
    level_of = [0] * n
    for k in range(1, levels):
        for i in hats[k]:
            level_of[i] = k
    parent_of = [-1] * n
    for i in range(n):
        k = level_of[i]
        if k < levels - 1:
            parent_of[i] = reps_by_level[k][voxel_key(positions[i], eps[k + 1])]
    return eps, level_of, parent_of


# ------------------------------------------------------------ entropy coding


def gaussian_bin_mass(q: int, mu: float, sigma: float, delta: float) -> float:
    """P(value falls in the bin of symbol q) for N(mu, sigma^2), via erfc."""
    def cdf(x):
        return 0.5 * math.erfc(-(x - mu) / (sigma * math.sqrt(2.0)))

    centre = mu + q * delta
    return cdf(centre + delta / 2) - cdf(centre - delta / 2)


def quantized_gaussian_entropy(ratio: float, radius: int = 4000) -> float:
    """Entropy (bits) of round(X / delta) for X ~ N(0, sigma^2), ratio = delta / sigma."""
    h = 0.0
    for q in range(-radius, radius + 1):
        p = gaussian_bin_mass(q, 0.0, 1.0 / ratio, 1.0)
        if p > 0:
            h -= p * math.log2(p)
    return h


def largest_remainder(probs, total=1 << 16) -> list[int]:
    """Reference frequency quantizer: reserve 1, apportion the rest, ties to lower index."""
    n = len(probs)
    s = sum(max(p, 0.0) for p in probs)
    p = [max(x, 0.0) / s for x in probs] if s > 0 else [1.0 / n] * n
    free = total - n
    base = [math.floor(x * free) for x in p]
    rem = [x * free - b for x, b in zip(p, base)]
    left = free - sum(base)
    order = sorted(range(n), key=lambda i: (-rem[i], i))
    counts = [1 + b for b in base]
    for i in order[:left]:
        counts[i] += 1
    return counts


class ArithmeticOracle:
    """Exact rational interval arithmetic: the ideal code length of a symbol sequence."""

    def __init__(self):
        self.bits = 0.0

    def add(self, freq: int, total: int = 1 << 16) -> None:
        self.bits += math.log2(total / freq)
