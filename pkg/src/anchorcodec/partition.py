"""Bottom-up voxel partitioning of anchors into disjoint coarse-to-fine levels."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .scene import AnchorScene

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionConfig:
    levels: int = 3
    tau: float = 0.2
    eps0: float | None = None  # None: median nearest-neighbour spacing
    tol: float = 1e-9
    max_iter: int = 64

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.eps0 is not None and not self.eps0 > 0:
            raise ValueError("eps0 must be positive")


@dataclass
class LevelPartition:
    """Level assignment and parent map.

    ``parent_of[a] == -1`` exactly for anchors on the coarsest level.
    ``hat_counts[k]`` is the size of the cumulative set (level k and coarser).
    """

    levels: int
    eps: list[float]
    kappa: list[float]
    level_of: np.ndarray
    parent_of: np.ndarray
    level_counts: list[int]
    hat_counts: list[int]
    warnings: list[str] = field(default_factory=list)

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.level_of == k)

    def hat_members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.level_of >= k)

    def same_as(self, other: "LevelPartition") -> bool:
        return (
            self.levels == other.levels
            and self.eps == other.eps
            and self.kappa == other.kappa
            and np.array_equal(self.level_of, other.level_of)
            and np.array_equal(self.parent_of, other.parent_of)
            and self.level_counts == other.level_counts
        )

    def summary(self, tau: float | None = None) -> dict:
        ratios = [
            self.hat_counts[k] / self.hat_counts[k - 1] if self.hat_counts[k - 1] else float("nan")
            for k in range(1, self.levels)
        ]
        out = {
            "levels": self.levels,
            "eps": self.eps,
            "kappa": self.kappa,
            "level_counts": self.level_counts,
            "cumulative_counts": self.hat_counts,
            "achieved_ratios": ratios,
            "warnings": list(self.warnings),
        }
        if tau is not None:
            out["tau"] = tau
        return out


def voxel_keys(x: np.ndarray, eps: float) -> np.ndarray:
    """Integer voxel indices ``round(x / eps)`` with ties rounded away from zero."""
    x = np.asarray(x, dtype=np.float64)
    q = x / np.float64(eps)
    t = np.trunc(q)
    frac = q - t  # exact in IEEE arithmetic
    keys = (t + np.where(np.abs(frac) >= 0.5, np.sign(q), 0.0)).astype(np.int64)
    # the rounded quotient can land on (or just off) a tie the exact one misses
    near = np.flatnonzero(np.abs(np.abs(frac) - 0.5) < 1e-9)
    if len(near):
        flat_x, flat_k = x.reshape(-1), keys.reshape(-1)
        e = Fraction(float(eps))
        for i in near:
            r = Fraction(float(flat_x[i])) / e
            n = math.floor(abs(r))
            n += abs(r) - n >= Fraction(1, 2)
            flat_k[i] = n if r >= 0 else -n
    return keys


def quantize_position(x, eps: float) -> np.ndarray:
    if not eps > 0:
        raise ValueError("eps must be positive")
    return voxel_keys(x, eps).astype(np.float64) * np.float64(eps)


def _f32_above(value: float, floor: float) -> float:
    """Round ``value`` to float32, nudging up so the result exceeds ``floor``."""
    v = np.float32(value)
    while float(v) <= floor:
        v = np.nextafter(v, np.float32(np.inf))
    return float(v)


def _count(positions: np.ndarray, eps: float) -> int:
    if len(positions) == 0:
        return 0
    return len(np.unique(voxel_keys(positions, eps), axis=0))


@dataclass
class LevelBuild:
    representatives: np.ndarray  # ascending anchor indices
    member_rep: np.ndarray  # representative for each member, aligned with members
    keys: np.ndarray  # voxel key per representative

    def voxel_key_of(self) -> dict[tuple[int, int, int], int]:
        return {tuple(k): int(r) for k, r in zip(self.keys.tolist(), self.representatives)}


def build_level(members: np.ndarray, eps_next: float, positions: np.ndarray) -> LevelBuild:
    """One representative (minimum index) per occupied voxel of size ``eps_next``."""
    members = np.asarray(members, dtype=np.int64)
    order = np.argsort(members, kind="stable")
    sorted_members = members[order]
    keys = voxel_keys(positions[sorted_members], eps_next)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    reps = sorted_members[first]
    member_rep = np.empty_like(members)
    member_rep[order] = reps[inverse.reshape(-1)]
    by_index = np.argsort(reps, kind="stable")
    return LevelBuild(representatives=reps[by_index], member_rep=member_rep, keys=uniq[by_index])


@dataclass
class KappaResult:
    kappa: float  # multiplier relative to the input voxel size
    eps: float  # float32-representable voxel size actually used
    count: int
    unreachable: bool


def search_kappa(
    positions: np.ndarray,
    eps: float,
    target_count: int,
    tol: float = 1e-9,
    max_iter: int = 64,
) -> KappaResult:
    """Find kappa > 1 whose voxel size kappa * eps yields the count closest to target.

    The upper bracket doubles until the count drops to the target, then the
    bracket is bisected. Among every evaluated kappa the closest count wins,
    ties going to the smaller kappa.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    if len(positions) == 0:
        raise ValueError("no members to partition")
    seen: dict[float, tuple[float, int]] = {}

    def count(kappa: float) -> int:
        if kappa not in seen:
            e = _f32_above(kappa * eps, eps)
            seen[kappa] = (e, _count(positions, e))
        return seen[kappa][1]

    lo, hi = 1.0, 2.0
    grow = 0
    while count(hi) > target_count and grow < max_iter:
        lo, hi = hi, hi * 2.0
        grow += 1
    over = count(hi) > target_count
    if not over:
        for _ in range(max_iter):
            if hi - lo <= tol * hi:
                break
            mid = 0.5 * (lo + hi)
            c = count(mid)
            if c == target_count:
                break
            if c > target_count:
                lo = mid
            else:
                hi = mid
    best = min(seen, key=lambda k: (abs(seen[k][1] - target_count), k))
    e, c = seen[best]
    under = max(c for _, c in seen.values()) < target_count
    return KappaResult(kappa=best, eps=e, count=c, unreachable=over or under)


def default_eps0(positions: np.ndarray) -> float:
    """Median nearest-neighbour distance, as float32 (1.0 for degenerate scenes)."""
    from scipy.spatial import cKDTree

    if len(positions) < 2:
        return 1.0
    d, _ = cKDTree(positions).query(positions, k=2)
    nn = d[:, 1]
    nn = nn[nn > 0]
    if len(nn) == 0:
        return 1.0
    return float(np.float32(np.median(nn)))


def partition(scene: AnchorScene, cfg: PartitionConfig = PartitionConfig()) -> LevelPartition:
    n = len(scene)
    positions = scene.positions
    eps0 = float(np.float32(cfg.eps0 if cfg.eps0 is not None else default_eps0(positions)))
    K = cfg.levels
    level_of = np.zeros(n, dtype=np.int64)
    parent_of = np.full(n, -1, dtype=np.int64)
    eps = [eps0]
    warnings: list[str] = []
    hats = [np.arange(n, dtype=np.int64)]
    builds: list[LevelBuild] = []
    for k in range(1, K):
        members = hats[-1]
        if len(members) == 0:
            eps.append(_f32_above(2.0 * eps[-1], eps[-1]))
            builds.append(LevelBuild(members, members, np.zeros((0, 3), dtype=np.int64)))
            hats.append(members)
            continue
        target = max(1, int(np.floor(cfg.tau * len(members) + 0.5)))
        res = search_kappa(positions[members], eps[-1], target, cfg.tol, cfg.max_iter)
        if res.unreachable:
            msg = f"level {k}: target {target} unreachable, using count {res.count}"
            warnings.append(msg)
            logger.warning(msg)
        eps.append(res.eps)
        build = build_level(members, res.eps, positions)
        builds.append(build)
        hats.append(build.representatives)
    for k in range(1, K):
        level_of[hats[k]] = k
    for k in range(K - 1):
        sel = level_of[hats[k]] == k
        parent_of[hats[k][sel]] = builds[k].member_rep[sel]
    level_counts = [int((level_of == k).sum()) for k in range(K)]
    return LevelPartition(
        levels=K,
        eps=eps,
        kappa=[e / eps0 for e in eps],
        level_of=level_of,
        parent_of=parent_of,
        level_counts=level_counts,
        hat_counts=[len(h) for h in hats],
        warnings=warnings,
    )


def rebuild_partition(positions: np.ndarray, level_of: np.ndarray, eps: list[float]) -> LevelPartition:
    """Recover parent links from positions, level ids and stored voxel sizes.

    Raises ``ValueError`` if the inputs are inconsistent with a valid partition.
    """
    K = len(eps)
    n = len(positions)
    level_of = np.asarray(level_of, dtype=np.int64)
    parent_of = np.full(n, -1, dtype=np.int64)
    for k in range(K - 1):
        upper = np.flatnonzero(level_of > k)
        lower = np.flatnonzero(level_of == k)
        upper_keys = voxel_keys(positions[upper], eps[k + 1])
        if len(np.unique(upper_keys, axis=0)) != len(upper):
            raise ValueError(f"level {k + 1} has two anchors in one voxel")
        if len(lower) == 0:
            continue
        lower_keys = voxel_keys(positions[lower], eps[k + 1])
        uniq, inv = np.unique(np.concatenate([upper_keys, lower_keys]), axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        owner = np.full(len(uniq), -1, dtype=np.int64)
        owner[inv[: len(upper)]] = upper
        parents = owner[inv[len(upper):]]
        if (parents < 0).any():
            raise ValueError(f"level {k} anchor without a parent voxel")
        parent_of[lower] = parents
    counts = [int((level_of == k).sum()) for k in range(K)]
    return LevelPartition(
        levels=K,
        eps=[float(e) for e in eps],
        kappa=[float(e) / float(eps[0]) for e in eps],
        level_of=level_of,
        parent_of=parent_of,
        level_counts=counts,
        hat_counts=[int((level_of >= k).sum()) for k in range(K)],
    )


def coding_order(part: LevelPartition) -> list[np.ndarray]:
    """Anchor index lists from the coarsest level to the finest."""
    return [part.members(k) for k in range(part.levels - 1, -1, -1)]
