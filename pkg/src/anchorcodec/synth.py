"""Seeded synthetic anchor scenes for tests, demos and benchmarks.

``grid`` and ``clustered`` carry i.i.d. attributes. ``correlated`` plants
parent-child structure along the level partition: every child's feature and
scaling vectors are ``rho * parent + sqrt(1 - rho**2) * s_i * noise``, where
the per-anchor scale ``s_i`` (log-normal, unit mean square) is the kind of
side information a hyperprior can pick up.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .partition import PartitionConfig, partition
from .scene import AnchorScene, canonicalize

KINDS = ("grid", "clustered", "correlated")


@dataclass
class SynthConfig:
    kind: str = "correlated"
    n_anchors: int = 1000
    seed: int = 0
    rho: float = 0.95
    feature_dim: int = 50
    scaling_dim: int = 3
    n_offsets: int = 10
    feature_std: float = 10.0
    scaling_mean: float = -3.0
    scaling_std: float = 0.3
    offset_std: float = 0.05
    scale_spread: float = 0.7  # std of log s_i
    mask_fraction: float = 0.1
    extent: float = 10.0
    clusters: int = 8
    levels: int = 3
    tau: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}; choose from {', '.join(KINDS)}")
        if self.n_anchors < 0:
            raise ValueError("n_anchors must be >= 0")
        if self.kind == "grid" and round(self.n_anchors ** (1.0 / 3.0)) ** 3 != self.n_anchors:
            raise ValueError(f"grid scenes need a cube number of anchors, got {self.n_anchors}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def _positions(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_anchors
    if cfg.kind == "grid":
        side = round(n ** (1.0 / 3.0))
        ax = np.arange(side, dtype=np.float64)
        return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    if cfg.kind == "clustered":
        centres = rng.uniform(0.0, cfg.extent, size=(max(cfg.clusters, 1), 3))
        which = rng.integers(len(centres), size=n)
        pts = centres[which] + rng.normal(0.0, cfg.extent / 20.0, size=(n, 3))
    else:
        pts = rng.uniform(0.0, cfg.extent, size=(n, 3))
    # distinct float32 positions keep the partition well defined
    pts = _f32(pts)
    _, first = np.unique(pts, axis=0, return_index=True)
    while len(first) < n:
        dup = np.setdiff1d(np.arange(n), first)
        pts[dup] = _f32(pts[dup] + rng.uniform(-1e-3, 1e-3, size=(len(dup), 3)))
        _, first = np.unique(pts, axis=0, return_index=True)
    return pts


def _plant(values: np.ndarray, part, rho: float, scale: np.ndarray, mean: float,
           std: float) -> np.ndarray:
    """Overwrite ``values`` (standard normal draws) top-down along the partition."""
    out = mean + std * scale[:, None] * values
    w = np.sqrt(1.0 - rho * rho)
    for k in range(part.levels - 2, -1, -1):
        kids = part.members(k)
        parents = part.parent_of[kids]
        out[kids] = mean + rho * (out[parents] - mean) + w * std * scale[kids, None] * values[kids]
    return out


def synthesize(cfg: SynthConfig) -> AnchorScene:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_anchors
    pos = _positions(cfg, rng)
    feats = rng.standard_normal((n, cfg.feature_dim))
    scal = rng.standard_normal((n, cfg.scaling_dim))
    offs = rng.normal(0.0, cfg.offset_std, size=(n, cfg.n_offsets, 3))
    masks = rng.random((n, cfg.n_offsets)) >= cfg.mask_fraction
    log_s = rng.normal(0.0, cfg.scale_spread, size=n)
    scale = np.exp(log_s - cfg.scale_spread ** 2)  # E[s^2] = 1
    if cfg.kind == "correlated" and n:
        draft = canonicalize(AnchorScene(pos, feats, scal, offs, masks))
        part = partition(draft, PartitionConfig(levels=cfg.levels, tau=cfg.tau))
        feats = _plant(draft.features, part, cfg.rho, scale, 0.0, cfg.feature_std)
        scal = _plant(draft.scaling, part, cfg.rho, scale, cfg.scaling_mean, cfg.scaling_std)
        pos, offs, masks = draft.positions, draft.offsets, draft.masks
    else:
        feats = cfg.feature_std * feats
        scal = cfg.scaling_mean + cfg.scaling_std * scal
    scene = AnchorScene(pos, _f32(feats), _f32(scal), _f32(offs), masks)
    return canonicalize(scene)
