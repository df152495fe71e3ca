"""Anchor scene data model, PLY I/O and analysis helpers."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

DEFAULT_FEATURE_DIM = 50
DEFAULT_SCALING_DIM = 3
DEFAULT_N_OFFSETS = 10

FEATURE_PREFIX = "f_anchor_feat_"
SCALING_PREFIX = "scale_"
OFFSET_PREFIX = "f_offset_"
MASK_PREFIX = "mask_"

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class SceneError(ValueError):
    """Base class for malformed scene data."""


class MissingPropertyError(SceneError):
    def __init__(self, name: str):
        super().__init__(f"missing property {name!r}")
        self.name = name


class DataValidationError(SceneError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class SceneConfig:
    feature_dim: int = DEFAULT_FEATURE_DIM
    scaling_dim: int = DEFAULT_SCALING_DIM
    n_offsets: int = DEFAULT_N_OFFSETS
    has_masks: bool = False

    @property
    def n_channels(self) -> int:
        """Number of entropy-coded scalars per anchor (feature, scaling, offsets)."""
        return self.feature_dim + self.scaling_dim + 3 * self.n_offsets


@dataclass(frozen=True)
class Anchor:
    position: np.ndarray
    feature: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray
    mask: np.ndarray | None = None


def _rows(arr, n: int) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    return arr if arr.ndim == 2 and len(arr) == n else arr.reshape(n, -1)


@dataclass
class AnchorScene:
    """Column-oriented anchor set.

    Arrays are float64 in memory; on disk every scalar is float32.
    ``offsets`` has shape ``(N, n_offsets, 3)`` and ``masks`` (when present)
    ``(N, n_offsets)`` of bools.
    """

    positions: np.ndarray
    features: np.ndarray
    scaling: np.ndarray
    offsets: np.ndarray
    masks: np.ndarray | None = None
    bbox_min: np.ndarray = field(default=None)
    bbox_max: np.ndarray = field(default=None)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.features = _rows(self.features, n)
        self.scaling = _rows(self.scaling, n)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        if offsets.ndim != 3 or offsets.shape[-1] != 3:
            offsets = offsets.reshape(n, -1, 3)
        self.offsets = offsets
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool).reshape(n, self.offsets.shape[1])
        if self.bbox_min is None or self.bbox_max is None:
            self.bbox_min, self.bbox_max = compute_bbox(self.positions)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def config(self) -> SceneConfig:
        return SceneConfig(
            feature_dim=self.features.shape[1],
            scaling_dim=self.scaling.shape[1],
            n_offsets=self.offsets.shape[1],
            has_masks=self.masks is not None,
        )

    def anchor(self, i: int) -> Anchor:
        return Anchor(
            position=self.positions[i],
            feature=self.features[i],
            scaling=self.scaling[i],
            offsets=self.offsets[i],
            mask=None if self.masks is None else self.masks[i],
        )

    def offset_mask(self) -> np.ndarray:
        """(N, n_offsets) bool mask; all True for mask-less scenes."""
        if self.masks is None:
            return np.ones(self.offsets.shape[:2], dtype=bool)
        return self.masks

    def attributes(self) -> np.ndarray:
        """(N, C) matrix of coded channels: feature | scaling | offsets (row-major)."""
        n = len(self)
        return np.concatenate(
            [self.features, self.scaling, self.offsets.reshape(n, 3 * self.offsets.shape[1])], axis=1
        )

    def channel_mask(self) -> np.ndarray:
        """(N, C) bool matrix marking channels that are actually coded."""
        n = len(self)
        head = np.ones((n, self.features.shape[1] + self.scaling.shape[1]), dtype=bool)
        return np.concatenate([head, np.repeat(self.offset_mask(), 3, axis=1)], axis=1)

    def with_attributes(self, attrs: np.ndarray) -> "AnchorScene":
        """Copy of this scene with feature/scaling/offsets replaced by ``attrs``."""
        cfg = self.config
        attrs = np.asarray(attrs, dtype=np.float64)
        d0, d1 = cfg.feature_dim, cfg.feature_dim + cfg.scaling_dim
        return AnchorScene(
            positions=self.positions.copy(),
            features=attrs[:, :d0].copy(),
            scaling=attrs[:, d0:d1].copy(),
            offsets=attrs[:, d1:].reshape(len(self), cfg.n_offsets, 3).copy(),
            masks=None if self.masks is None else self.masks.copy(),
            bbox_min=self.bbox_min.copy(),
            bbox_max=self.bbox_max.copy(),
        )

    def validate(self) -> None:
        if not len(self):
            return
        for name in ("positions", "features", "scaling", "offsets"):
            arr = getattr(self, name).reshape(len(self), -1)
            bad = ~np.isfinite(arr).all(axis=1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DataValidationError(f"non-finite {name} value at anchor {i}", index=i)
        if len(self) and (
            (self.positions < self.bbox_min).any() or (self.positions > self.bbox_max).any()
        ):
            raise DataValidationError("anchor position outside bounding box")


def compute_bbox(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(positions) == 0:
        return np.zeros(3), np.zeros(3)
    return positions.min(axis=0), positions.max(axis=0)


def empty_scene(config: SceneConfig = SceneConfig()) -> AnchorScene:
    return AnchorScene(
        positions=np.zeros((0, 3)),
        features=np.zeros((0, config.feature_dim)),
        scaling=np.zeros((0, config.scaling_dim)),
        offsets=np.zeros((0, config.n_offsets, 3)),
        masks=np.zeros((0, config.n_offsets), dtype=bool) if config.has_masks else None,
    )


def _bits(arr: np.ndarray) -> np.ndarray:
    """float32 bit patterns of each row, as uint32 columns."""
    return np.ascontiguousarray(arr, dtype=np.float32).view(np.uint32)


def canonical_order(scene: AnchorScene) -> np.ndarray:
    """Permutation sorting anchors by (x, y, z), ties by the anchor's full bit pattern."""
    n = len(scene)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    tie = [_bits(scene.positions), _bits(scene.features), _bits(scene.scaling),
           _bits(scene.offsets.reshape(n, -1))]
    if scene.masks is not None:
        tie.append(scene.masks.astype(np.uint32))
    tie_cols = np.concatenate(tie, axis=1)
    # np.lexsort: last key is primary
    keys = [tie_cols[:, j] for j in range(tie_cols.shape[1] - 1, -1, -1)]
    keys += [scene.positions[:, 2], scene.positions[:, 1], scene.positions[:, 0]]
    return np.lexsort(keys)


def reorder(scene: AnchorScene, perm: np.ndarray) -> AnchorScene:
    return AnchorScene(
        positions=scene.positions[perm],
        features=scene.features[perm],
        scaling=scene.scaling[perm],
        offsets=scene.offsets[perm],
        masks=None if scene.masks is None else scene.masks[perm],
        bbox_min=scene.bbox_min,
        bbox_max=scene.bbox_max,
    )


def canonicalize(scene: AnchorScene) -> AnchorScene:
    return reorder(scene, canonical_order(scene))


def scenes_identical(a: AnchorScene, b: AnchorScene) -> bool:
    """Bit-exact comparison of every array, masks included."""
    if (a.masks is None) != (b.masks is None):
        return False
    pairs = [(a.positions, b.positions), (a.features, b.features), (a.scaling, b.scaling),
             (a.offsets, b.offsets), (a.bbox_min, b.bbox_min), (a.bbox_max, b.bbox_max)]
    if a.masks is not None:
        pairs.append((a.masks, b.masks))
    return all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs)


# --------------------------------------------------------------------------- PLY


def _read_header(fh) -> tuple[int, list[tuple[str, str]], str]:
    first = fh.readline().strip()
    if first != b"ply":
        raise SceneError("not a PLY file")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = fh.readline()
        if not line:
            raise SceneError("unterminated PLY header")
        tokens = line.decode("ascii").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif count is None:
                raise SceneError(f"unsupported element {tokens[1]!r} before vertex")
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise SceneError("list properties are not supported")
            if tokens[1] not in _PLY_TYPES:
                raise SceneError(f"unknown property type {tokens[1]!r}")
            props.append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("binary_little_endian", "binary_big_endian"):
        raise SceneError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise SceneError("PLY file has no vertex element")
    return count, props, "<" if fmt == "binary_little_endian" else ">"


def _resolve(name: str, mapping: Mapping[str, str]) -> str:
    """Map a default property name to the file's name (exact or prefix match)."""
    if name in mapping:
        return mapping[name]
    m = re.match(r"(.*_)(\d+)$", name)
    if m and m.group(1) in mapping:
        return mapping[m.group(1)] + m.group(2)
    return name


def _indexed(prefix: str, names: set[str], mapping: Mapping[str, str]) -> int:
    n = 0
    while _resolve(f"{prefix}{n}", mapping) in names:
        n += 1
    return n


def load_scene(path, mapping: Mapping[str, str] | None = None) -> AnchorScene:
    """Read a binary PLY anchor file and return it in canonical anchor order.

    ``mapping`` renames default properties (``x``, ``f_anchor_feat_3``) or
    whole indexed prefixes (``{"f_anchor_feat_": "feat_"}``) to the names used
    in the file.
    """
    mapping = dict(mapping or {})
    with open(path, "rb") as fh:
        count, props, endian = _read_header(fh)
        dtype = np.dtype([(name, endian + t) for name, t in props])
        raw = fh.read(count * dtype.itemsize)
    if len(raw) < count * dtype.itemsize:
        raise SceneError(f"PLY body truncated: expected {count} vertices")
    data = np.frombuffer(raw, dtype=dtype, count=count)
    names = set(dtype.names or ())

    def column(name: str) -> np.ndarray:
        fname = _resolve(name, mapping)
        if fname not in names:
            raise MissingPropertyError(fname)
        return data[fname].astype(np.float64)

    def block(prefix: str, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros((count, 0))
        return np.stack([column(f"{prefix}{i}") for i in range(n)], axis=1)

    positions = np.stack([column(c) for c in "xyz"], axis=1) if count or names else np.zeros((0, 3))
    n_feat = _indexed(FEATURE_PREFIX, names, mapping)
    n_scale = _indexed(SCALING_PREFIX, names, mapping)
    n_off3 = _indexed(OFFSET_PREFIX, names, mapping)
    if n_feat == 0:
        raise MissingPropertyError(_resolve(FEATURE_PREFIX + "0", mapping))
    if n_scale == 0:
        raise MissingPropertyError(_resolve(SCALING_PREFIX + "0", mapping))
    if n_off3 % 3:
        raise MissingPropertyError(_resolve(f"{OFFSET_PREFIX}{n_off3 - n_off3 % 3 + 3 - 1}", mapping))
    k_off = n_off3 // 3
    n_mask = _indexed(MASK_PREFIX, names, mapping)
    if n_mask not in (0, k_off):
        raise MissingPropertyError(_resolve(f"{MASK_PREFIX}{n_mask}", mapping))

    # offsets are stored component-major: f_offset_{c * k_off + i}
    offsets = block(OFFSET_PREFIX, n_off3).reshape(count, 3, k_off).transpose(0, 2, 1)
    masks = None
    if n_mask:
        masks = np.stack(
            [data[_resolve(f"{MASK_PREFIX}{i}", mapping)] for i in range(k_off)], axis=1
        ) != 0

    scene = AnchorScene(
        positions=positions,
        features=block(FEATURE_PREFIX, n_feat),
        scaling=block(SCALING_PREFIX, n_scale),
        offsets=offsets,
        masks=masks,
        bbox_min=np.zeros(3),
        bbox_max=np.zeros(3),
    )
    for name in ("positions", "features", "scaling", "offsets"):
        arr = getattr(scene, name).reshape(count, int(np.prod(getattr(scene, name).shape[1:])))
        bad = ~np.isfinite(arr).all(axis=1)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataValidationError(f"non-finite {name} value at anchor {i}", index=i)
    scene.bbox_min, scene.bbox_max = compute_bbox(scene.positions)
    return canonicalize(scene)


def ply_property_names(config: SceneConfig) -> list[tuple[str, str]]:
    """Default (name, ply-type) list written by :func:`save_scene`."""
    props = [(c, "float") for c in "xyz"]
    props += [(f"{FEATURE_PREFIX}{i}", "float") for i in range(config.feature_dim)]
    props += [(f"{SCALING_PREFIX}{i}", "float") for i in range(config.scaling_dim)]
    props += [(f"{OFFSET_PREFIX}{i}", "float") for i in range(3 * config.n_offsets)]
    if config.has_masks:
        props += [(f"{MASK_PREFIX}{i}", "uchar") for i in range(config.n_offsets)]
    return props


def save_scene(scene: AnchorScene, path) -> None:
    cfg = scene.config
    props = ply_property_names(cfg)
    dtype = np.dtype([(name, "<f4" if t == "float" else "u1") for name, t in props])
    n = len(scene)
    rec = np.zeros(n, dtype=dtype)
    for i, c in enumerate("xyz"):
        rec[c] = scene.positions[:, i]
    for i in range(cfg.feature_dim):
        rec[f"{FEATURE_PREFIX}{i}"] = scene.features[:, i]
    for i in range(cfg.scaling_dim):
        rec[f"{SCALING_PREFIX}{i}"] = scene.scaling[:, i]
    comp_major = scene.offsets.transpose(0, 2, 1).reshape(n, 3 * cfg.n_offsets)
    for i in range(3 * cfg.n_offsets):
        rec[f"{OFFSET_PREFIX}{i}"] = comp_major[:, i]
    if cfg.has_masks:
        for i in range(cfg.n_offsets):
            rec[f"{MASK_PREFIX}{i}"] = scene.masks[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for name, t in props]
    header.append("end_header")
    with open(Path(path), "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------- analysis


def spawn_positions(anchor: Anchor) -> np.ndarray:
    """Neural-Gaussian centres ``x + O_i * l`` (elementwise), shape (k_off, 3)."""
    x = np.asarray(anchor.position, dtype=np.float64)
    l = np.asarray(anchor.scaling, dtype=np.float64)
    offsets = np.asarray(anchor.offsets, dtype=np.float64)
    if x.shape != (3,) or l.shape != (3,) or offsets.ndim != 2 or offsets.shape[1] != 3:
        raise ValueError(
            f"dimension mismatch: position {x.shape}, scaling {l.shape}, offsets {offsets.shape}"
        )
    return x + offsets * l


@dataclass
class SimilarityReport:
    """Cosine similarity between anchor features and their parents' features."""

    bin_edges: np.ndarray
    histograms: dict[tuple[int, int], np.ndarray]
    sums: dict[tuple[int, int], float]
    counts: dict[tuple[int, int], int]
    skipped_zero_norm: int = 0

    def mean(self, key: tuple[int, int] | None = None) -> float:
        if key is not None:
            return self.sums[key] / self.counts[key] if self.counts.get(key) else float("nan")
        total = sum(self.counts.values())
        return sum(self.sums.values()) / total if total else float("nan")

    def to_rows(self) -> list[dict]:
        rows = []
        for key in sorted(self.histograms):
            rows.append({
                "level": key[0],
                "parent_level": key[1],
                "pairs": self.counts[key],
                "mean_cosine": self.mean(key),
                "histogram": self.histograms[key].tolist(),
            })
        return rows


def similarity_report(scene: AnchorScene, partition, bins: int = 20) -> SimilarityReport:
    edges = np.linspace(-1.0, 1.0, bins + 1)
    child = np.flatnonzero(partition.parent_of >= 0)
    parent = partition.parent_of[child]
    a = scene.features[child]
    b = scene.features[parent]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    cos = np.zeros(len(child))
    cos[ok] = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    cos = np.clip(cos, -1.0, 1.0)
    levels = partition.level_of[child]
    plevels = partition.level_of[parent]
    report = SimilarityReport(bin_edges=edges, histograms={}, sums={}, counts={},
                              skipped_zero_norm=int((~ok).sum()))
    for key in sorted(set(zip(levels[ok].tolist(), plevels[ok].tolist()))):
        sel = ok & (levels == key[0]) & (plevels == key[1])
        report.histograms[key] = np.histogram(cos[sel], bins=edges)[0]
        report.sums[key] = float(cos[sel].sum())
        report.counts[key] = int(sel.sum())
    return report
