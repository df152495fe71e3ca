"""CGSC bitstream: end-to-end encode/decode of an anchor scene.

See docs/bitstream.md for the byte layout.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .entropy import EntropyModel, SequencingError, normalize_positions
from .modelio import ModelFormatError, model_from_bytes, model_to_bytes
from .partition import LevelPartition, rebuild_partition
from .plan import full_plan
from .rangecoder import RangeCoderError, RangeDecoder, RangeEncoder
from .rate import RateBreakdown, code_pass, stage_params
from .scene import AnchorScene
from .tables import decode_values, encode_values, factorized_tables, gaussian_tables

MAGIC = b"CGSC"
VERSION = 1
FLAG_MODEL_EMBEDDED = 1
FLAG_HAS_MASKS = 2

_HEADER_FMT = "<4sHHIB5H"


class CodecError(ValueError):
    pass


class CRCError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class Section(IntEnum):
    POSITIONS = 1
    MASKS = 2
    MODEL = 3
    HYPER = 4
    FEATURE = 5
    SCALING = 6
    OFFSETS = 7


GROUP_SECTIONS = {"feature": Section.FEATURE, "scaling": Section.SCALING,
                  "offsets": Section.OFFSETS}


@dataclass
class SectionInfo:
    kind: Section
    level: int
    length: int


@dataclass
class Bitstream:
    data: bytes
    reconstruction: AnchorScene | None = None
    estimate: RateBreakdown | None = None
    sections: list[SectionInfo] = field(default_factory=list)

    def payload_bytes(self) -> int:
        """Bytes of the entropy-coded sections (hyperprior and attributes)."""
        return sum(s.length for s in self.sections
                   if s.kind in (Section.HYPER, *GROUP_SECTIONS.values()))


def _f32_exact(arr: np.ndarray) -> bool:
    return bool(np.array_equal(arr.astype(np.float32).astype(np.float64), arr))


def _pack_header(scene: AnchorScene, part: LevelPartition, model: EntropyModel,
                 flags: int) -> bytes:
    cfg = model.config
    out = bytearray(struct.pack(_HEADER_FMT, MAGIC, VERSION, flags, len(scene), part.levels,
                                cfg.feature_dim, cfg.scaling_dim, cfg.n_offsets,
                                cfg.hyper_dim, cfg.hidden))
    out += struct.pack(f"<{part.levels}f", *part.eps)
    out += struct.pack(f"<{part.levels}I", *part.level_counts)
    out += struct.pack("<6f", *scene.bbox_min, *scene.bbox_max)
    out += struct.pack("<3f", *cfg.delta0)
    return bytes(out)


def _attribute_streams(stage_items, symbols, ratios, cmask_rows, group_slices):
    """Per group: flat symbols and bin-width ratios in stream order."""
    out = {}
    for name, sl in group_slices.items():
        m = cmask_rows[:, sl]
        out[name] = (symbols[stage_items][:, sl][m], ratios[:, sl][m])
    return out


def encode_scene(scene: AnchorScene, part: LevelPartition, model: EntropyModel,
                 embed_model: bool = True) -> Bitstream:
    """Encode ``scene`` (canonical order) under ``part`` with ``model``.

    The model is rounded to float32 first, exactly as the decoder will see it.
    """
    scene.validate()
    if len(part.level_of) != len(scene):
        raise CodecError("partition does not belong to this scene")
    if not _f32_exact(scene.positions):
        raise CodecError("positions must be float32-representable (they are stored raw)")
    cfg = model.config
    sc = scene.config
    if (cfg.feature_dim, cfg.scaling_dim, cfg.n_offsets) != (
            sc.feature_dim, sc.scaling_dim, sc.n_offsets):
        raise CodecError("model dimensions do not match the scene")
    if cfg.levels != part.levels:
        raise CodecError(f"model has {cfg.levels} level nets, partition has {part.levels} levels")
    model = model.as_stored()
    scene = AnchorScene(scene.positions, scene.features, scene.scaling, scene.offsets,
                        scene.masks, scene.bbox_min.astype(np.float32).astype(np.float64),
                        scene.bbox_max.astype(np.float32).astype(np.float64))
    plan = full_plan(part)
    code = code_pass(model, scene, plan)
    order = np.concatenate([s.anchors for s in plan.stages]).astype(np.int64)
    cmask = scene.channel_mask()

    sections: list[tuple[Section, int, bytes]] = []
    sections.append((Section.POSITIONS, 0,
                     scene.positions[order].astype("<f4").tobytes()))
    if scene.masks is not None:
        bits = np.packbits(scene.masks[order].reshape(-1), bitorder="little")
        sections.append((Section.MASKS, 0, bits.tobytes()))
    if embed_model:
        sections.append((Section.MODEL, 0, model_to_bytes(model)))
    if cfg.hyper_dim:
        rows, lows = factorized_tables(model.hyper.prior)
        enc = RangeEncoder()
        zsym = code.zhat[order].astype(np.int64)
        n_items = len(order)
        encode_values(enc, zsym.reshape(-1), rows * n_items, np.tile(lows, n_items))
        sections.append((Section.HYPER, 0, enc.finish()))
    for stage, start, (mu, sigma, delta) in zip(plan.stages, plan.starts(), code.params):
        items = np.arange(start, start + len(stage.anchors))
        streams = _attribute_streams(items, code.symbols, delta / sigma, cmask[stage.anchors],
                                     cfg.group_slices())
        for name, (values, ratios) in streams.items():
            enc = RangeEncoder()
            pos = 0
            for rows, lows in gaussian_tables(ratios):
                encode_values(enc, values[pos:pos + len(rows)], rows, lows)
                pos += len(rows)
            sections.append((GROUP_SECTIONS[name], stage.net, enc.finish()))

    flags = (FLAG_MODEL_EMBEDDED if embed_model else 0) | (
        FLAG_HAS_MASKS if scene.masks is not None else 0)
    out = bytearray(_pack_header(scene, part, model, flags))
    out += struct.pack("<H", len(sections))
    for kind, level, payload in sections:
        out += struct.pack("<BBQ", int(kind), level, len(payload))
    for _, _, payload in sections:
        out += payload
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)

    recon_attrs = np.zeros((len(scene), cfg.n_channels))
    recon_attrs[order] = code.dequantized
    recon = scene.with_attributes(recon_attrs)
    infos = [SectionInfo(k, lvl, len(p)) for k, lvl, p in sections]
    return Bitstream(bytes(out), recon, code.rate, infos)


# ------------------------------------------------------------------ decode


class _Reader:
    """Forward-only reader; decoding can never look at bytes not yet reached."""

    def __init__(self, data: bytes, end: int):
        self.data = memoryview(data)
        self.pos = 0
        self.end = end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError(f"stream truncated at byte {self.pos} (need {n} more)")
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


@dataclass
class Header:
    version: int
    flags: int
    n_anchors: int
    levels: int
    feature_dim: int
    scaling_dim: int
    n_offsets: int
    hyper_dim: int
    hidden: int
    eps: list[float]
    level_counts: list[int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    delta0: tuple[float, float, float]
    sections: list[SectionInfo]
    header_bytes: int


def _check_crc(data: bytes) -> None:
    if len(data) < 4:
        raise TruncatedError("stream shorter than its checksum")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise CRCError("CRC-32 mismatch: stream is corrupt")


def read_header(data: bytes, check_crc: bool = True) -> tuple[Header, _Reader]:
    if check_crc:
        _check_crc(data)
    rd = _Reader(data, len(data) - 4)
    magic, version, flags, n, levels, f_dim, s_dim, k_off, z_dim, hidden = rd.unpack(_HEADER_FMT)
    if magic != MAGIC:
        raise CodecError("not a CGSC stream")
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    eps = [float(v) for v in rd.unpack(f"<{levels}f")]
    counts = list(rd.unpack(f"<{levels}I"))
    bbox = np.array(rd.unpack("<6f"), dtype=np.float64)
    delta0 = tuple(float(v) for v in rd.unpack("<3f"))
    (n_sections,) = rd.unpack("<H")
    sections = []
    for _ in range(n_sections):
        kind, level, length = rd.unpack("<BBQ")
        sections.append(SectionInfo(Section(kind), level, length))
    if sum(counts) != n:
        raise CodecError("level counts do not add up to the anchor count")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise CodecError("voxel sizes are not strictly increasing")
    header = Header(version, flags, n, levels, f_dim, s_dim, k_off, z_dim, hidden, eps, counts,
                    bbox[:3], bbox[3:], delta0, sections, rd.pos)
    return header, rd


def decode_scene(data: bytes, model: EntropyModel | None = None
                 ) -> tuple[AnchorScene, LevelPartition]:
    """Decode a CGSC stream into the dequantized scene and its partition."""
    hdr, rd = read_header(data)
    n, K = hdr.n_anchors, hdr.levels
    sections = list(hdr.sections)

    def next_section(kind: Section) -> bytes:
        if not sections or sections[0].kind != kind:
            raise CodecError(f"expected {kind.name} section")
        return rd.take(sections.pop(0).length)

    # positions, grouped coarse -> fine, canonical order within a level
    pos_flat = np.frombuffer(next_section(Section.POSITIONS), dtype="<f4")
    if len(pos_flat) != 3 * n:
        raise CodecError("position section has the wrong size")
    stored_pos = pos_flat.astype(np.float64).reshape(n, 3)
    stored_level = np.concatenate(
        [np.full(hdr.level_counts[k], k, dtype=np.int64) for k in range(K - 1, -1, -1)])
    within = np.concatenate([np.arange(hdr.level_counts[k]) for k in range(K - 1, -1, -1)])
    perm = np.lexsort((within, -stored_level, stored_pos[:, 2], stored_pos[:, 1],
                       stored_pos[:, 0]))
    item_anchor = np.empty(n, dtype=np.int64)
    item_anchor[perm] = np.arange(n)
    positions = stored_pos[perm]
    level_of = stored_level[perm]
    try:
        part = rebuild_partition(positions, level_of, hdr.eps)
    except ValueError as exc:
        raise CodecError(f"inconsistent partition data: {exc}") from exc
    plan = full_plan(part)
    if not all(np.array_equal(item_anchor[s:s + len(st.anchors)], st.anchors)
               for st, s in zip(plan.stages, plan.starts())):
        raise SequencingError("stored position order disagrees with the coding order")

    masks = None
    if hdr.flags & FLAG_HAS_MASKS:
        raw = np.frombuffer(next_section(Section.MASKS), dtype=np.uint8)
        bits = np.unpackbits(raw, bitorder="little")[: n * hdr.n_offsets].astype(bool)
        if len(bits) != n * hdr.n_offsets:
            raise CodecError("mask section too short")
        masks = np.zeros((n, hdr.n_offsets), dtype=bool)
        masks[item_anchor] = bits.reshape(n, hdr.n_offsets)

    if hdr.flags & FLAG_MODEL_EMBEDDED:
        try:
            model = model_from_bytes(next_section(Section.MODEL), n_anchors=n)
        except ModelFormatError as exc:
            raise CodecError(f"bad embedded model: {exc}") from exc
    elif model is None:
        raise CodecError("stream has no embedded model and none was supplied")
    else:
        model = model.as_stored()
    cfg = model.config
    if (cfg.feature_dim, cfg.scaling_dim, cfg.n_offsets, cfg.hyper_dim, cfg.levels) != (
            hdr.feature_dim, hdr.scaling_dim, hdr.n_offsets, hdr.hyper_dim, K):
        raise CodecError("model configuration disagrees with the stream header")

    shell = AnchorScene(positions, np.zeros((n, cfg.feature_dim)),
                        np.zeros((n, cfg.scaling_dim)), np.zeros((n, cfg.n_offsets, 3)),
                        masks, hdr.bbox_min, hdr.bbox_max)
    cmask = shell.channel_mask()
    xnorm = normalize_positions(positions, hdr.bbox_min, hdr.bbox_max)

    try:
        zhat = np.zeros((n, cfg.hyper_dim))
        if cfg.hyper_dim:
            rows, lows = factorized_tables(model.hyper.prior)
            dec = RangeDecoder(next_section(Section.HYPER))
            vals = decode_values(dec, rows * n, np.tile(lows, n))
            zhat[item_anchor] = np.asarray(vals, dtype=np.float64).reshape(n, cfg.hyper_dim)

        deq = np.zeros((n, cfg.n_channels))
        decoded = np.zeros(n, dtype=bool)
        for stage in plan.stages:
            a = stage.anchors
            prow = None
            if stage.parents is not None:
                parents = part.parent_of[a]
                if not decoded[parents].all():
                    raise SequencingError("parent referenced before it was decoded")
                prow = deq[parents, :cfg.parent_dim]
            mu, sigma, delta = stage_params(model, stage.net, zhat[a], prow, xnorm[a])
            ratio = delta / sigma
            sym = np.zeros((len(a), cfg.n_channels))
            for name, sl in cfg.group_slices().items():
                m = cmask[a][:, sl]
                dec = RangeDecoder(next_section(GROUP_SECTIONS[name]))
                flat_ratio = ratio[:, sl][m]
                vals: list[int] = []
                pos = 0
                for rows, lows in gaussian_tables(flat_ratio):
                    vals += decode_values(dec, rows, lows)
                    pos += len(rows)
                block = np.zeros(m.shape)
                block[m] = vals
                sym[:, sl] = block
            deq[a] = np.where(cmask[a], mu + sym * delta, 0.0)
            decoded[a] = True
    except RangeCoderError as exc:
        raise CodecError(f"corrupt entropy-coded payload: {exc}") from exc
    if sections:
        raise CodecError("unexpected trailing sections")
    return shell.with_attributes(deq), part


# ------------------------------------------------------------------ report

REPORT_COLUMNS = ("hyper", "position", "feature", "scaling", "offset", "mask", "mlps",
                  "overhead", "total")
_KIND_COLUMN = {Section.HYPER: "hyper", Section.POSITIONS: "position",
                Section.FEATURE: "feature", Section.SCALING: "scaling",
                Section.OFFSETS: "offset", Section.MASKS: "mask", Section.MODEL: "mlps"}


def storage_report(data: bytes) -> dict[str, int]:
    """Bytes per component, in the hyper/position/feature/.../total breakdown.

    ``overhead`` is the header, section table and CRC.
    """
    hdr, _ = read_header(data, check_crc=False)
    out = {c: 0 for c in REPORT_COLUMNS}
    for s in hdr.sections:
        out[_KIND_COLUMN[s.kind]] += s.length
    out["overhead"] = hdr.header_bytes + 4
    out["total"] = len(data)
    return out
