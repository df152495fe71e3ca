"""CGSM model container: context nets, delta0 and factorized prior as float32 arrays."""

from __future__ import annotations

import json
import struct

import numpy as np

from .entropy import MLP, EntropyModel, FactorizedPrior, HyperpriorTable, ModelConfig

MODEL_MAGIC = b"CGSM"
MODEL_VERSION = 1
FLAG_HAS_Z = 1


class ModelFormatError(ValueError):
    pass


def _arrays(model: EntropyModel, include_z: bool):
    for net in model.nets:
        yield from net.params().values()
    if model.config.hyper_dim:
        yield from model.hyper.prior.params().values()
    if include_z:
        yield model.hyper.z


def model_to_bytes(model: EntropyModel, include_z: bool = False) -> bytes:
    cfg = model.config
    out = bytearray(MODEL_MAGIC)
    out += struct.pack("<HH", MODEL_VERSION, FLAG_HAS_Z if include_z else 0)
    out += struct.pack("<6H", cfg.feature_dim, cfg.scaling_dim, cfg.n_offsets,
                       cfg.hyper_dim, cfg.hidden, cfg.levels)
    out += struct.pack("<B", len(cfg.filters)) + bytes(cfg.filters)
    out += struct.pack("<3f", *cfg.delta0)
    meta = json.dumps(model.meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    if include_z:
        out += struct.pack("<I", model.hyper.z.shape[0])
    for arr in _arrays(model, include_z):
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ModelFormatError("model data truncated")
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)


def model_from_bytes(data: bytes, n_anchors: int | None = None) -> EntropyModel:
    cur = _Cursor(data)
    if cur.take(4) != MODEL_MAGIC:
        raise ModelFormatError("bad model magic")
    version, flags = cur.unpack("<HH")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    f_dim, s_dim, k_off, z_dim, hidden, levels = cur.unpack("<6H")
    (n_filters,) = cur.unpack("<B")
    filters = tuple(cur.take(n_filters))
    delta0 = tuple(float(v) for v in cur.unpack("<3f"))
    (meta_len,) = cur.unpack("<I")
    meta = json.loads(cur.take(meta_len).decode("utf-8"))
    cfg = ModelConfig(feature_dim=f_dim, scaling_dim=s_dim, n_offsets=k_off, hyper_dim=z_dim,
                      hidden=hidden, levels=levels, delta0=delta0, filters=filters)
    n_z = cur.unpack("<I")[0] if flags & FLAG_HAS_Z else (n_anchors or 0)
    nets = []
    for level in range(levels):
        n_in = cfg.context_dim(level)
        shapes = [(n_in, hidden), (hidden,), (hidden, hidden), (hidden,),
                  (hidden, 3 * cfg.n_channels), (3 * cfg.n_channels,)]
        nets.append(MLP(*[cur.floats(s) for s in shapes]))
    prior = FactorizedPrior.init(z_dim, filters)
    if z_dim:
        for arr in prior.params().values():
            arr[...] = cur.floats(arr.shape)
    z = cur.floats((n_z, z_dim)) if flags & FLAG_HAS_Z else np.zeros((n_z, z_dim))
    if cur.pos != len(cur.data):
        raise ModelFormatError("trailing bytes after model")
    return EntropyModel(cfg, nets, HyperpriorTable(z, prior), meta)


def save_model(model: EntropyModel, path, include_z: bool = True) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model, include_z))


def load_model(path) -> EntropyModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
