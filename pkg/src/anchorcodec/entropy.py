"""Conditional Gaussian attribute model, factorized hyperprior and their gradients.

Everything is plain numpy in float64. Each forward function returns a cache
that the matching ``*_backward`` consumes; gradients are exact (up to the
clamping kinks at ``P_MIN`` and ``SIGMA_MAX``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
P_MIN = 2.0 ** -15
SYMBOL_MIN = -32768
SYMBOL_MAX = 32767
LN2 = math.log(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

DEFAULT_DELTA0 = (1.0, 0.01, 0.01)  # feature, scaling, offsets
DEFAULT_HIDDEN = 128
DEFAULT_HC = 4


class SymbolOverflowError(ValueError):
    def __init__(self, message: str, anchor: int | None = None, group: str | None = None,
                 channel: int | None = None):
        super().__init__(message)
        self.anchor, self.group, self.channel = anchor, group, channel


class SequencingError(RuntimeError):
    """A context referenced an anchor that has not been decoded yet."""


def round_half_away(x):
    """Round to nearest integer, ties away from zero (float result)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.trunc(x)
    return t + np.where(np.abs(x - t) >= 0.5, np.sign(x), 0.0)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def _phi(x):
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


# ------------------------------------------------------------------ layout


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 50
    scaling_dim: int = 3
    n_offsets: int = 10
    hyper_dim: int = 12
    hidden: int = DEFAULT_HIDDEN
    levels: int = 3
    delta0: tuple[float, float, float] = DEFAULT_DELTA0
    filters: tuple[int, ...] = (3, 3, 3)

    @property
    def n_channels(self) -> int:
        return self.feature_dim + self.scaling_dim + 3 * self.n_offsets

    @property
    def parent_dim(self) -> int:
        return self.feature_dim + self.scaling_dim

    def context_dim(self, level: int) -> int:
        """Context length for a level: [z | parent feature | parent scaling | position]."""
        if level == self.levels - 1:
            return self.hyper_dim + 3
        return self.hyper_dim + self.parent_dim + 3

    def group_slices(self) -> dict[str, slice]:
        d0 = self.feature_dim
        d1 = d0 + self.scaling_dim
        return {"feature": slice(0, d0), "scaling": slice(d0, d1),
                "offsets": slice(d1, self.n_channels)}

    def channel_delta0(self) -> np.ndarray:
        out = np.empty(self.n_channels)
        for value, sl in zip(self.delta0, self.group_slices().values()):
            out[sl] = value
        return out

    @staticmethod
    def hyper_dim_for(feature_dim: int, hc: int = DEFAULT_HC) -> int:
        return feature_dim // hc


# ------------------------------------------------------------------ context


def normalize_positions(positions, bbox_min, bbox_max) -> np.ndarray:
    """Affine map of the bounding box onto [-1, 1]^3 (degenerate axes map to 0)."""
    positions = np.asarray(positions, dtype=np.float64)
    lo = np.asarray(bbox_min, dtype=np.float64)
    extent = np.asarray(bbox_max, dtype=np.float64) - lo
    safe = np.where(extent > 0, extent, 1.0)
    out = 2.0 * (positions - lo) / safe - 1.0
    return np.where(extent > 0, out, 0.0)


@dataclass
class ContextVector:
    values: np.ndarray
    segments: dict[str, slice]


def assemble_context(z_rows, parent_rows, xnorm_rows) -> np.ndarray:
    parts = [np.asarray(z_rows, dtype=np.float64)]
    if parent_rows is not None:
        parts.append(np.asarray(parent_rows, dtype=np.float64))
    parts.append(np.asarray(xnorm_rows, dtype=np.float64))
    return np.concatenate(parts, axis=-1)


def build_context(anchor: int, partition, scene, hyper: "HyperpriorTable", mode: str = "code",
                  decoded_store: dict | None = None, noise=None) -> ContextVector:
    """Context of a single anchor.

    In ``code`` mode the parent's attributes come from ``decoded_store``
    (anchor index -> dequantized attribute row) and ``z`` is rounded; in
    ``train`` mode ``z`` gets the supplied uniform ``noise`` and the parent's
    own attributes are read from ``decoded_store`` as well if given, else
    from the scene.
    """
    cfg_f = scene.features.shape[1] + scene.scaling.shape[1]
    z = hyper.z[anchor]
    if mode == "code":
        zc = round_half_away(z)
    elif mode == "train":
        zc = z + (0.0 if noise is None else np.asarray(noise))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    xnorm = normalize_positions(scene.positions[anchor], scene.bbox_min, scene.bbox_max)
    parent = int(partition.parent_of[anchor])
    dz = len(zc)
    segments = {"z": slice(0, dz)}
    if parent < 0:
        segments["position"] = slice(dz, dz + 3)
        return ContextVector(assemble_context(zc, None, xnorm), segments)
    if decoded_store is not None:
        if parent not in decoded_store:
            raise SequencingError(f"anchor {anchor}: parent {parent} not decoded yet")
        prow = np.asarray(decoded_store[parent])[:cfg_f]
    elif mode == "code":
        raise SequencingError(f"anchor {anchor}: code mode needs decoded parent {parent}")
    else:
        prow = np.concatenate([scene.features[parent], scene.scaling[parent]])
    d_feat = scene.features.shape[1]
    segments["parent_feature"] = slice(dz, dz + d_feat)
    segments["parent_scaling"] = slice(dz + d_feat, dz + cfg_f)
    segments["position"] = slice(dz + cfg_f, dz + cfg_f + 3)
    return ContextVector(assemble_context(zc, prow, xnorm), segments)


# ------------------------------------------------------------------ MLP


@dataclass
class MLP:
    """Two ReLU hidden layers; weights stored (in, out)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, hidden: int, n_out: int,
             out_scale: float = 1.0) -> "MLP":
        def uniform(fan_in, shape, scale=1.0):
            bound = scale / math.sqrt(max(fan_in, 1))
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            w1=uniform(n_in, (n_in, hidden)), b1=np.zeros(hidden),
            w2=uniform(hidden, (hidden, hidden)), b2=np.zeros(hidden),
            w3=uniform(hidden, (hidden, n_out), out_scale), b3=np.zeros(n_out),
        )

    @classmethod
    def zeros(cls, n_in: int, hidden: int, n_out: int) -> "MLP":
        return cls(np.zeros((n_in, hidden)), np.zeros(hidden), np.zeros((hidden, hidden)),
                   np.zeros(hidden), np.zeros((hidden, n_out)), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.w1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"context length {x.shape[-1]} != network input {self.n_in}")
        a1 = x @ self.w1 + self.b1
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ self.w2 + self.b2
        h2 = np.maximum(a2, 0.0)
        out = h2 @ self.w3 + self.b3
        return out, (x, a1, h1, a2, h2)

    def backward(self, cache, g_out: np.ndarray):
        x, a1, h1, a2, h2 = cache
        grads = {"w3": h2.T @ g_out, "b3": g_out.sum(axis=0)}
        g_h2 = g_out @ self.w3.T
        g_a2 = g_h2 * (a2 > 0)
        grads["w2"] = h1.T @ g_a2
        grads["b2"] = g_a2.sum(axis=0)
        g_h1 = g_a2 @ self.w2.T
        g_a1 = g_h1 * (a1 > 0)
        grads["w1"] = x.T @ g_a1
        grads["b1"] = g_a1.sum(axis=0)
        return grads, g_a1 @ self.w1.T


# ------------------------------------------------------------------ heads


@dataclass
class EntropyParams:
    mu: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray


def heads(raw: np.ndarray, delta0: np.ndarray):
    """Split raw network output into (mu, sigma, delta) for every channel."""
    c = len(delta0)
    if raw.shape[-1] != 3 * c:
        raise ValueError(f"network output {raw.shape[-1]} != 3 x {c} channels")
    mu = raw[..., :c]
    r_sigma = raw[..., c:2 * c]
    r_delta = raw[..., 2 * c:]
    sigma_free = SIGMA_MIN + softplus(r_sigma)
    sigma = np.minimum(sigma_free, SIGMA_MAX)
    t = np.tanh(r_delta)
    delta = delta0 * np.exp(t * LN2)
    return mu, sigma, delta, (r_sigma, sigma_free, t, delta)


def heads_backward(cache, g_mu, g_sigma, g_delta) -> np.ndarray:
    r_sigma, sigma_free, t, delta = cache
    g_rs = g_sigma * expit(r_sigma) * (sigma_free < SIGMA_MAX)
    g_rd = g_delta * delta * LN2 * (1.0 - t * t)
    return np.concatenate([g_mu, g_rs, g_rd], axis=-1)


def predict_params(net: MLP, ctx, delta0, model_config: ModelConfig | None = None):
    """Per-group EntropyParams for a batch of contexts (or a single context)."""
    values = ctx.values if isinstance(ctx, ContextVector) else np.asarray(ctx, dtype=np.float64)
    raw, _ = net.forward(values)
    mu, sigma, delta, _ = heads(raw, np.asarray(delta0, dtype=np.float64))
    if model_config is None:
        return EntropyParams(mu, sigma, delta)
    return {name: EntropyParams(mu[..., sl], sigma[..., sl], delta[..., sl])
            for name, sl in model_config.group_slices().items()}


# ------------------------------------------------------------- quantization


def quantize_attr(value, mu, delta, mode: str = "code", noise=0.0):
    """Train: ``value + noise * delta``. Code: mean-anchored symbol and its bin centre."""
    value = np.asarray(value, dtype=np.float64)
    if mode == "train":
        return value + np.asarray(noise) * delta, None
    if mode != "code":
        raise ValueError(f"unknown mode {mode!r}")
    s = round_half_away((value - mu) / delta)
    if np.any(s > SYMBOL_MAX) or np.any(s < SYMBOL_MIN):
        raise SymbolOverflowError(f"symbol out of range: {np.max(np.abs(s))}")
    sym = s.astype(np.int64)
    return mu + s * delta, sym


# ------------------------------------------------------------- Gaussian bins


def gaussian_mass(offset, sigma, delta):
    """Mass of N(0, sigma) on [offset - delta/2, offset + delta/2] (symmetric-stable)."""
    a = np.abs(offset)
    upper = (0.5 * delta - a) / sigma
    lower = (-0.5 * delta - a) / sigma
    return ndtr(upper) - ndtr(lower)


def gaussian_bin_prob(value, mu, sigma, delta, mode: str = "train"):
    """Clamped bin probability. ``value`` is the surrogate (train) or integer symbol (code)."""
    if mode == "code":
        offset = np.asarray(value, dtype=np.float64) * delta
    else:
        offset = np.asarray(value, dtype=np.float64) - mu
    return np.maximum(gaussian_mass(offset, sigma, delta), P_MIN)


def gaussian_bits(v, mu, sigma, delta):
    """-log2 of the clamped bin mass and the cache for :func:`gaussian_bits_backward`."""
    d = v - mu
    p_raw = gaussian_mass(d, sigma, delta)
    p = np.maximum(p_raw, P_MIN)
    return -np.log2(p), (d, sigma, delta, p_raw)


def gaussian_bits_backward(cache, g_bits):
    """Gradients of ``sum(g_bits * bits)`` w.r.t. (v, mu, sigma, delta)."""
    d, sigma, delta, p_raw = cache
    ha = (d + 0.5 * delta) / sigma
    hb = (d - 0.5 * delta) / sigma
    fa, fb = _phi(ha), _phi(hb)
    active = p_raw >= P_MIN
    coef = np.where(active, -g_bits / (np.where(active, p_raw, 1.0) * LN2), 0.0)
    g_d = coef * (fa - fb) / sigma
    g_sigma = coef * (hb * fb - ha * fa) / sigma
    g_delta = coef * (fa + fb) / (2.0 * sigma)
    return g_d, -g_d, g_sigma, g_delta


# ------------------------------------------------------- factorized prior


@dataclass
class FactorizedPrior:
    """Per-channel monotone CDF: chained positive-matrix stages with tanh gates."""

    matrices: list[np.ndarray]  # raw, (C, out, in); softplus keeps them positive
    biases: list[np.ndarray]  # (C, out)
    factors: list[np.ndarray]  # (C, out), one per stage except the last

    @classmethod
    def init(cls, channels: int, filters=(3, 3, 3), init_scale: float = 10.0) -> "FactorizedPrior":
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        matrices, biases, factors = [], [], []
        for i in range(len(filters) + 1):
            value = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            matrices.append(np.full((channels, dims[i + 1], dims[i]), value))
            biases.append(np.zeros((channels, dims[i + 1])))
            if i < len(filters):
                factors.append(np.zeros((channels, dims[i + 1])))
        return cls(matrices, biases, factors)

    @property
    def channels(self) -> int:
        return self.matrices[0].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, m in enumerate(self.matrices):
            out[f"matrix{i}"] = m
            out[f"bias{i}"] = self.biases[i]
            if i < len(self.factors):
                out[f"factor{i}"] = self.factors[i]
        return out

    def logits(self, x: np.ndarray):
        """``x`` has shape (C, M); returns logits (C, M) and a cache."""
        h = np.asarray(x, dtype=np.float64)[:, None, :]
        cache = []
        n_stages = len(self.matrices)
        for i in range(n_stages):
            w = softplus(self.matrices[i])
            pre = np.einsum("coi,cim->com", w, h) + self.biases[i][:, :, None]
            if i < n_stages - 1:
                t = np.tanh(pre)
                gate = np.tanh(self.factors[i])[:, :, None]
                out = pre + gate * t
            else:
                t = gate = None
                out = pre
            cache.append((h, w, t, gate))
            h = out
        return h[:, 0, :], cache

    def logits_backward(self, cache, g_logits: np.ndarray):
        grads = {}
        g_h = g_logits[:, None, :]
        n_stages = len(self.matrices)
        for i in range(n_stages - 1, -1, -1):
            h_in, w, t, gate = cache[i]
            if i < n_stages - 1:
                g_pre = g_h * (1.0 + gate * (1.0 - t * t))
                gate_raw = self.factors[i]
                grads[f"factor{i}"] = (g_h * t).sum(axis=2) * (1.0 - np.tanh(gate_raw) ** 2)
            else:
                g_pre = g_h
            grads[f"bias{i}"] = g_pre.sum(axis=2)
            g_w = np.einsum("com,cim->coi", g_pre, h_in)
            grads[f"matrix{i}"] = g_w * expit(self.matrices[i])
            g_h = np.einsum("coi,com->cim", w, g_pre)
        return grads, g_h[:, 0, :]

    def cdf(self, value, channel: int | None = None):
        """Cumulative distribution; ``value`` is (C, M) if channel is None."""
        if channel is None:
            logits, _ = self.logits(value)
            return expit(logits)
        sub = FactorizedPrior([m[channel:channel + 1] for m in self.matrices],
                              [b[channel:channel + 1] for b in self.biases],
                              [f[channel:channel + 1] for f in self.factors])
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        out = expit(sub.logits(v[None, :])[0])[0]
        return out if np.ndim(value) else float(out[0])

    def bin_mass(self, centers: np.ndarray):
        """Unclamped mass of unit bins around ``centers`` (shape (M, C))."""
        p, _ = self._bin(np.asarray(centers, dtype=np.float64))
        return p

    def _bin(self, centers: np.ndarray):
        m = centers.shape[0]
        x = np.concatenate([centers.T + 0.5, centers.T - 0.5], axis=1)  # (C, 2M)
        logits, cache = self.logits(x)
        upper, lower = logits[:, :m], logits[:, m:]
        sign = -np.sign(upper + lower)
        p = np.abs(expit(sign * upper) - expit(sign * lower))
        return p.T, (cache, upper, lower)

    def bits(self, centers: np.ndarray):
        """-log2 clamped bin probability for (M, C) centres, plus a backward cache."""
        p_raw, cache = self._bin(centers)
        p = np.maximum(p_raw, P_MIN)
        return -np.log2(p), (cache, p_raw)

    def bits_backward(self, bits_cache, g_bits: np.ndarray):
        """Returns (parameter grads, grads w.r.t. centres) for ``sum(g_bits * bits)``."""
        (cache, upper, lower), p_raw = bits_cache
        active = p_raw >= P_MIN
        coef = np.where(active, -g_bits / (np.where(active, p_raw, 1.0) * LN2), 0.0).T
        d_up = expit(upper) * expit(-upper)
        d_lo = expit(lower) * expit(-lower)
        g_logits = np.concatenate([coef * d_up, -coef * d_lo], axis=1)
        grads, g_x = self.logits_backward(cache, g_logits)
        m = upper.shape[1]
        return grads, (g_x[:, :m] + g_x[:, m:]).T


def factorized_cdf(value, channel: int, prior: FactorizedPrior) -> float:
    if not 0 <= channel < prior.channels:
        raise IndexError(f"channel {channel} out of range")
    return prior.cdf(value, channel)


def factorized_bin_prob(symbol, channel: int, prior: FactorizedPrior):
    s = np.atleast_1d(np.asarray(symbol, dtype=np.float64))
    upper = prior.cdf(s + 0.5, channel)
    lower = prior.cdf(s - 0.5, channel)
    p = np.maximum(np.abs(np.asarray(upper) - np.asarray(lower)), P_MIN)
    return p if np.ndim(symbol) else float(p[0])


# ------------------------------------------------------------- containers


@dataclass
class HyperpriorTable:
    z: np.ndarray  # (N, D_z)
    prior: FactorizedPrior

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def rounded(self) -> np.ndarray:
        zhat = round_half_away(self.z)
        if np.any(np.abs(zhat) > SYMBOL_MAX):
            raise SymbolOverflowError("hyperprior symbol out of range", group="hyper")
        return zhat


@dataclass
class EntropyModel:
    """All learnable state: per-level context nets, factorized prior and per-anchor z."""

    config: ModelConfig
    nets: list[MLP]
    hyper: HyperpriorTable
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, n_anchors: int, seed: int = 0,
             attr_stats: tuple[np.ndarray, np.ndarray] | None = None) -> "EntropyModel":
        """Seeded initialisation.

        ``attr_stats`` = (channel mean, channel std) seeds the output biases so
        the initial prediction already matches the data's marginal statistics.
        """
        rng = np.random.default_rng(seed)
        c = config.n_channels
        nets = []
        for level in range(config.levels):
            net = MLP.init(rng, config.context_dim(level), config.hidden, 3 * c, out_scale=0.1)
            if attr_stats is not None:
                mean, std = attr_stats
                net.b3[:c] = mean
                net.b3[c:2 * c] = inv_softplus(np.maximum(std - SIGMA_MIN, 1e-3))
            nets.append(net)
        prior = FactorizedPrior.init(max(config.hyper_dim, 0), config.filters)
        hyper = HyperpriorTable(np.zeros((n_anchors, config.hyper_dim)), prior)
        return cls(config, nets, hyper)

    def params(self) -> dict[str, np.ndarray]:
        """Every learnable array in canonical order (nets by level, prior, z)."""
        out = {}
        for level, net in enumerate(self.nets):
            for name, arr in net.params().items():
                out[f"net{level}.{name}"] = arr
        if self.config.hyper_dim:
            for name, arr in self.hyper.prior.params().items():
                out[f"prior.{name}"] = arr
            out["z"] = self.hyper.z
        return out

    def copy(self) -> "EntropyModel":
        nets = [MLP(**{k: v.copy() for k, v in n.params().items()}) for n in self.nets]
        p = self.hyper.prior
        prior = FactorizedPrior([m.copy() for m in p.matrices], [b.copy() for b in p.biases],
                                [f.copy() for f in p.factors])
        return EntropyModel(self.config, nets, HyperpriorTable(self.hyper.z.copy(), prior),
                            dict(self.meta))

    def as_stored(self) -> "EntropyModel":
        """Copy with every weight rounded to float32, as it travels in a bitstream."""
        m = self.copy()
        for arr in m.params().values():
            arr[...] = arr.astype(np.float32)
        delta0 = tuple(float(np.float32(d)) for d in m.config.delta0)
        if delta0 != m.config.delta0:
            from dataclasses import replace
            m.config = replace(m.config, delta0=delta0)
        return m
