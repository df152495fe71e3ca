"""Rate objective over a coding plan: noisy (train) and quantized (code) passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .entropy import (
    P_MIN,
    SYMBOL_MAX,
    SYMBOL_MIN,
    EntropyModel,
    SymbolOverflowError,
    assemble_context,
    gaussian_bits,
    gaussian_bits_backward,
    gaussian_mass,
    heads,
    heads_backward,
    normalize_positions,
    round_half_away,
)
from .plan import CodingPlan
from .scene import AnchorScene

GROUPS = ("feature", "scaling", "offsets")


@dataclass
class RateBreakdown:
    hyper: float = 0.0
    feature: float = 0.0
    scaling: float = 0.0
    offsets: float = 0.0

    @property
    def total(self) -> float:
        return self.hyper + self.feature + self.scaling + self.offsets

    def as_dict(self) -> dict[str, float]:
        return {"hyper": self.hyper, "feature": self.feature, "scaling": self.scaling,
                "offsets": self.offsets, "total": self.total}


def _group_bits(model: EntropyModel, bits: np.ndarray, out: RateBreakdown) -> None:
    for name, sl in model.config.group_slices().items():
        setattr(out, name, getattr(out, name) + float(bits[:, sl].sum()))


def stage_params(model: EntropyModel, stage_net: int, z_rows, parent_rows, xnorm_rows):
    """(mu, sigma, delta) for one stage's items from their context pieces."""
    ctx = assemble_context(z_rows, parent_rows, xnorm_rows)
    raw, _ = model.nets[stage_net].forward(ctx)
    mu, sigma, delta, _ = heads(raw, model.config.channel_delta0())
    return mu, sigma, delta


# ------------------------------------------------------------------ train


@dataclass
class LossResult:
    loss: float
    rate: RateBreakdown
    distortion: float
    grads: dict[str, np.ndarray] | None = None


def draw_noise(rng: np.random.Generator, model: EntropyModel, plan: CodingPlan):
    u_z = rng.uniform(-0.5, 0.5, size=(plan.n_anchors, model.config.hyper_dim))
    u_a = rng.uniform(-0.5, 0.5, size=(plan.n_items, model.config.n_channels))
    return u_z, u_a


def train_loss(
    model: EntropyModel,
    scene: AnchorScene,
    plan: CodingPlan,
    noise,
    lambda_e: float = 1.0,
    lambda_d: float = 0.0,
    per_feature_dim: bool = False,
    need_grad: bool = True,
) -> LossResult:
    """Noisy-quantization rate (+ optional distortion) and its exact gradient.

    loss = lambda_e * (hyper bits + attribute bits) / N [/ D_f]
           + lambda_d * mean squared quantization error over coded channels
    """
    cfg = model.config
    n = plan.n_anchors
    u_z, u_a = noise
    vals = scene.attributes()
    cmask = scene.channel_mask().astype(np.float64)
    xnorm = normalize_positions(scene.positions, scene.bbox_min, scene.bbox_max)
    delta0 = cfg.channel_delta0()
    pdim = cfg.parent_dim
    rate_scale = lambda_e / max(n, 1) / (cfg.feature_dim if per_feature_dim else 1)
    n_coded = sum(float(cmask[s.anchors].sum()) for s in plan.stages)
    dist_scale = lambda_d / max(n_coded, 1.0)

    rate = RateBreakdown()
    z_tilde = model.hyper.z + u_z
    hyper_cache = None
    if cfg.hyper_dim:
        zbits, hyper_cache = model.hyper.prior.bits(z_tilde)
        rate.hyper = float(zbits.sum())

    sur = np.zeros((plan.n_items, cfg.n_channels))
    caches = []
    dist = 0.0
    for stage, start in zip(plan.stages, plan.starts()):
        a = stage.anchors
        items = slice(start, start + len(a))
        prow = sur[stage.parents, :pdim] if stage.parents is not None else None
        ctx = assemble_context(z_tilde[a], prow, xnorm[a])
        net = model.nets[stage.net]
        raw, net_cache = net.forward(ctx)
        mu, sigma, delta, head_cache = heads(raw, delta0)
        u = u_a[items]
        s = vals[a] + u * delta
        sur[items] = s
        bits, g_cache = gaussian_bits(s, mu, sigma, delta)
        m = cmask[a]
        _group_bits(model, bits * m, rate)
        dist += float((((u * delta) ** 2) * m).sum())
        caches.append((stage, items, net_cache, head_cache, g_cache, u, delta, m))

    loss = rate_scale * rate.total + dist_scale * dist
    result = LossResult(loss=loss, rate=rate, distortion=dist / max(n_coded, 1.0))
    if not need_grad:
        return result

    grads = {name: np.zeros_like(arr) for name, arr in model.params().items()}
    g_sur = np.zeros_like(sur)
    g_zt = np.zeros_like(z_tilde)
    for stage, items, net_cache, head_cache, g_cache, u, delta, m in reversed(caches):
        g_v, g_mu, g_sigma, g_delta = gaussian_bits_backward(g_cache, rate_scale * m)
        g_v = g_v + g_sur[items]
        g_delta = g_delta + g_v * u + dist_scale * 2.0 * u * u * delta * m
        g_raw = heads_backward(head_cache, g_mu, g_sigma, g_delta)
        net_grads, g_ctx = model.nets[stage.net].backward(net_cache, g_raw)
        for name, g in net_grads.items():
            grads[f"net{stage.net}.{name}"] += g
        dz = cfg.hyper_dim
        g_zt[stage.anchors] += g_ctx[:, :dz]
        if stage.parents is not None:
            np.add.at(g_sur, (stage.parents, slice(0, pdim)), g_ctx[:, dz:dz + pdim])
    if cfg.hyper_dim:
        prior_grads, g_centres = model.hyper.prior.bits_backward(
            hyper_cache, np.full(z_tilde.shape, rate_scale))
        for name, g in prior_grads.items():
            grads[f"prior.{name}"] += g
        grads["z"] += g_zt + g_centres
    result.grads = grads
    return result


# ------------------------------------------------------------------- code


@dataclass
class CodeResult:
    """Quantized pass over a plan: symbols, dequantized values and bit estimates."""

    zhat: np.ndarray
    symbols: np.ndarray  # (n_items, C) int64, 0 where not coded
    dequantized: np.ndarray  # (n_items, C)
    params: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = field(default_factory=list)
    rate: RateBreakdown = field(default_factory=RateBreakdown)
    distortion: float = 0.0


def _check_symbols(s: np.ndarray, anchors: np.ndarray, model: EntropyModel) -> None:
    bad = (s > SYMBOL_MAX) | (s < SYMBOL_MIN)
    if bad.any():
        r, c = (int(v[0]) for v in np.nonzero(bad))
        group = next(g for g, sl in model.config.group_slices().items() if sl.start <= c < sl.stop)
        ch = c - model.config.group_slices()[group].start
        raise SymbolOverflowError(
            f"symbol overflow at anchor {int(anchors[r])}, group {group}, channel {ch}",
            anchor=int(anchors[r]), group=group, channel=ch)


def code_pass(model: EntropyModel, scene: AnchorScene, plan: CodingPlan) -> CodeResult:
    """Hard-quantized pass: what an encoder emits, with -log2 p bit estimates."""
    cfg = model.config
    vals = scene.attributes()
    cmask = scene.channel_mask()
    xnorm = normalize_positions(scene.positions, scene.bbox_min, scene.bbox_max)
    zhat = model.hyper.rounded() if cfg.hyper_dim else np.zeros((plan.n_anchors, 0))
    rate = RateBreakdown()
    if cfg.hyper_dim:
        zbits, _ = model.hyper.prior.bits(zhat)
        rate.hyper = float(zbits.sum())
    symbols = np.zeros((plan.n_items, cfg.n_channels), dtype=np.int64)
    deq = np.zeros((plan.n_items, cfg.n_channels))
    params = []
    err = 0.0
    n_coded = 0
    for stage, start in zip(plan.stages, plan.starts()):
        a = stage.anchors
        items = slice(start, start + len(a))
        prow = deq[stage.parents, :cfg.parent_dim] if stage.parents is not None else None
        mu, sigma, delta = stage_params(model, stage.net, zhat[a], prow, xnorm[a])
        m = cmask[a]
        s = np.where(m, round_half_away((vals[a] - mu) / delta), 0.0)
        _check_symbols(s, a, model)
        symbols[items] = s.astype(np.int64)
        deq[items] = np.where(m, mu + s * delta, 0.0)
        bits = -np.log2(np.maximum(gaussian_mass(s * delta, sigma, delta), P_MIN))
        _group_bits(model, bits * m, rate)
        err += float((((deq[items] - vals[a]) ** 2) * m).sum())
        n_coded += int(m.sum())
        params.append((mu, sigma, delta))
    return CodeResult(zhat=zhat, symbols=symbols, dequantized=deq, params=params, rate=rate,
                      distortion=err / max(n_coded, 1))


def estimate_rate(model: EntropyModel, scene: AnchorScene, plan: CodingPlan,
                  mode: str = "code", seed: int = 0) -> RateBreakdown:
    """Bits per component as the sum of -log2 bin probabilities."""
    if mode == "code":
        return code_pass(model, scene, plan).rate
    if mode == "train":
        noise = draw_noise(np.random.default_rng(seed), model, plan)
        return train_loss(model, scene, plan, noise, need_grad=False).rate
    raise ValueError(f"unknown mode {mode!r}")
