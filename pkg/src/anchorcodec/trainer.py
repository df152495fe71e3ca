"""Fit the context nets, factorized prior and per-anchor z to one scene."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .entropy import DEFAULT_DELTA0, DEFAULT_HC, DEFAULT_HIDDEN, EntropyModel, ModelConfig
from .partition import LevelPartition
from .plan import VARIANTS, CodingPlan, full_plan, redundant_plan, single_plan
from .rate import LossResult, RateBreakdown, code_pass, draw_noise, estimate_rate, train_loss
from .scene import AnchorScene


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, iteration: int, loss: float):
        super().__init__(message)
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainConfig:
    lambda_e: float = 0.004
    lambda_d: float = 0.0
    iterations: int = 30000
    lr: float = 1e-3
    lr_z: float | None = 1e-2  # None: same as lr
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    per_feature_dim: bool = False
    hyper_dim: int | None = None  # defaults to feature_dim // 4
    hidden: int = DEFAULT_HIDDEN
    delta0: tuple[float, float, float] = DEFAULT_DELTA0
    log_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or (self.lr_z is not None and self.lr_z <= 0):
            raise ValueError("learning rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lambda_e < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    bits_per_anchor: list[float] = field(default_factory=list)
    initial: RateBreakdown = field(default_factory=RateBreakdown)
    final: RateBreakdown = field(default_factory=RateBreakdown)
    train_mode_final: RateBreakdown = field(default_factory=RateBreakdown)
    distortion: float = 0.0
    n_anchors: int = 0
    wall_clock: float = 0.0

    @property
    def gap(self) -> float:
        """Train-mode minus code-mode bits per anchor at the end of training."""
        n = max(self.n_anchors, 1)
        return (self.train_mode_final.total - self.final.total) / n

    def curve_rows(self) -> list[dict]:
        return [{"iteration": i, "loss": l, "bits_per_anchor": b}
                for i, (l, b) in enumerate(zip(self.losses, self.bits_per_anchor))]

    def summary(self) -> dict:
        n = max(self.n_anchors, 1)
        return {
            "n_anchors": self.n_anchors,
            "iterations": len(self.losses),
            "initial_bits_per_anchor": self.initial.total / n,
            "final_bits_per_anchor": self.final.total / n,
            "final_breakdown_bits": self.final.as_dict(),
            "train_code_gap_bits_per_anchor": self.gap,
            "distortion": self.distortion,
            "wall_clock_s": self.wall_clock,
        }


def attribute_stats(scene: AnchorScene) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over coded (unmasked) entries."""
    vals = scene.attributes()
    m = scene.channel_mask()
    cnt = np.maximum(m.sum(axis=0), 1)
    mean = (vals * m).sum(axis=0) / cnt
    var = (((vals - mean) ** 2) * m).sum(axis=0) / cnt
    return mean, np.sqrt(var)


def model_config_for(scene: AnchorScene, levels: int, cfg: TrainConfig,
                     hyperprior: bool = True) -> ModelConfig:
    sc = scene.config
    if not hyperprior:
        hdim = 0
    elif cfg.hyper_dim is not None:
        hdim = cfg.hyper_dim
    else:
        hdim = ModelConfig.hyper_dim_for(sc.feature_dim, DEFAULT_HC)
    return ModelConfig(feature_dim=sc.feature_dim, scaling_dim=sc.scaling_dim,
                       n_offsets=sc.n_offsets, hyper_dim=hdim, hidden=cfg.hidden,
                       levels=levels, delta0=tuple(cfg.delta0))


def init_model(scene: AnchorScene, model_config: ModelConfig, cfg: TrainConfig) -> EntropyModel:
    stats = attribute_stats(scene) if len(scene) else None
    model = EntropyModel.init(model_config, len(scene), seed=cfg.seed, attr_stats=stats)
    model.meta["train"] = cfg.to_dict()
    return model


def loss(model: EntropyModel, scene: AnchorScene, plan: CodingPlan, cfg: TrainConfig,
         noise) -> LossResult:
    """Loss value and gradients for one draw of quantization noise."""
    return train_loss(model, scene, plan, noise, cfg.lambda_e, cfg.lambda_d,
                      cfg.per_feature_dim)


class Adam:
    """Adam over a fixed, ordered dict of parameter arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            lr = c.lr_z if (name == "z" and c.lr_z is not None) else c.lr
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)


def fit(model: EntropyModel, scene: AnchorScene, plan: CodingPlan,
        cfg: TrainConfig, progress=None) -> tuple[EntropyModel, TrainReport]:
    """Run ``cfg.iterations`` full-batch Adam steps on a copy of ``model``."""
    t0 = time.perf_counter()
    model = model.copy()
    n = len(scene)
    report = TrainReport(n_anchors=n)
    report.initial = estimate_rate(model, scene, plan, "code")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params(), cfg)
    for it in range(cfg.iterations):
        noise = draw_noise(rng, model, plan)
        res = loss(model, scene, plan, cfg, noise)
        bits = res.rate.total / max(n, 1)
        if not np.isfinite(res.loss) or not all(np.isfinite(g).all() for g in res.grads.values()):
            raise TrainingDivergedError(
                f"training diverged at iteration {it}: loss={res.loss}, "
                f"rate={res.rate.as_dict()}, distortion={res.distortion}", it, res.loss)
        report.losses.append(float(res.loss))
        report.bits_per_anchor.append(bits)
        opt.step(res.grads)
        if progress is not None and cfg.log_every and (it + 1) % cfg.log_every == 0:
            progress(it + 1, res.loss, bits)
    report.final = estimate_rate(model, scene, plan, "code")
    report.train_mode_final = estimate_rate(model, scene, plan, "train", seed=cfg.seed + 1)
    report.distortion = code_pass(model, scene, plan).distortion
    report.wall_clock = time.perf_counter() - t0
    return model, report


def train(scene: AnchorScene, part: LevelPartition, cfg: TrainConfig,
          progress=None) -> tuple[EntropyModel, TrainReport]:
    """Train the full model (all levels, hyperprior) on ``scene``."""
    model = init_model(scene, model_config_for(scene, part.levels, cfg), cfg)
    return fit(model, scene, full_plan(part), cfg, progress)


# ---------------------------------------------------------------- ablations


def variant_setup(variant: str, scene: AnchorScene, part: LevelPartition,
                  cfg: TrainConfig) -> tuple[ModelConfig, CodingPlan]:
    if variant == "full":
        return model_config_for(scene, part.levels, cfg), full_plan(part)
    if variant == "no-hyperprior":
        return model_config_for(scene, part.levels, cfg, hyperprior=False), full_plan(part)
    if variant == "no-anchor-forward":
        return model_config_for(scene, part.levels, cfg), redundant_plan(part)
    if variant in ("no-context", "single-level"):
        return model_config_for(scene, 1, cfg), single_plan(len(scene))
    raise ValueError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")


@dataclass
class AblationRow:
    variant: str
    n_anchors: int
    coded_items: int
    rate: RateBreakdown
    distortion: float
    wall_clock: float

    @property
    def bits_per_anchor(self) -> float:
        return self.rate.total / max(self.n_anchors, 1)

    def as_dict(self) -> dict:
        out = {"variant": self.variant, "n_anchors": self.n_anchors,
               "coded_items": self.coded_items, "bits_per_anchor": self.bits_per_anchor}
        out.update({f"{k}_bits": v for k, v in self.rate.as_dict().items()})
        out["distortion"] = self.distortion
        out["wall_clock_s"] = self.wall_clock
        return out


def ablation_run(scene: AnchorScene, part: LevelPartition, cfg: TrainConfig,
                 variants=VARIANTS) -> list[AblationRow]:
    """Train each variant identically and compare code-mode bits."""
    rows = []
    for variant in variants:
        mcfg, plan = variant_setup(variant, scene, part, cfg)
        model, rep = fit(init_model(scene, mcfg, cfg), scene, plan, cfg)
        rows.append(AblationRow(variant, len(scene), plan.n_items, rep.final,
                                rep.distortion, rep.wall_clock))
    return rows


def with_lambda(cfg: TrainConfig, lambda_e: float) -> TrainConfig:
    return replace(cfg, lambda_e=lambda_e)
