"""Noise schedule, training objective, and the time-gated guided sampler.

The forward process is the standard linear-beta schedule; cumulative
alpha-bar uses the empty-product convention (alpha_bar[0] == 1 exactly), so
q(z_0) = x0 and the final DDIM step lands on the clean prediction.

Sampling runs S deterministic DDIM iterations indexed i = 1..S from high
noise to low. The layout branch is gated per iteration: it is active for
the first ceil(tau * S) iterations (the high-noise phase that fixes
position and contours) and off afterwards. Each step composes

    eps_cond = eps_text + gate * (eps_guided - eps_text)
    eps_hat  = eps_uncond + cfg_scale * (eps_cond - eps_uncond)

the guided term being a residual between the full (text+layout) and
layout-free predictions of the same network; cfg_scale == 1 short-circuits
the unconditional evaluation. With gate == 0 the step never touches the
layout machinery and is bit-identical to a layout-free sampler.

Inference weighs instances inversely to their box area (normalized to sum
one) and feeds those weights to mask fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fusion import FusionStrategy
from .layout import BBox, Layout, validate_bbox
from .rng import Rng
from .tensor import Tensor, mse, no_grad

DEFAULT_T_TRAIN = 1000
DEFAULT_T_SAMPLE = 50
DEFAULT_TAU = 0.7
DEFAULT_CFG_SCALE = 7.5


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int = DEFAULT_T_TRAIN
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.t_train)
        if not ((betas > 0).all() and (betas < 1).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        # alpha_bar[t] = prod_{s<t} alpha_s; alpha_bar[0] == 1 exactly
        ab = np.concatenate([[1.0], np.cumprod(alphas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", ab)

    def snr(self, t: int) -> float:
        ab = self.alpha_bar[t]
        return ab / (1.0 - ab)


@dataclass(frozen=True)
class GuidanceSchedule:
    tau: float = DEFAULT_TAU
    t_sample: int = DEFAULT_T_SAMPLE

    def __post_init__(self):
        if not (0.0 <= self.tau <= 1.0):
            raise ValueError(f"tau must lie in [0,1], got {self.tau}")
        if self.t_sample < 1:
            raise ValueError("t_sample must be >= 1")


@dataclass(frozen=True)
class SamplerConfig:
    cfg_scale: float = DEFAULT_CFG_SCALE
    deterministic: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")
        if not self.deterministic:
            raise ValueError("only the deterministic DDIM-style sampler is provided")


def add_noise(x0: np.ndarray, t: int | np.ndarray, eps: np.ndarray,
              sched: NoiseSchedule) -> np.ndarray:
    """q-sample: z_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; t in [0, T]."""
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr > sched.t_train).any():
        raise ValueError(f"t out of range [0, {sched.t_train}]")
    ab = sched.alpha_bar[t_arr]
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps must share a shape")
    if t_arr.ndim == 0:
        return math.sqrt(float(ab)) * x0 + math.sqrt(1.0 - float(ab)) * eps
    shape = (len(t_arr),) + (1,) * (x0.ndim - 1)
    return np.sqrt(ab).reshape(shape) * x0 + np.sqrt(1.0 - ab).reshape(shape) * eps


def beta_gate(i: int, guidance: GuidanceSchedule) -> int:
    """1 iff sampling iteration i (1-based) falls in the guided early phase."""
    if not (1 <= i <= guidance.t_sample):
        raise ValueError(f"iteration {i} outside 1..{guidance.t_sample}")
    return 1 if i <= math.ceil(guidance.tau * guidance.t_sample) else 0


def instance_weights(boxes: list[BBox]) -> list[float]:
    """Normalized weights inversely proportional to box area."""
    if not boxes:
        raise ValueError("instance_weights of zero boxes")
    inv = []
    for b in boxes:
        v = validate_bbox(b)
        if not v.ok:
            raise ValueError(f"invalid box {b}: {v.reason}")
        inv.append(1.0 / b.area())
    s = sum(inv)
    return [x / s for x in inv]


def sample_timesteps(sched: NoiseSchedule, t_sample: int) -> list[int]:
    """Descending grid T = t_0 > t_1 > ... > t_S = 0."""
    tt = sched.t_train
    return [round(tt * (t_sample - k) / t_sample) for k in range(t_sample + 1)]


def denoise_step(model, z: np.ndarray, t_hi: int, t_lo: int,
                 sched: NoiseSchedule, layouts: list[Layout],
                 cfg_scale: float, gate: int,
                 strategy: FusionStrategy = FusionStrategy.MASK,
                 weights: list[list[float]] | None = None,
                 precomp: dict | None = None) -> np.ndarray:
    """One DDIM update from t_hi to t_lo under gated layout guidance."""
    tt = sched.t_train
    if not (0 <= t_lo < t_hi <= tt):
        raise ValueError(f"bad step {t_hi} -> {t_lo}")
    with no_grad():
        zt = Tensor(z)
        t_vec = np.full(z.shape[0], t_hi, dtype=np.float64)
        caps = [lay.global_caption or None for lay in layouts]
        eps_text = model.denoise_base(zt, t_vec, tt, caps).data
        if gate:
            eps_guided = model.denoise(zt, t_vec, tt, layouts, guidance_on=True,
                                       strategy=strategy, weights=weights,
                                       precomp=precomp).data
            eps_cond = eps_text + (eps_guided - eps_text)
        else:
            eps_cond = eps_text
        if cfg_scale == 1.0:
            eps_hat = eps_cond
        else:
            eps_u = model.denoise_base(zt, t_vec, tt, [None] * len(layouts)).data
            eps_hat = eps_u + cfg_scale * (eps_cond - eps_u)
    ab_hi = float(sched.alpha_bar[t_hi])
    ab_lo = float(sched.alpha_bar[t_lo])
    x0_pred = (z - math.sqrt(1.0 - ab_hi) * eps_hat) / math.sqrt(ab_hi)
    return math.sqrt(ab_lo) * x0_pred + math.sqrt(1.0 - ab_lo) * eps_hat


def sample(model, layouts: list[Layout], sampler: SamplerConfig,
           guidance: GuidanceSchedule, sched: NoiseSchedule,
           strategy: FusionStrategy = FusionStrategy.MASK,
           use_instance_weights: bool = True,
           rng: Rng | None = None) -> np.ndarray:
    """Full chain: z_T ~ N(0, I) -> S gated DDIM steps -> clamped x0.

    Deterministic given (seed, inputs, config); returns [B,C,h,w] in [-1,1].
    """
    cfg = model.cfg
    b = len(layouts)
    if rng is None:
        rng = Rng(sampler.seed)
    z = rng.split("sample/init").normal((b, cfg.in_channels, cfg.latent_h, cfg.latent_w))
    weights = None
    if use_instance_weights:
        weights = [
            instance_weights([inst.bbox for inst in lay.active]) if lay.active_count else []
            for lay in layouts
        ]
    ts = sample_timesteps(sched, guidance.t_sample)
    precomp = None
    if hasattr(model, "prepare_guided") and any(beta_gate(i, guidance)
                                                for i in range(1, guidance.t_sample + 1)):
        with no_grad():
            precomp = model.prepare_guided(layouts)
    for i in range(1, guidance.t_sample + 1):
        gate = beta_gate(i, guidance)
        z = denoise_step(model, z, ts[i - 1], ts[i], sched, layouts,
                         sampler.cfg_scale, gate, strategy=strategy,
                         weights=weights, precomp=precomp)
    return np.clip(z, -1.0, 1.0)


def sample_layout_free(model, global_captions: list[str | None],
                       sampler: SamplerConfig, guidance: GuidanceSchedule,
                       sched: NoiseSchedule, rng: Rng | None = None) -> np.ndarray:
    """Reference sampler with no layout machinery at all (text CFG only)."""
    cfg = model.cfg
    b = len(global_captions)
    if rng is None:
        rng = Rng(sampler.seed)
    z = rng.split("sample/init").normal((b, cfg.in_channels, cfg.latent_h, cfg.latent_w))
    tt = sched.t_train
    ts = sample_timesteps(sched, guidance.t_sample)
    with no_grad():
        for i in range(1, guidance.t_sample + 1):
            t_hi, t_lo = ts[i - 1], ts[i]
            zt = Tensor(z)
            t_vec = np.full(b, t_hi, dtype=np.float64)
            eps_c = model.denoise_base(zt, t_vec, tt, global_captions).data
            if sampler.cfg_scale == 1.0:
                eps_hat = eps_c
            else:
                eps_u = model.denoise_base(zt, t_vec, tt, [None] * b).data
                eps_hat = eps_u + sampler.cfg_scale * (eps_c - eps_u)
            ab_hi = float(sched.alpha_bar[t_hi])
            ab_lo = float(sched.alpha_bar[t_lo])
            x0_pred = (z - math.sqrt(1.0 - ab_hi) * eps_hat) / math.sqrt(ab_hi)
            z = math.sqrt(ab_lo) * x0_pred + math.sqrt(1.0 - ab_lo) * eps_hat
    return np.clip(z, -1.0, 1.0)


def training_step(model, batch_x0: np.ndarray, layouts: list[Layout],
                  sched: NoiseSchedule, rng: Rng,
                  strategy: FusionStrategy = FusionStrategy.MASK,
                  cfg_dropout: float = 0.1,
                  layout_dropout: float = 0.2) -> Tensor:
    """Epsilon-prediction loss on one batch; returns the scalar loss tensor
    (caller backpropagates and steps the optimizer over trainables only).

    The sampler composes three prediction modes (unconditional, text-only,
    text+layout), so all three must appear in training: with probability
    cfg_dropout the batch drops both conditions, with probability
    layout_dropout it keeps the text but drops the layout branch, otherwise
    it trains fully guided.
    """
    b = batch_x0.shape[0]
    if len(layouts) != b:
        raise ValueError("one layout per sample required")
    t = rng.split("t").integers(1, sched.t_train + 1, b)
    eps = rng.split("eps").normal(batch_x0.shape)
    z_t = add_noise(batch_x0, t, eps, sched)
    u = float(rng.split("drop").uniform(0.0, 1.0))
    if u < cfg_dropout:
        guidance_on, text_cond = False, False
    elif u < cfg_dropout + layout_dropout:
        guidance_on, text_cond = False, True
    else:
        guidance_on, text_cond = True, True
    pred = model.denoise(Tensor(z_t), t.astype(np.float64), sched.t_train,
                         layouts, guidance_on=guidance_on, text_cond=text_cond,
                         strategy=strategy)
    return mse(pred, Tensor(eps))
