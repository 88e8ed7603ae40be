"""Score-distillation of the adapted video prior into per-frame control points.

Each iteration renders every frame, encodes the clip, noises it at a random
step, asks the merged denoiser for its noise estimate, and pulls the weighted
residual ``eps_hat - eps`` back through the encoder and rasterizer. The
denoiser is only ever evaluated forward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .denoiser import ConditioningContext, Denoiser, predict_noise
from .diffusion import NoiseSchedule, build_schedule, encode, encode_vjp, sample_timestep
from .raster import SoftnessConfig, render_with_vjp
from .sketch import AnimatedSketch, SketchFrame, replicate_frames

log = logging.getLogger(__name__)

WEIGHTINGS = ("constant", "sigma2")

# (z_t, t) -> noise estimate, both as float arrays shaped (F, h, w)
NoisePredictor = Callable[[np.ndarray, int], np.ndarray]


@dataclass
class SdsConfig:
    iterations: int = 1000
    lr: float = 2.0e-3
    lambda_a: float = 0.5
    lambda_m: float = 1.0
    t_min: int | None = None
    t_max: int | None = None
    weighting: str = "constant"
    seed: int = 0
    resolution: int = 64
    softness: SoftnessConfig = field(default_factory=SoftnessConfig)
    snapshot_every: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        if self.lambda_a < 0 or self.lambda_m < 0:
            raise ValueError("adapter scales must be non-negative")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")


class Adam:
    """Adam on a numpy array, updated in place."""

    def __init__(self, shape, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step_count = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        self.step_count += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1**self.step_count)
        v_hat = self.v / (1 - self.b2**self.step_count)
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adapter_predictor(model: Denoiser, contributions, embedding: torch.Tensor) -> NoisePredictor:
    """Forward-only noise predictor for the base model with scaled adapters applied."""
    contributions = [(ad, lam) for ad, lam in contributions if lam != 0.0]

    def predict(z_t: np.ndarray, t: int) -> np.ndarray:
        z = torch.from_numpy(np.ascontiguousarray(z_t)).to(model.dtype)
        out = predict_noise(z, ConditioningContext(embedding, t), model, contributions)
        return out.numpy().astype(np.float64)

    return predict


def gaussian_oracle(sched: NoiseSchedule, mean: float, std: float) -> NoisePredictor:
    """Exact optimal noise predictor when every latent value is i.i.d. ``N(mean, std**2)``."""

    def predict(z_t, t):
        a, s = sched.alpha[t], sched.sigma[t]
        return s * (z_t - a * mean) / (a * a * std * std + s * s)

    return predict


class NoiseOracle:
    """Stands in for a denoiser that recovers the drawn noise exactly; the residual is then zero."""

    def __call__(self, z_t, t):
        raise TypeError("NoiseOracle only works inside sds_gradient, which hands it the drawn noise")


def weight(t: int, sched: NoiseSchedule, mode: str) -> float:
    return 1.0 if mode == "constant" else float(sched.sigma[t] ** 2)


@dataclass
class SdsStep:
    grad: np.ndarray
    t: int
    residual: np.ndarray
    video: np.ndarray


def sds_gradient(anim: AnimatedSketch, predictor: NoisePredictor, cfg: SdsConfig, rng: np.random.Generator,
                 sched: NoiseSchedule | None = None, residual_mask: np.ndarray | None = None) -> SdsStep:
    """One score-distillation gradient over all control points of ``anim``.

    ``residual_mask`` (one factor per frame) multiplies the residual before
    the pull-back; it exists to probe frame independence.
    """
    sched = sched or build_schedule()
    res = cfg.resolution
    frames = []
    vjps = []
    for k in range(anim.n_frames):
        img, vjp = render_with_vjp(anim.frame(k), res, res, cfg.softness)
        frames.append(img)
        vjps.append(vjp)
    video = np.stack(frames)
    z0 = encode(video)
    t = sample_timestep(rng, sched, cfg.t_min, cfg.t_max)
    eps = rng.standard_normal(z0.shape)
    z_t = sched.alpha[t] * z0 + sched.sigma[t] * eps
    eps_hat = eps.copy() if isinstance(predictor, NoiseOracle) else predictor(z_t, t)
    residual = eps_hat - eps
    if residual_mask is not None:
        residual = residual * np.asarray(residual_mask, dtype=float)[:, None, None]
    pixel_grad = encode_vjp(weight(t, sched, cfg.weighting) * residual)
    grad = np.stack([vjp(g) for vjp, g in zip(vjps, pixel_grad)])
    return SdsStep(grad, t, residual, video)


@dataclass
class DistillResult:
    anim: AnimatedSketch
    grad_norms: list[float]
    displacements: list[float]
    snapshots: list[tuple[int, AnimatedSketch]]

    def diagnostics(self):
        return [(i, g, d) for i, (g, d) in enumerate(zip(self.grad_norms, self.displacements))]


def distill(sketch: SketchFrame, n_frames: int, predictor: NoisePredictor, cfg: SdsConfig,
            sched: NoiseSchedule | None = None, callback=None) -> DistillResult:
    """Optimize a replicated sketch so its rendered clip scores well under ``predictor``."""
    sched = sched or build_schedule()
    anim = replicate_frames(sketch, n_frames)
    start = anim.points.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(anim.points.shape, cfg.lr)
    norms, disp, snaps = [], [], []
    for it in range(cfg.iterations):
        step = sds_gradient(anim, predictor, cfg, rng, sched)
        if not np.all(np.isfinite(step.grad)):
            raise FloatingPointError(f"non-finite SDS gradient at iteration {it}")
        opt.step(anim.points, step.grad)
        norms.append(float(np.linalg.norm(step.grad)))
        disp.append(float(np.mean(np.linalg.norm(anim.points - start, axis=-1))))
        if cfg.snapshot_every and (it + 1) % cfg.snapshot_every == 0:
            snaps.append((it + 1, anim.copy()))
        if callback is not None:
            callback(it, anim, step)
    return DistillResult(anim, norms, disp, snaps)
