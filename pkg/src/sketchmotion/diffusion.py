"""Variance-preserving cosine schedule, forward noising, and the pooled latent map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
POOL = 2


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha)

    def t_range(self, trim: float = 0.02) -> tuple[int, int]:
        return int(math.floor(trim * self.T)), int(math.floor((1.0 - trim) * self.T))


def build_schedule(T: int = 1000, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if int(T) != T or T < 10:
        raise ValueError(f"need at least 10 diffusion steps, got {T}")
    t = np.arange(T) / T
    alpha = np.cos((t + s) / (1 + s) * math.pi / 2) / math.cos(s * math.pi / (2 * (1 + s)))
    alpha = np.clip(alpha, 1e-4, 1.0)
    sigma = np.sqrt(1.0 - alpha**2)
    return NoiseSchedule(alpha, sigma)


def add_noise(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"latent {z0.shape} and noise {eps.shape} differ in shape")
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")
    return sched.alpha[t] * z0 + sched.sigma[t] * eps


def sample_timestep(rng: np.random.Generator, sched: NoiseSchedule, t_min=None, t_max=None) -> int:
    """Uniform integer step in ``[t_min, t_max]``, trimmed 2% at both ends by default."""
    lo, hi = sched.t_range()
    lo = lo if t_min is None else t_min
    hi = hi if t_max is None else t_max
    return int(rng.integers(lo, hi + 1))


def encode(video: np.ndarray) -> np.ndarray:
    """2x2 average pool per frame, then map [0, 1] intensities to [-1, 1]."""
    video = np.asarray(video, dtype=float)
    *lead, h, w = video.shape
    if h % POOL or w % POOL:
        raise ValueError(f"raster {h}x{w} not divisible by pooling factor {POOL}")
    pooled = video.reshape(*lead, h // POOL, POOL, w // POOL, POOL).mean(axis=(-3, -1))
    return 2.0 * pooled - 1.0


def encode_vjp(upstream: np.ndarray) -> np.ndarray:
    """Transpose of :func:`encode`'s linear part: spread each latent gradient over its block."""
    upstream = np.asarray(upstream, dtype=float)
    scale = 2.0 / (POOL * POOL)
    return scale * np.repeat(np.repeat(upstream, POOL, axis=-2), POOL, axis=-1)


def decode(latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=float)
    up = np.repeat(np.repeat(latent, POOL, axis=-2), POOL, axis=-1)
    return (up + 1.0) / 2.0
