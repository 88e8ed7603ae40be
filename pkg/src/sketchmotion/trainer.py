"""Base-model pretraining and the two adapter-learning stages.

Stage 1 fits spatial ``A`` adapters to one rendered sketch. Stage 2 fits
spatial ``A_prime`` adapters to single frames of a reference clip and temporal
``M`` adapters to the whole clip, alternating one update of each per step.
The base weights never change in either stage.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import Batch, ConditioningContext, Denoiser, loss_and_grads, noise_batch, tokenize_prompt
from .diffusion import NoiseSchedule, build_schedule, encode, sample_timestep
from .lora import AdapterSet, adapter_set_for
from .raster import SoftnessConfig, render
from .sketch import SketchFrame
from . import synthetic

log = logging.getLogger(__name__)

MOTION_WORDS = {"translate": "sliding", "bounce": "bouncing", "jump": "jumping", "scale-pulse": "pulsing"}


@dataclass
class StageConfig:
    steps: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    rank: int = 4
    alpha: float = 1.0
    eval_seed: int = 9973
    eval_draws: int = 256

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("a stage needs at least one step")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass
class StageResult:
    adapters: dict[str, AdapterSet]
    words: dict[str, torch.Tensor]
    trace: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.trace])


class NonFiniteLoss(FloatingPointError):
    pass


def new_words(model: Denoiser, prompt: str, seed: int) -> dict[str, torch.Tensor]:
    """Trainable rows for the words of ``prompt`` the base model does not know."""
    out = {}
    for i, word in enumerate(tokenize_prompt(prompt)):
        if word not in model.words and word not in out:
            gen = torch.Generator().manual_seed(seed * 1009 + i)
            row = torch.randn(model.d_model, generator=gen, dtype=torch.float64) * 0.1
            out[word] = row.to(model.dtype).requires_grad_(True)
    return out


def sketch_latent(sketch: SketchFrame, resolution: int, softness: SoftnessConfig) -> np.ndarray:
    image = render(sketch, resolution, resolution, softness)
    if image.max() <= 1e-3:
        raise ValueError("sketch renders empty at this resolution")
    return encode(image[None])


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)


def _draw(rng: np.random.Generator, sched: NoiseSchedule, batch: int, shape, dtype):
    t = torch.tensor([sample_timestep(rng, sched) for _ in range(batch)])
    eps = torch.from_numpy(rng.standard_normal((batch, *shape))).to(dtype)
    return t, eps


def _check(loss):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite training loss {float(loss)}")


def _apply(opt, params, grads):
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
    opt.zero_grad(set_to_none=True)


def heldout_loss(model: Denoiser, z0: np.ndarray, prompt: str, sched: NoiseSchedule, cfg: StageConfig,
                 adapters=(), words=None, frame: int | None = None) -> float:
    """Mean noise-prediction error over a fixed set of ``(t, eps)`` draws.

    ``frame`` selects a single frame, matching the spatial loss.
    """
    rng = np.random.default_rng(cfg.eval_seed)
    z0 = torch.from_numpy(np.asarray(z0)).to(model.dtype)
    if frame is not None:
        z0 = z0[frame : frame + 1]
    emb = model.embed_prompt(prompt, words).detach()
    total, chunk = 0.0, 16
    with torch.no_grad():
        for start in range(0, cfg.eval_draws, chunk):
            n = min(chunk, cfg.eval_draws - start)
            t, eps = _draw(rng, sched, n, z0.shape, model.dtype)
            z = z0.expand(n, *z0.shape)
            z_t = noise_batch(Batch(z, eps, t, emb), sched)
            pred = model(z_t, ConditioningContext(emb, t), adapters)
            total += float(torch.sum(torch.mean((eps - pred) ** 2, dim=(1, 2, 3))))
    return total / cfg.eval_draws


def train_appearance(sketch: SketchFrame, prompt: str, model: Denoiser, cfg: StageConfig = StageConfig(),
                     resolution: int = 64, softness: SoftnessConfig = SoftnessConfig(),
                     sched: NoiseSchedule | None = None) -> StageResult:
    """Fit ``A`` adapters (and unseen prompt words) to the rendered sketch."""
    sched = sched or build_schedule(model.T)
    z0 = torch.from_numpy(sketch_latent(sketch, resolution, softness)).to(model.dtype)
    rng = np.random.default_rng(cfg.seed)
    aset = adapter_set_for(model, "A", cfg.rank, cfg.alpha, seed=cfg.seed)
    words = new_words(model, prompt, cfg.seed)
    params = aset.parameters() + list(words.values())
    opt = _adam(params, cfg.lr)
    trace = []
    for step in range(cfg.steps):
        t, eps = _draw(rng, sched, cfg.batch_size, z0.shape, model.dtype)
        emb = model.embed_prompt(prompt, words)
        batch = Batch(z0.expand(cfg.batch_size, *z0.shape), eps, t, emb)
        loss, grads = loss_and_grads(batch, model, sched, params, aset, frame=0)
        _check(loss)
        _apply(opt, params, grads)
        trace.append({"step": step, "loss": float(loss), "spatial": float(loss), "temporal": 0.0})
    return StageResult({"A": aset.detached()}, _detach(words), trace)


def train_motion(video: np.ndarray, prompt: str, model: Denoiser, cfg: StageConfig = StageConfig(),
                 sched: NoiseSchedule | None = None) -> StageResult:
    """Fit ``A_prime`` (single-frame spatial loss) and ``M`` (full-clip loss) adapters."""
    video = np.asarray(video, dtype=float)
    if video.ndim != 3 or video.shape[0] < 2:
        raise ValueError("motion learning needs a clip of at least two frames")
    sched = sched or build_schedule(model.T)
    z0 = torch.from_numpy(encode(video)).to(model.dtype)
    n_frames = z0.shape[0]
    rng = np.random.default_rng(cfg.seed)
    a_prime = adapter_set_for(model, "A_prime", cfg.rank, cfg.alpha, seed=cfg.seed)
    motion = adapter_set_for(model, "M", cfg.rank, cfg.alpha, seed=cfg.seed + 1)
    words = new_words(model, prompt, cfg.seed)
    word_params = list(words.values())
    opt_s, opt_t = _adam(a_prime.parameters(), cfg.lr), _adam(motion.parameters(), cfg.lr)
    opt_w = _adam(word_params, cfg.lr) if word_params else None
    clip = z0.expand(cfg.batch_size, *z0.shape)
    trace = []
    for step in range(cfg.steps):
        i = int(rng.integers(n_frames))
        t, eps = _draw(rng, sched, cfg.batch_size, z0.shape, model.dtype)
        emb = model.embed_prompt(prompt, words)
        loss_s, grads = loss_and_grads(Batch(clip, eps, t, emb), model, sched,
                                       a_prime.parameters() + word_params, a_prime, frame=i)
        _check(loss_s)
        n_ad = len(a_prime.parameters())
        _apply(opt_s, a_prime.parameters(), grads[:n_ad])
        word_grads = grads[n_ad:]

        t, eps = _draw(rng, sched, cfg.batch_size, z0.shape, model.dtype)
        emb = model.embed_prompt(prompt, words)
        adapters = list(a_prime) + list(motion)
        loss_t, grads = loss_and_grads(Batch(clip, eps, t, emb), model, sched,
                                       motion.parameters() + word_params, adapters)
        _check(loss_t)
        n_ad = len(motion.parameters())
        _apply(opt_t, motion.parameters(), grads[:n_ad])
        if opt_w is not None:
            _apply(opt_w, word_params, [a + b for a, b in zip(word_grads, grads[n_ad:])])
        ls, lt = float(loss_s), float(loss_t)
        trace.append({"step": step, "loss": ls + lt, "spatial": ls, "temporal": lt})
    return StageResult({"A_prime": a_prime.detached(), "M": motion.detached()}, _detach(words), trace)


def _detach(words):
    return {k: v.detach().clone() for k, v in words.items()}


# --------------------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    pool_size: int = 48
    single_frame_prob: float = 0.25
    n_frames: int = 16
    resolution: int = 64
    tau: float = 0.01
    stroke_width: float = 0.03
    subjects: tuple[str, ...] = ("square", "disc", "doodle")


@dataclass
class PretrainClip:
    latent: np.ndarray
    prompt: str


def pretrain_pool(cfg: PretrainConfig) -> list[PretrainClip]:
    """Moving squares, discs and random doodles, each captioned ``a <subject> is <motion>``."""
    rng = np.random.default_rng(cfg.seed + 1)
    softness = SoftnessConfig(cfg.tau, 16)
    subjects = cfg.subjects
    pool = []
    for i in range(cfg.pool_size):
        kind = synthetic.MOTION_KINDS[i % len(synthetic.MOTION_KINDS)]
        subject = subjects[(i // len(synthetic.MOTION_KINDS)) % len(subjects)]
        geom = synthetic.random_geometry(kind, rng)
        if subject == "doodle":
            centers, sizes = synthetic.motion_track(kind, cfg.n_frames, **geom)
            doodle = synthetic.random_doodle(rng, int(rng.integers(3, 6)), cfg.stroke_width, extent=0.5 * geom["size"])
            video = synthetic.moving_sketch_video(doodle, centers, sizes, geom["size"], cfg.resolution,
                                                  cfg.resolution, softness)
        else:
            video = synthetic.make_synthetic_video(kind, cfg.n_frames, cfg.resolution, cfg.resolution,
                                                   shape=subject, **geom).video
        pool.append(PretrainClip(encode(video), f"a {subject} is {MOTION_WORDS[kind]}"))
    return pool


def pretrain(model: Denoiser, cfg: PretrainConfig = PretrainConfig(), sched: NoiseSchedule | None = None,
             pool: list[PretrainClip] | None = None) -> list[dict]:
    """Train every base parameter on the synthetic pool; returns the loss trace."""
    sched = sched or build_schedule(model.T)
    pool = pool if pool is not None else pretrain_pool(cfg)
    for clip in pool:
        model.register_prompt(clip.prompt)
    for p in model.parameters():
        p.requires_grad_(True)
    params = list(model.parameters())
    opt = _adam(params, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    latents = [torch.from_numpy(c.latent).to(model.dtype) for c in pool]
    trace = []
    for step in range(cfg.steps):
        idx = rng.integers(len(pool), size=cfg.batch_size)
        z0 = torch.stack([latents[i] for i in idx])
        t, eps = _draw(rng, sched, cfg.batch_size, z0.shape[1:], model.dtype)
        emb = torch.stack([model.embed_prompt(pool[i].prompt) for i in idx])
        frame = int(rng.integers(z0.shape[1])) if rng.random() < cfg.single_frame_prob else None
        loss, grads = loss_and_grads(Batch(z0, eps, t, emb), model, sched, params, frame=frame)
        _check(loss)
        _apply(opt, params, grads)
        trace.append({"step": step, "loss": float(loss), "spatial": float(loss) if frame is not None else 0.0,
                      "temporal": 0.0 if frame is not None else float(loss)})
    model.freeze()
    return trace
