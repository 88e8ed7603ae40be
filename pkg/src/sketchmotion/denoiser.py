"""A small spatio-temporal transformer that predicts diffusion noise.

Latent videos ``(B, F, h, w)`` are cut into ``patch x patch`` tokens. Tokens
get the timestep and prompt embeddings added, pass one spatial block
(attention among the tokens of a frame) and one temporal block (attention
across frames at each token position), and are projected back to noise.
A single-frame input skips the temporal block altogether.

The eight attention projections are the LoRA attachment points, keyed
``spatial.q`` .. ``temporal.o``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
from torch import nn

SPATIAL_KEYS = ("spatial.q", "spatial.k", "spatial.v", "spatial.o")
TEMPORAL_KEYS = ("temporal.q", "temporal.k", "temporal.v", "temporal.o")
ATTACHMENT_KEYS = SPATIAL_KEYS + TEMPORAL_KEYS


def tokenize_prompt(prompt: str) -> list[str]:
    words = re.findall(r"[a-z0-9']+", prompt.lower())
    if not words:
        raise ValueError(f"prompt {prompt!r} has no words")
    return words


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


@dataclass
class ConditioningContext:
    """Prompt embedding ``(d,)`` or ``(B, d)`` and integer timestep(s)."""

    embedding: torch.Tensor
    t: torch.Tensor | int


class AttentionBlock(nn.Module):
    """Pre-norm single-head self-attention followed by a two-layer MLP."""

    def __init__(self, d: int, gen: torch.Generator):
        super().__init__()
        std = 1.0 / math.sqrt(d)
        self.norm1 = nn.LayerNorm(d)
        self.q = nn.Parameter(torch.randn(d, d, generator=gen) * std)
        self.k = nn.Parameter(torch.randn(d, d, generator=gen) * std)
        self.v = nn.Parameter(torch.randn(d, d, generator=gen) * std)
        self.o = nn.Parameter(torch.randn(d, d, generator=gen) * std)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Parameter(torch.randn(d, 4 * d, generator=gen) * std)
        self.ff1_b = nn.Parameter(torch.zeros(4 * d))
        self.ff2 = nn.Parameter(torch.randn(4 * d, d, generator=gen) / math.sqrt(4 * d))
        self.ff2_b = nn.Parameter(torch.zeros(d))

    def _proj(self, x, name, deltas):
        out = x @ getattr(self, name)
        for b, a, scale in deltas.get(name, ()):
            out = out + scale * ((x @ b) @ a)
        return out

    def forward(self, x: torch.Tensor, deltas: dict) -> torch.Tensor:
        # x: (..., L, d); attention runs over L
        h = self.norm1(x)
        q = self._proj(h, "q", deltas)
        k = self._proj(h, "k", deltas)
        v = self._proj(h, "v", deltas)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(x.shape[-1]), dim=-1)
        x = x + self._proj(att @ v, "o", deltas)
        h = self.norm2(x)
        return x + torch.nn.functional.gelu(h @ self.ff1 + self.ff1_b) @ self.ff2 + self.ff2_b


class Denoiser(nn.Module):
    """Base weights ``W0`` of the noise predictor plus its prompt word table."""

    def __init__(
        self,
        d_model: int = 32,
        patch: int = 4,
        latent_hw: tuple[int, int] = (32, 32),
        max_frames: int = 16,
        T: int = 1000,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        h, w = latent_hw
        if d_model < 16:
            raise ValueError(f"d_model must be at least 16, got {d_model}")
        if h % patch or w % patch:
            raise ValueError(f"patch {patch} does not divide latent {h}x{w}")
        self.d_model, self.patch, self.latent_hw = d_model, patch, (h, w)
        self.max_frames, self.T, self.seed = max_frames, T, seed
        gen = torch.Generator().manual_seed(seed)
        d, pp = d_model, patch * patch
        self.n_tokens = (h // patch) * (w // patch)
        self.patch_in = nn.Parameter(torch.randn(pp, d, generator=gen) / math.sqrt(pp))
        self.patch_in_b = nn.Parameter(torch.zeros(d))
        self.pos_space = nn.Parameter(torch.randn(self.n_tokens, d, generator=gen) * 0.1)
        self.pos_frame = nn.Parameter(torch.randn(max_frames, d, generator=gen) * 0.1)
        self.time_w = nn.Parameter(torch.randn(d, d, generator=gen) / math.sqrt(d))
        self.time_b = nn.Parameter(torch.zeros(d))
        self.spatial = AttentionBlock(d, gen)
        self.temporal = AttentionBlock(d, gen)
        self.norm_out = nn.LayerNorm(d)
        self.out_w = nn.Parameter(torch.zeros(d, pp))
        self.out_b = nn.Parameter(torch.zeros(pp))
        self.words = nn.ParameterDict()
        self._gen = gen
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.out_w.dtype

    # ------------------------------------------------------------------ prompts

    def add_word(self, word: str, seed: int | None = None) -> bool:
        """Register ``word`` with a small random embedding; False if already known."""
        if word in self.words:
            return False
        gen = torch.Generator().manual_seed(self.seed * 7919 + sum(map(ord, word)) if seed is None else seed)
        row = torch.randn(self.d_model, generator=gen, dtype=torch.float64) * 0.1
        self.words[word] = nn.Parameter(row.to(self.dtype), requires_grad=self.out_w.requires_grad)
        return True

    def register_prompt(self, prompt: str) -> list[str]:
        """Add any unseen words of ``prompt``; returns the newly added ones."""
        return [wd for wd in tokenize_prompt(prompt) if self.add_word(wd)]

    def embed_prompt(self, prompt: str, overrides: dict | None = None) -> torch.Tensor:
        overrides = overrides or {}
        rows = []
        for wd in tokenize_prompt(prompt):
            if wd in overrides:
                rows.append(overrides[wd])
            elif wd in self.words:
                rows.append(self.words[wd])
            else:
                raise KeyError(f"unknown prompt word {wd!r}; register the prompt first")
        return torch.stack(rows).mean(dim=0)

    # ------------------------------------------------------------------ projections

    def projection(self, key: str) -> torch.Tensor:
        block, name = _split_key(key)
        return getattr(getattr(self, block), name)

    # ------------------------------------------------------------------ forward

    def _patchify(self, z):
        b, f, h, w = z.shape
        p = self.patch
        z = z.reshape(b, f, h // p, p, w // p, p).permute(0, 1, 2, 4, 3, 5)
        return z.reshape(b, f, (h // p) * (w // p), p * p)

    def _unpatchify(self, x, h, w):
        b, f, _, _ = x.shape
        p = self.patch
        x = x.reshape(b, f, h // p, w // p, p, p).permute(0, 1, 2, 4, 3, 5)
        return x.reshape(b, f, h, w)

    def forward(self, z_t: torch.Tensor, ctx: ConditioningContext, adapters=()) -> torch.Tensor:
        squeeze = z_t.dim() == 3
        if squeeze:
            z_t = z_t[None]
        b, f, h, w = z_t.shape
        if (h, w) != self.latent_hw:
            raise ValueError(f"latent {h}x{w} does not match model {self.latent_hw}")
        if f > self.max_frames:
            raise ValueError(f"{f} frames exceed the model's {self.max_frames} frame embeddings")
        deltas = _collect_deltas(adapters)

        t = torch.as_tensor(ctx.t).reshape(-1).expand(b)
        temb = timestep_features(t, self.d_model).to(self.dtype) @ self.time_w + self.time_b
        temb = torch.nn.functional.silu(temb)
        pemb = ctx.embedding.to(self.dtype).reshape(-1, self.d_model).expand(b, -1)

        x = self._patchify(z_t.to(self.dtype)) @ self.patch_in + self.patch_in_b
        x = x + self.pos_space + (temb + pemb)[:, None, None, :]
        x = self.spatial(x, deltas.get("spatial", {}))
        if f > 1:
            x = x + self.pos_frame[:f, None, :]
            x = self.temporal(x.transpose(1, 2), deltas.get("temporal", {})).transpose(1, 2)
        eps = self.norm_out(x) @ self.out_w + self.out_b
        eps = self._unpatchify(eps, h, w)
        return eps[0] if squeeze else eps

    # ------------------------------------------------------------------ persistence

    def config(self) -> dict:
        return {
            "d_model": self.d_model,
            "patch": self.patch,
            "latent_h": self.latent_hw[0],
            "latent_w": self.latent_hw[1],
            "max_frames": self.max_frames,
            "T": self.T,
            "seed": self.seed,
        }

    def freeze(self) -> "Denoiser":
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def _split_key(key: str) -> tuple[str, str]:
    if key not in ATTACHMENT_KEYS:
        raise KeyError(f"unknown attachment key {key!r}")
    block, name = key.split(".")
    return block, name


def _collect_deltas(adapters) -> dict:
    """Group ``(B, A, scale)`` triples by block and projection name."""
    deltas: dict = {}
    for item in adapters:
        adapter, weight = item if isinstance(item, tuple) else (item, 1.0)
        block, name = _split_key(adapter.target)
        deltas.setdefault(block, {}).setdefault(name, []).append((adapter.B, adapter.A, weight * adapter.alpha))
    return deltas


def init_weights(seed: int = 0, d_model: int = 32, patch: int = 4, latent_hw=(32, 32), **kw) -> Denoiser:
    return Denoiser(d_model=d_model, patch=patch, latent_hw=latent_hw, seed=seed, **kw)


def predict_noise(z_t, ctx: ConditioningContext, weights: Denoiser, adapters=()) -> torch.Tensor:
    """Noise estimate without building an autograd graph."""
    with torch.no_grad():
        return weights(torch.as_tensor(z_t), ctx, adapters)


@dataclass
class Batch:
    """Clean latents ``(B, F, h, w)``, matching noise, per-sample timesteps and prompt embedding."""

    z0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    embedding: torch.Tensor


def noise_batch(batch: Batch, sched) -> torch.Tensor:
    alpha = torch.as_tensor(sched.alpha, dtype=batch.z0.dtype)[batch.t].reshape(-1, 1, 1, 1)
    sigma = torch.as_tensor(sched.sigma, dtype=batch.z0.dtype)[batch.t].reshape(-1, 1, 1, 1)
    return alpha * batch.z0 + sigma * batch.eps


class BackwardCounter:
    """Counts calls of :func:`loss_and_grads`; stage 3 must never increment it."""

    calls = 0


def loss_and_grads(batch: Batch, weights: Denoiser, sched, trainable, adapters=(), frame=None):
    """Mean squared noise-prediction error and its gradient for ``trainable`` tensors.

    ``adapters`` are applied in the forward pass; ``trainable`` lists the
    tensors to differentiate (adapter factors, new word rows, or for
    pretraining the base parameters). ``frame=i`` restricts the loss to
    frame ``i`` alone, which bypasses the temporal block.
    """
    trainable = list(trainable)
    if not trainable:
        raise ValueError("empty trainable set")
    BackwardCounter.calls += 1
    if frame is not None:
        if not 0 <= frame < batch.z0.shape[1]:
            raise ValueError(f"frame {frame} outside clip of {batch.z0.shape[1]} frames")
        batch = Batch(batch.z0[:, frame : frame + 1], batch.eps[:, frame : frame + 1], batch.t, batch.embedding)
    z_t = noise_batch(batch, sched)
    with torch.enable_grad():
        pred = weights(z_t, ConditioningContext(batch.embedding, batch.t), adapters)
        loss = torch.mean((batch.eps - pred) ** 2)
        grads = torch.autograd.grad(loss, trainable, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(trainable, grads)]
    return loss.detach(), grads

