"""Low-rank adapters: creation, role-checked sets, merging, and the SKAD1 file format.

An adapter on a projection ``W0`` of shape ``(d, k)`` (input ``d``, output
``k``) holds ``B`` of shape ``(d, r)`` and ``A`` of shape ``(r, k)``; its update
is ``alpha * B @ A``. ``B`` starts at zero so a fresh adapter changes nothing.
"""

from __future__ import annotations

import copy
import io
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .denoiser import ATTACHMENT_KEYS, SPATIAL_KEYS, TEMPORAL_KEYS, Denoiser

MAGIC = "SKAD1"
ROLES = {"A": SPATIAL_KEYS, "A_prime": SPATIAL_KEYS, "M": TEMPORAL_KEYS}


class AdapterFileError(ValueError):
    pass


@dataclass
class LoraAdapter:
    target: str
    B: torch.Tensor
    A: torch.Tensor
    alpha: float = 1.0

    def __post_init__(self):
        if self.target not in ATTACHMENT_KEYS:
            raise KeyError(f"unknown attachment key {self.target!r}")
        if self.B.shape[1] != self.A.shape[0]:
            raise ValueError(f"rank mismatch: B {tuple(self.B.shape)} vs A {tuple(self.A.shape)}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def delta(self) -> torch.Tensor:
        return self.alpha * (self.B @ self.A)

    def parameters(self) -> list[torch.Tensor]:
        return [self.B, self.A]

    def detached(self) -> "LoraAdapter":
        return LoraAdapter(self.target, self.B.detach().clone(), self.A.detach().clone(), self.alpha)


def new_adapter(target: str, d: int, k: int, rank: int = 4, alpha: float = 1.0, seed: int = 0,
                dtype=torch.float32) -> LoraAdapter:
    if rank < 1 or 4 * rank > min(d, k):
        raise ValueError(f"rank {rank} violates 1 <= r <= min(d, k) / 4 for a {d}x{k} projection")
    gen = torch.Generator().manual_seed(seed)
    a = torch.randn(rank, k, generator=gen, dtype=torch.float64) / np.sqrt(rank)
    return LoraAdapter(target, torch.zeros(d, rank, dtype=dtype), a.to(dtype), float(alpha))


@dataclass
class AdapterSet:
    """Adapters of one role: ``A`` (sketch appearance), ``A_prime`` (video appearance), ``M`` (motion)."""

    role: str
    adapters: dict[str, LoraAdapter] = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown adapter role {self.role!r}")
        for key, ad in self.adapters.items():
            self._check(key, ad)

    def _check(self, key, ad):
        if key != ad.target:
            raise ValueError(f"adapter stored under {key!r} targets {ad.target!r}")
        if ad.target not in ROLES[self.role]:
            raise ValueError(f"{self.role} adapters may not target {ad.target!r}")

    def add(self, ad: LoraAdapter) -> None:
        self._check(ad.target, ad)
        self.adapters[ad.target] = ad

    def __iter__(self):
        return iter(self.adapters.values())

    def __len__(self):
        return len(self.adapters)

    def parameters(self) -> list[torch.Tensor]:
        return [p for ad in self for p in ad.parameters()]

    def scaled(self, weight: float) -> list[tuple[LoraAdapter, float]]:
        return [(ad, float(weight)) for ad in self]

    def detached(self) -> "AdapterSet":
        return AdapterSet(self.role, {k: ad.detached() for k, ad in self.adapters.items()})


def adapter_set_for(model: Denoiser, role: str, rank: int = 4, alpha: float = 1.0, seed: int = 0) -> AdapterSet:
    """Fresh trainable adapters on every projection the role may touch."""
    out = AdapterSet(role)
    for i, key in enumerate(ROLES[role]):
        d, k = model.projection(key).shape
        ad = new_adapter(key, d, k, rank, alpha, seed=seed * 100 + i, dtype=model.dtype)
        ad.B.requires_grad_(True)
        ad.A.requires_grad_(True)
        out.add(ad)
    return out


def merge(w0: torch.Tensor, contributions) -> torch.Tensor:
    """``W0 + sum(lambda_j * alpha_j * B_j @ A_j)`` over ``(adapter, lambda)`` pairs."""
    out = w0.clone()
    for ad, lam in contributions:
        if ad.shape != tuple(w0.shape):
            raise ValueError(f"adapter shape {ad.shape} does not match weight {tuple(w0.shape)}")
        out = out + lam * ad.delta().to(w0.dtype)
    return out


def merged_model(model: Denoiser, contributions) -> Denoiser:
    """Copy of ``model`` with the adapter updates folded into its projections."""
    out = copy.deepcopy(model)
    by_target: dict[str, list] = {}
    for ad, lam in contributions:
        by_target.setdefault(ad.target, []).append((ad, lam))
    with torch.no_grad():
        for key, contribs in by_target.items():
            out.projection(key).copy_(merge(model.projection(key), contribs))
    return out


# --------------------------------------------------------------------------- SKAD1 files


def _f32_bytes(t: torch.Tensor) -> bytes:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()


def dump_adapters(aset: AdapterSet) -> bytes:
    buf = io.BytesIO()
    buf.write(f"{MAGIC}\nrole {aset.role}\ncount {len(aset)}\n".encode())
    for ad in aset:
        d, k = ad.shape
        buf.write(f"adapter {ad.target} {d} {k} {ad.rank} {ad.alpha!r}\n".encode())
        buf.write(_f32_bytes(ad.B))
        buf.write(_f32_bytes(ad.A))
    return buf.getvalue()


def _read_line(buf: io.BytesIO) -> list[str]:
    line = buf.readline()
    if not line.endswith(b"\n"):
        raise AdapterFileError("truncated adapter header")
    try:
        return line.decode("ascii").split()
    except UnicodeDecodeError:
        raise AdapterFileError("corrupted adapter header") from None


def parse_adapters(data: bytes, dtype=torch.float32) -> AdapterSet:
    buf = io.BytesIO(data)
    magic = _read_line(buf)
    if magic != [MAGIC]:
        raise AdapterFileError(f"not an adapter file of version {MAGIC} (found {' '.join(magic)!r})")
    role_line, count_line = _read_line(buf), _read_line(buf)
    if role_line[:1] != ["role"] or count_line[:1] != ["count"]:
        raise AdapterFileError("corrupted adapter header")
    out = AdapterSet(role_line[1])
    for _ in range(int(count_line[1])):
        head = _read_line(buf)
        if len(head) != 6 or head[0] != "adapter":
            raise AdapterFileError("corrupted adapter entry header")
        target, d, k, r, alpha = head[1], int(head[2]), int(head[3]), int(head[4]), float(head[5])
        mats = []
        for rows, cols in ((d, r), (r, k)):
            raw = buf.read(4 * rows * cols)
            if len(raw) != 4 * rows * cols:
                raise AdapterFileError(f"truncated payload for {target}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(rows, cols)
            mats.append(torch.from_numpy(arr.astype(np.float32)).to(dtype))
        out.add(LoraAdapter(target, mats[0], mats[1], alpha))
    if buf.read(1):
        raise AdapterFileError("trailing bytes after adapter payload")
    return out


def save_adapters(aset: AdapterSet, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dump_adapters(aset))
    os.replace(tmp, path)


def load_adapters(path, dtype=torch.float32) -> AdapterSet:
    with open(path, "rb") as fh:
        return parse_adapters(fh.read(), dtype)
