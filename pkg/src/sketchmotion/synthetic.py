"""Synthetic reference clips with known motion, and a few built-in sketches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import SoftnessConfig, render
from .sketch import SketchFrame

MOTION_KINDS = ("translate", "bounce", "jump", "scale-pulse")
SHAPES = ("square", "disc")


@dataclass
class SyntheticClip:
    video: np.ndarray  # (F, H, W) ink coverage
    track: np.ndarray  # (F, 2) ground-truth shape centers, canvas units
    sizes: np.ndarray  # (F,) side length or diameter


def motion_track(kind: str, n_frames: int, start=(0.3, 0.3), velocity=(0.025, 0.025), height=0.3,
                 bounces: int = 1, size: float = 0.25, pulse: float = 0.3):
    """Per-frame centers ``(F, 2)`` and sizes ``(F,)`` for one motion kind."""
    if n_frames < 2:
        raise ValueError("a clip needs at least two frames")
    f = np.arange(n_frames, dtype=float)
    start = np.asarray(start, dtype=float)
    sizes = np.full(n_frames, float(size))
    if kind == "translate":
        centers = start + f[:, None] * np.asarray(velocity, dtype=float)
    elif kind in ("bounce", "jump"):
        # each arc is a parabola that leaves and returns to the floor at start[1]
        phase = (f / (n_frames - 1) * bounces) % 1.0
        phase[-1] = 1.0 if bounces else 0.0
        lift = 4.0 * height * phase * (1.0 - phase)
        x = np.full(n_frames, start[0]) if kind == "bounce" else start[0] + f * velocity[0]
        centers = np.stack([x, start[1] - lift], axis=1)
    elif kind == "scale-pulse":
        centers = np.tile(start, (n_frames, 1))
        sizes = size * (1.0 + pulse * np.sin(2 * math.pi * f / n_frames))
    else:
        raise ValueError(f"unknown motion kind {kind!r}; expected one of {MOTION_KINDS}")
    return centers, sizes


def _interval_overlap(lo, hi, n):
    """Fraction of each of ``n`` unit-canvas pixel intervals covered by ``[lo, hi]``."""
    edges = np.arange(n + 1) / n
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, None) * n


def draw_shape(shape: str, center, size: float, h: int, w: int, supersample: int = 4) -> np.ndarray:
    cx, cy = center
    if shape == "square":
        half = size / 2
        return np.outer(_interval_overlap(cy - half, cy + half, h), _interval_overlap(cx - half, cx + half, w))
    if shape == "disc":
        s = supersample
        ys = (np.arange(h * s) + 0.5) / (h * s)
        xs = (np.arange(w * s) + 0.5) / (w * s)
        inside = ((xs[None] - cx) ** 2 + (ys[:, None] - cy) ** 2) <= (size / 2) ** 2
        return inside.reshape(h, s, w, s).mean(axis=(1, 3))
    raise ValueError(f"unknown shape {shape!r}")


def make_synthetic_video(kind: str, n_frames: int, h: int, w: int, shape: str = "square",
                         rng: np.random.Generator | None = None, **geometry) -> SyntheticClip:
    """Analytic motion of a simple shape.

    Deterministic given ``geometry``; ``rng`` is accepted so callers can draw
    geometry from it, and is unused when every parameter is given.
    """
    centers, sizes = motion_track(kind, n_frames, **geometry)
    video = np.stack([draw_shape(shape, c, s, h, w) for c, s in zip(centers, sizes)])
    return SyntheticClip(video, centers, sizes)


def random_geometry(kind: str, rng: np.random.Generator) -> dict:
    size = rng.uniform(0.15, 0.3)
    if kind == "translate":
        vel = rng.uniform(-0.025, 0.025, 2)
        start = 0.5 - 7.5 * vel + rng.uniform(-0.1, 0.1, 2)
        return {"start": start, "velocity": vel, "size": size}
    if kind == "bounce":
        return {"start": (rng.uniform(0.3, 0.7), rng.uniform(0.65, 0.8)), "height": rng.uniform(0.15, 0.35),
                "bounces": int(rng.integers(1, 3)), "size": size}
    if kind == "jump":
        vx = rng.uniform(-0.02, 0.02)
        return {"start": (0.5 - 7.5 * vx, rng.uniform(0.65, 0.8)), "velocity": (vx, 0.0),
                "height": rng.uniform(0.15, 0.35), "size": size}
    return {"start": rng.uniform(0.35, 0.65, 2), "size": size, "pulse": rng.uniform(0.2, 0.4)}


# --------------------------------------------------------------------------- sketches


def _arc(cx, cy, r, a0, a1):
    """Cubic approximation of a circular arc from angle ``a0`` to ``a1`` (radians), at most half a turn."""
    if abs(a1 - a0) > math.pi + 1e-12:
        raise ValueError("one cubic cannot span more than half a circle")
    k = 4.0 / 3.0 * math.tan((a1 - a0) / 4.0)
    p0 = np.array([cx + r * math.cos(a0), cy + r * math.sin(a0)])
    p3 = np.array([cx + r * math.cos(a1), cy + r * math.sin(a1)])
    p1 = p0 + k * r * np.array([-math.sin(a0), math.cos(a0)])
    p2 = p3 - k * r * np.array([-math.sin(a1), math.cos(a1)])
    return np.stack([p0, p1, p2, p3])


def _line(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.stack([a, a + (b - a) / 3, a + 2 * (b - a) / 3, b])


def builtin_sketch(name: str = "car", width: float = 0.03, scale: float = 1.0, center=(0.5, 0.5)) -> SketchFrame:
    """Small hand-built sketches on the unit canvas, centered near ``center``."""
    if name == "car":
        strokes = [
            _line((-0.2, 0.05), (0.2, 0.05)),
            [(-0.2, 0.05), (-0.22, -0.02), (-0.2, -0.05), (-0.12, -0.06)],
            [(-0.12, -0.06), (-0.08, -0.16), (0.06, -0.17), (0.1, -0.06)],
            [(0.1, -0.06), (0.17, -0.06), (0.22, -0.03), (0.2, 0.05)],
            _arc(-0.11, 0.07, 0.045, 0.0, math.pi),
            _arc(-0.11, 0.07, 0.045, math.pi, 2 * math.pi),
            _arc(0.11, 0.07, 0.045, 0.0, math.pi),
            _arc(0.11, 0.07, 0.045, math.pi, 2 * math.pi),
        ]
    elif name == "fish":
        strokes = [
            [(-0.18, 0.0), (-0.08, -0.14), (0.1, -0.12), (0.16, 0.0)],
            [(-0.18, 0.0), (-0.08, 0.14), (0.1, 0.12), (0.16, 0.0)],
            _line((0.16, 0.0), (0.24, -0.08)),
            _line((0.24, -0.08), (0.24, 0.08)),
            _line((0.24, 0.08), (0.16, 0.0)),
            _arc(-0.1, -0.02, 0.02, 0.0, math.pi),
            _arc(-0.1, -0.02, 0.02, math.pi, 2 * math.pi),
        ]
    elif name == "house":
        strokes = [
            _line((-0.15, 0.15), (0.15, 0.15)),
            _line((-0.15, 0.15), (-0.15, -0.05)),
            _line((0.15, 0.15), (0.15, -0.05)),
            _line((-0.2, -0.03), (0.0, -0.2)),
            _line((0.0, -0.2), (0.2, -0.03)),
            _line((-0.03, 0.15), (-0.03, 0.05)),
        ]
    else:
        raise ValueError(f"unknown built-in sketch {name!r}")
    pts = np.stack([np.asarray(s, dtype=float) for s in strokes]) * scale + np.asarray(center, dtype=float)
    return SketchFrame(pts, np.full(len(pts), width))


def random_doodle(rng: np.random.Generator, n_strokes: int = 4, width: float = 0.03, extent: float = 0.2,
                  center=(0.5, 0.5)) -> SketchFrame:
    """A few random connected cubic strokes, for pretraining data."""
    pts = []
    cur = np.asarray(center, float) + rng.uniform(-extent / 2, extent / 2, 2)
    for _ in range(n_strokes):
        ctrl = cur + np.cumsum(rng.uniform(-extent / 2, extent / 2, (3, 2)), axis=0)
        ctrl = np.clip(ctrl, np.asarray(center) - extent, np.asarray(center) + extent)
        pts.append(np.vstack([cur, ctrl]))
        cur = ctrl[-1]
    return SketchFrame(np.stack(pts), np.full(n_strokes, width))


def moving_sketch_video(frame: SketchFrame, centers: np.ndarray, sizes: np.ndarray, size0: float,
                        h: int, w: int, cfg: SoftnessConfig) -> np.ndarray:
    """Render ``frame`` carried along a track, scaled by ``sizes / size0`` about its own center."""
    own = frame.points.reshape(-1, 2).mean(axis=0)
    out = []
    for c, s in zip(centers, sizes):
        pts = (frame.points - own) * (s / size0) + c
        out.append(render(SketchFrame(pts, frame.widths), h, w, cfg))
    return np.stack(out)
