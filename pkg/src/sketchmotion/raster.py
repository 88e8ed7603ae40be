"""Soft distance-field rasterizer for cubic strokes, with an analytic VJP.

Each stroke is flattened to a ``K``-point polyline at uniformly spaced Bezier
parameters. A pixel's coverage by stroke ``i`` is
``sigmoid((w_i / 2 - d_i) / tau)`` where ``d_i`` is the distance from the pixel
center to the nearest polyline segment; strokes combine by soft-OR,
``1 - prod_i (1 - c_i)``. Intensity 1 means ink.

Pixel ``(row, col)`` has its center at ``((col + .5) / W, (row + .5) / H)`` on
the unit canvas, with y pointing down as in SVG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .sketch import AnimatedSketch, SketchFrame

# keeps the distance differentiable when a pixel center lies on the polyline
_DIST_EPS2 = 1e-18


@dataclass(frozen=True)
class SoftnessConfig:
    tau: float = 0.006
    samples: int = 32

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if int(self.samples) != self.samples or self.samples < 8:
            raise ValueError(f"samples per curve must be an integer >= 8, got {self.samples}")


def bernstein_matrix(k: int) -> np.ndarray:
    """``(k, 4)`` cubic Bernstein weights at ``k`` evenly spaced parameters in [0, 1]."""
    s = np.linspace(0.0, 1.0, k)[:, None]
    r = 1.0 - s
    return np.hstack([r**3, 3 * r**2 * s, 3 * r * s**2, s**3])


def pixel_centers(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _check_shape(h, w):
    if h < 4 or w < 4:
        raise ValueError(f"raster must be at least 4x4, got {h}x{w}")


@numba.njit(cache=True)
def _nearest_kernel(samples, pix, dist, diff, u_out, seg_out):
    n, k, _ = samples.shape
    for p in range(pix.shape[0]):
        px = pix[p, 0]
        py = pix[p, 1]
        for i in range(n):
            best = np.inf
            for j in range(k - 1):
                ax = samples[i, j, 0]
                ay = samples[i, j, 1]
                abx = samples[i, j + 1, 0] - ax
                aby = samples[i, j + 1, 1] - ay
                len2 = abx * abx + aby * aby
                dx = px - ax
                dy = py - ay
                t = 0.0
                if len2 > 0.0:
                    t = (dx * abx + dy * aby) / len2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                ex = t * abx - dx
                ey = t * aby - dy
                d2 = ex * ex + ey * ey
                if d2 < best:
                    best = d2
                    diff[p, i, 0] = ex
                    diff[p, i, 1] = ey
                    u_out[p, i] = t
                    seg_out[p, i] = j
            dist[p, i] = np.sqrt(best + _DIST_EPS2)


def _nearest_segments(points: np.ndarray, h: int, w: int, k: int):
    """Distance from every pixel to every stroke's polyline.

    Returns ``(dist, diff, u, seg)`` each shaped ``(P, N)`` (``diff`` is
    ``(P, N, 2)``): distance, nearest-point minus pixel, projection parameter
    on the attaining segment, and that segment's index. The first segment
    attaining the minimum wins ties.
    """
    n = points.shape[0]
    samples = np.ascontiguousarray(np.einsum("kj,njc->nkc", bernstein_matrix(k), points))
    pix = pixel_centers(h, w)
    dist = np.empty((len(pix), n))
    diff = np.empty((len(pix), n, 2))
    u = np.empty((len(pix), n))
    seg = np.empty((len(pix), n), dtype=np.int64)
    _nearest_kernel(samples, pix, dist, diff, u, seg)
    return dist, diff, u, seg


def _coverage(points, widths, h, w, cfg):
    dist, diff, u, seg = _nearest_segments(points, h, w, cfg.samples)
    cov = expit((0.5 * widths - dist) / cfg.tau)
    return cov, dist, diff, u, seg


def _soft_or(cov: np.ndarray) -> np.ndarray:
    return 1.0 - np.prod(1.0 - cov, axis=1)


def _pullback(n, cfg, cov, dist, diff, u, seg, upstream):
    k = cfg.samples
    keep = 1.0 - cov
    # product of (1 - c_j) over j != i without dividing by (1 - c_i)
    ones = np.ones((len(keep), 1))
    before = np.cumprod(np.hstack([ones, keep[:, :-1]]), axis=1)
    rev = keep[:, ::-1]
    after = np.cumprod(np.hstack([ones, rev[:, :-1]]), axis=1)[:, ::-1]
    others = before * after

    g = upstream.reshape(-1, 1) * others * (-cov * keep / cfg.tau)  # d/d(dist), (P, N)
    normal = diff / dist[..., None]
    g_a = (g * (1.0 - u))[..., None] * normal  # (P, N, 2)
    g_b = (g * u)[..., None] * normal

    idx = (seg + np.arange(n) * k).ravel()  # sample index of segment start
    g_samples = np.zeros((n * k, 2))
    for c in range(2):
        g_samples[:, c] += np.bincount(idx, g_a[..., c].ravel(), minlength=n * k)
        g_samples[:, c] += np.bincount(idx + 1, g_b[..., c].ravel(), minlength=n * k)
    return np.einsum("kj,nkc->njc", bernstein_matrix(k), g_samples.reshape(n, k, 2))


def render(frame: SketchFrame, h: int, w: int, cfg: SoftnessConfig = SoftnessConfig()) -> np.ndarray:
    """Rasterize one frame to an ``(h, w)`` ink-coverage grid in [0, 1]."""
    _check_shape(h, w)
    cov = _coverage(frame.points, frame.widths, h, w, cfg)[0]
    return _soft_or(cov).reshape(h, w)


def render_video(anim: AnimatedSketch, h: int, w: int, cfg: SoftnessConfig = SoftnessConfig()) -> np.ndarray:
    _check_shape(h, w)
    return np.stack([render(anim.frame(k), h, w, cfg) for k in range(anim.n_frames)])


def render_vjp(
    frame: SketchFrame, h: int, w: int, cfg: SoftnessConfig, upstream: np.ndarray
) -> np.ndarray:
    """Gradient of ``sum(upstream * render(frame))`` with respect to the control points.

    Where two segments tie for the nearest one, the segment picked by the
    forward pass supplies the (sub)gradient.
    """
    _check_shape(h, w)
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (h, w):
        raise ValueError(f"upstream shape {upstream.shape} does not match raster {(h, w)}")
    n = frame.n_strokes
    if not np.any(upstream):
        return np.zeros_like(frame.points)

    cov, dist, diff, u, seg = _coverage(frame.points, frame.widths, h, w, cfg)
    return _pullback(n, cfg, cov, dist, diff, u, seg, upstream)


def render_video_vjp(anim: AnimatedSketch, h: int, w: int, cfg: SoftnessConfig, upstream: np.ndarray) -> np.ndarray:
    """Per-frame :func:`render_vjp`; returns an array shaped like ``anim.points``."""
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != (anim.n_frames, h, w):
        raise ValueError(f"upstream shape {upstream.shape} does not match video {(anim.n_frames, h, w)}")
    return np.stack([render_vjp(anim.frame(k), h, w, cfg, upstream[k]) for k in range(anim.n_frames)])


def render_with_vjp(frame: SketchFrame, h: int, w: int, cfg: SoftnessConfig = SoftnessConfig()):
    """Render once and return ``(image, vjp)`` where ``vjp(upstream)`` reuses the forward pass."""
    _check_shape(h, w)
    cov, dist, diff, u, seg = _coverage(frame.points, frame.widths, h, w, cfg)
    image = _soft_or(cov).reshape(h, w)

    def vjp(upstream):
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != (h, w):
            raise ValueError(f"upstream shape {upstream.shape} does not match raster {(h, w)}")
        return _pullback(frame.n_strokes, cfg, cov, dist, diff, u, seg, upstream)

    return image, vjp
