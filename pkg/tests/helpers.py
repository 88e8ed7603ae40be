"""Shared numerical checks for the unit and acceptance tests."""

import numpy as np

from sketchmotion.raster import _coverage, _nearest_segments, bernstein_matrix, render, render_vjp
from sketchmotion.sketch import SketchFrame

MAG_FLOOR = 1e-4
ABS_TOL_BELOW_FLOOR = 1e-7
LIVE_SLOPE = 1e-12
TIE_PROBES = np.array([-1.0, -0.5, -0.2, -0.1, -0.01, 0.01, 0.1, 0.2, 0.5, 1.0])


def random_frame(rng, n_strokes=3, lo=0.1, hi=0.9, wmin=0.03, wmax=0.1):
    return SketchFrame(rng.uniform(lo, hi, (n_strokes, 4, 2)), rng.uniform(wmin, wmax, n_strokes))


def mixed_error(analytic, numeric):
    """Relative error where either side is >= MAG_FLOOR, absolute error elsewhere.

    Returns ``(max_relative, max_absolute_below_floor)``.
    """
    analytic, numeric = np.ravel(analytic), np.ravel(numeric)
    mag = np.maximum(np.abs(analytic), np.abs(numeric))
    big = mag >= MAG_FLOOR
    diff = np.abs(analytic - numeric)
    rel = float(np.max(diff[big] / mag[big])) if big.any() else 0.0
    small = float(np.max(diff[~big])) if (~big).any() else 0.0
    return rel, small


def _kink_signature(points, h, w, samples, live):
    """Nearest segment and side of its centreline, for live pixel/stroke pairs."""
    _, diff, _, seg = _nearest_segments(points, h, w, samples)
    poly = np.einsum("kj,njc->nkc", bernstein_matrix(samples), points)
    strokes = np.broadcast_to(np.arange(points.shape[0]), seg.shape)
    direction = poly[strokes, seg + 1] - poly[strokes, seg]
    side = np.sign(diff[..., 0] * direction[..., 1] - diff[..., 1] * direction[..., 0])
    return seg[live], side[live]


def raster_fd(frame, h, w, cfg, upstream, step=1e-5):
    """Central differences of ``sum(upstream * render)`` per control coordinate.

    The distance field has kinks where a pixel's nearest polyline segment
    changes and where a centreline passes through a pixel. A coordinate whose
    stencil ``[-step, step]`` crosses either kink at some pixel is returned as
    NaN, since a difference quotient straddling a kink does not estimate the
    one-sided derivative. Crossings can undo themselves inside the stencil, so
    interior offsets are probed too. Pixels whose sigmoid is saturated (slope
    below ``LIVE_SLOPE``) cannot carry a visible kink and are ignored.
    """
    cov = _coverage(frame.points, frame.widths, h, w, cfg)[0]
    live = cov * (1.0 - cov) > LIVE_SLOPE
    base = _kink_signature(frame.points, h, w, cfg.samples, live)
    out = np.full(frame.points.shape, np.nan)
    for idx in np.ndindex(frame.points.shape):
        tie = False
        for off in TIE_PROBES * step:
            pts = frame.points.copy()
            pts[idx] += off
            probe = _kink_signature(pts, h, w, cfg.samples, live)
            if not (np.array_equal(probe[0], base[0]) and np.array_equal(probe[1], base[1])):
                tie = True
                break
        if tie:
            continue
        vals = []
        for sgn in (1.0, -1.0):
            pts = frame.points.copy()
            pts[idx] += sgn * step
            vals.append(float(np.sum(upstream * render(SketchFrame(pts, frame.widths), h, w, cfg))))
        out[idx] = (vals[0] - vals[1]) / (2 * step)
    return out


def raster_check(frame, h, w, cfg, upstream, step=1e-5):
    analytic = render_vjp(frame, h, w, cfg, upstream)
    numeric = raster_fd(frame, h, w, cfg, upstream, step)
    ok = ~np.isnan(numeric)
    rel, small = mixed_error(analytic[ok], numeric[ok])
    return rel, small, int((~ok).sum())


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}  ({seconds:.1f} s)"
    ACCEPTANCE_LINES[criterion] = line
    print(line)


def run_cli(*argv):
    from sketchmotion import cli

    code = cli.run([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited with {code}"
