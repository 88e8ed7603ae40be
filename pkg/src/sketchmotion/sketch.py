"""Cubic Bezier stroke sketches: data model and SVG I/O.

Geometry lives on the unit canvas. A frame stores its control points as an
``(N, 4, 2)`` array plus one width per stroke; an animation stacks ``F`` such
arrays into ``(F, N, 4, 2)`` and shares the widths across frames.
"""

from __future__ import annotations

import re
import xml.parsers.expat
from dataclasses import dataclass, field

import numpy as np

DEFAULT_WIDTH = 0.012
CLAMP_LO, CLAMP_HI = -0.5, 1.5

_SVG_NS = "http://www.w3.org/2000/svg"
_ALLOWED_CONTAINERS = {"svg", "g", "title", "desc", "metadata", "animate", "set"}
_NUMBER = r"[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?"
_TOKEN = re.compile(rf"([A-Za-z])|({_NUMBER})|([\s,]+)|(.)")


class SvgParseError(ValueError):
    """Raised for SVG input outside the supported subset."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CubicStroke:
    points: np.ndarray
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.shape != (4, 2):
            raise ValueError(f"a cubic stroke needs 4 control points, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("control points must be finite")
        if not self.width > 0:
            raise ValueError(f"stroke width must be positive, got {self.width}")
        object.__setattr__(self, "points", pts)


@dataclass
class SketchFrame:
    """An ordered set of ``N`` cubic strokes on the unit canvas."""

    points: np.ndarray
    widths: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float)
        if self.points.ndim != 3 or self.points.shape[1:] != (4, 2):
            raise ValueError(f"expected (N, 4, 2) control points, got {self.points.shape}")
        n = self.points.shape[0]
        if n < 1:
            raise ValueError("a sketch frame needs at least one stroke")
        if self.widths is None:
            self.widths = np.full(n, DEFAULT_WIDTH)
        self.widths = np.array(self.widths, dtype=float).reshape(-1)
        if self.widths.shape != (n,):
            raise ValueError("one width per stroke required")
        if np.any(self.widths <= 0):
            raise ValueError("stroke widths must be positive")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("control points must be finite")

    @classmethod
    def from_strokes(cls, strokes) -> "SketchFrame":
        strokes = list(strokes)
        return cls(np.stack([s.points for s in strokes]), np.array([s.width for s in strokes]))

    @property
    def n_strokes(self) -> int:
        return self.points.shape[0]

    @property
    def strokes(self) -> list[CubicStroke]:
        return [CubicStroke(p.copy(), float(w)) for p, w in zip(self.points, self.widths)]

    def copy(self) -> "SketchFrame":
        return SketchFrame(self.points.copy(), self.widths.copy())

    def __eq__(self, other):
        if not isinstance(other, SketchFrame):
            return NotImplemented
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.widths, other.widths)
        )

    def allclose(self, other: "SketchFrame", atol: float = 1e-6) -> bool:
        return (
            self.points.shape == other.points.shape
            and np.allclose(self.points, other.points, rtol=0, atol=atol)
            and np.allclose(self.widths, other.widths, rtol=0, atol=atol)
        )


@dataclass
class AnimatedSketch:
    """``F`` frames of the same ``N`` strokes; ``points`` has shape ``(F, N, 4, 2)``."""

    points: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        self.points = np.array(self.points, dtype=float)
        if self.points.ndim != 4 or self.points.shape[2:] != (4, 2):
            raise ValueError(f"expected (F, N, 4, 2) control points, got {self.points.shape}")
        if self.points.shape[0] < 1 or self.points.shape[1] < 1:
            raise ValueError("need at least one frame and one stroke")
        self.widths = np.array(self.widths, dtype=float).reshape(-1)
        if self.widths.shape != (self.points.shape[1],):
            raise ValueError("one width per stroke required")

    @classmethod
    def from_frames(cls, frames) -> "AnimatedSketch":
        frames = list(frames)
        if not frames:
            raise ValueError("need at least one frame")
        n, widths = frames[0].n_strokes, frames[0].widths
        for k, fr in enumerate(frames):
            if fr.n_strokes != n or not np.array_equal(fr.widths, widths):
                raise ValueError(f"frame {k} differs in stroke count or widths")
        return cls(np.stack([f.points for f in frames]), widths.copy())

    @property
    def n_frames(self) -> int:
        return self.points.shape[0]

    @property
    def n_strokes(self) -> int:
        return self.points.shape[1]

    def frame(self, k: int) -> SketchFrame:
        return SketchFrame(self.points[k].copy(), self.widths.copy())

    @property
    def frames(self) -> list[SketchFrame]:
        return [self.frame(k) for k in range(self.n_frames)]

    def copy(self) -> "AnimatedSketch":
        return AnimatedSketch(self.points.copy(), self.widths.copy())


def replicate_frames(frame: SketchFrame, n_frames: int) -> AnimatedSketch:
    """Duplicate a static frame ``n_frames`` times as the animation's starting point."""
    if int(n_frames) != n_frames or n_frames < 1:
        raise ValueError(f"frame count must be a positive integer, got {n_frames}")
    pts = np.repeat(frame.points[None], int(n_frames), axis=0)
    return AnimatedSketch(pts, frame.widths.copy())


# --------------------------------------------------------------------------- parsing


@dataclass
class _Element:
    tag: str
    attrs: dict
    line: int
    children: list = field(default_factory=list)


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1].rsplit(":", 1)[-1] if ("}" in tag or ":" in tag) else tag


def _parse_xml(text: str) -> _Element:
    parser = xml.parsers.expat.ParserCreate()
    stack: list[_Element] = []
    root: list[_Element] = []

    def start(name, attrs):
        el = _Element(_local(name), dict(attrs), parser.CurrentLineNumber)
        if stack:
            stack[-1].children.append(el)
        else:
            root.append(el)
        stack.append(el)

    def end(name):
        stack.pop()

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    try:
        parser.Parse(text, True)
    except xml.parsers.expat.ExpatError as exc:
        raise SvgParseError(f"malformed XML: {xml.parsers.expat.ErrorString(exc.code)}", exc.lineno) from None
    if not root or root[0].tag != "svg":
        raise SvgParseError("document root is not an <svg> element", root[0].line if root else 1)
    return root[0]


def _viewbox(svg: _Element) -> tuple[float, float, float]:
    vb = svg.attrs.get("viewBox")
    if vb is None:
        raise SvgParseError("missing viewBox", svg.line)
    try:
        minx, miny, w, h = (float(v) for v in re.split(r"[\s,]+", vb.strip()))
    except ValueError:
        raise SvgParseError(f"bad viewBox {vb!r}", svg.line) from None
    if w <= 0 or h <= 0:
        raise SvgParseError(f"viewBox extent must be positive: {vb!r}", svg.line)
    return minx, miny, max(w, h)


def _tokenize(d: str, line: int):
    for cmd, num, _ws, bad in _TOKEN.findall(d):
        if bad:
            raise SvgParseError(f"unexpected character {bad!r} in path data", line)
        if cmd:
            yield cmd
        elif num:
            yield float(num)


def parse_path_data(d: str, line: int = 0) -> list[np.ndarray]:
    """Turn ``d`` into a list of ``(4, 2)`` cubic segments in source units."""
    tokens = list(_tokenize(d, line))
    segments: list[np.ndarray] = []
    cur = np.zeros(2)
    start = None
    cmd = None
    i = 0

    def take(count):
        nonlocal i
        vals = tokens[i : i + count]
        if len(vals) < count or any(isinstance(v, str) for v in vals):
            raise SvgParseError(f"command {cmd} expects {count} numbers", line)
        i += count
        return np.array(vals, dtype=float)

    while i < len(tokens):
        tok = tokens[i]
        if isinstance(tok, str):
            if tok not in "MmCcLl":
                raise SvgParseError(f"unsupported command {tok}", line)
            cmd = tok
            i += 1
        elif cmd is None:
            raise SvgParseError("path data must begin with a moveto", line)
        rel = cmd.islower()
        base = cur if rel else np.zeros(2)
        if cmd in "Mm":
            cur = base + take(2)
            start = cur.copy()
            # extra coordinate pairs after a moveto are implicit linetos
            cmd = "l" if rel else "L"
        elif cmd in "Cc":
            if start is None:
                raise SvgParseError("curve before moveto", line)
            vals = take(6).reshape(3, 2) + base
            segments.append(np.vstack([cur, vals]))
            cur = vals[2]
        elif cmd in "Ll":
            if start is None:
                raise SvgParseError("line before moveto", line)
            end = base + take(2)
            segments.append(np.vstack([cur, cur + (end - cur) / 3.0, cur + 2.0 * (end - cur) / 3.0, end]))
            cur = end
    return segments


def _strokes_in(el: _Element, origin, scale) -> list[CubicStroke]:
    strokes = []
    for child in el.children:
        if child.tag in ("title", "desc", "metadata", "animate", "set"):
            continue
        if "transform" in child.attrs:
            raise SvgParseError("transforms are not supported", child.line)
        if child.tag == "g":
            strokes.extend(_strokes_in(child, origin, scale))
        elif child.tag == "path":
            d = child.attrs.get("d")
            if d is None:
                raise SvgParseError("path without d attribute", child.line)
            width = child.attrs.get("stroke-width")
            width = DEFAULT_WIDTH if width is None else float(width) / scale
            for seg in parse_path_data(d, child.line):
                strokes.append(CubicStroke((seg - origin) / scale, width))
        else:
            raise SvgParseError(f"unsupported element <{child.tag}>", child.line)
    return strokes


def parse_svg(text: str) -> SketchFrame:
    """Parse the supported SVG subset into a unit-canvas frame."""
    svg = _parse_xml(text)
    minx, miny, scale = _viewbox(svg)
    strokes = _strokes_in(svg, np.array([minx, miny]), scale)
    if not strokes:
        raise SvgParseError("no strokes found", svg.line)
    return SketchFrame.from_strokes(strokes)


def parse_animated_svg(text: str) -> AnimatedSketch:
    """Recover an animation written by :func:`write_animated_svg`."""
    svg = _parse_xml(text)
    minx, miny, scale = _viewbox(svg)
    origin = np.array([minx, miny])
    groups = {}
    for child in svg.children:
        m = re.fullmatch(r"frame-(\d+)", child.attrs.get("id", ""))
        if child.tag == "g" and m:
            groups[int(m.group(1))] = child
    if not groups or sorted(groups) != list(range(len(groups))):
        raise SvgParseError("expected groups frame-0 .. frame-(F-1)", svg.line)
    frames = [SketchFrame.from_strokes(_strokes_in(groups[k], origin, scale)) for k in range(len(groups))]
    return AnimatedSketch.from_frames(frames)


# --------------------------------------------------------------------------- writing


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def _path_elements(frame: SketchFrame, indent: str) -> list[str]:
    lines = []
    pts = np.clip(frame.points, CLAMP_LO, CLAMP_HI)
    for p, w in zip(pts, frame.widths):
        d = "M {} {} C {} {}, {} {}, {} {}".format(*(_fmt(v) for v in p.reshape(-1)))
        lines.append(
            f'{indent}<path d="{d}" stroke="black" stroke-width="{_fmt(w)}" '
            'fill="none" stroke-linecap="round"/>'
        )
    return lines


def _header() -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="{_SVG_NS}" viewBox="0 0 1 1" width="256" height="256">',
    ]


def write_svg(frame: SketchFrame) -> str:
    lines = _header() + _path_elements(frame, "  ") + ["</svg>", ""]
    return "\n".join(lines)


def write_animated_svg(anim: AnimatedSketch, fps: int = 8) -> str:
    """One ``<g id="frame-k">`` per frame, shown in turn by discrete visibility animation."""
    if int(fps) != fps or fps < 1:
        raise ValueError("fps must be a positive integer")
    n = anim.n_frames
    dur = _fmt(n / fps)
    key_times = ";".join(_fmt(k / n) for k in range(n))
    lines = _header()
    for k in range(n):
        fr = anim.frame(k)
        if n == 1:
            lines.append(f'  <g id="frame-{k}">')
        else:
            values = ";".join("visible" if j == k else "hidden" for j in range(n))
            lines.append(f'  <g id="frame-{k}" visibility="hidden">')
            lines.append(
                f'    <animate attributeName="visibility" values="{values}" keyTimes="{key_times}" '
                f'dur="{dur}s" calcMode="discrete" repeatCount="indefinite"/>'
            )
        lines.extend(_path_elements(fr, "    "))
        lines.append("  </g>")
    lines += ["</svg>", ""]
    return "\n".join(lines)
