"""Animate a vector sketch with motion borrowed from a reference clip."""

from .sketch import AnimatedSketch, CubicStroke, SketchFrame, parse_svg, replicate_frames, write_animated_svg, write_svg
from .raster import SoftnessConfig, render, render_video, render_vjp

__all__ = [
    "AnimatedSketch",
    "CubicStroke",
    "SketchFrame",
    "SoftnessConfig",
    "parse_svg",
    "render",
    "render_video",
    "render_vjp",
    "replicate_frames",
    "write_animated_svg",
    "write_svg",
]
__version__ = "0.1.0"
