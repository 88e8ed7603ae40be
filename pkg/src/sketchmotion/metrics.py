"""Pixel-space proxies for appearance, motion and temporal quality.

Scores compare block-pooled, mean-centred frames by cosine, and ink centroid
tracks by Pearson correlation. They rank runs against each other; they are
not calibrated against any learned embedding.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

POOL_GRID = 8
METRIC_COLUMNS = ("appearance", "motion", "temporal")


class DegenerateScoreWarning(RuntimeWarning):
    pass


def pooled_vector(frame: np.ndarray, grid: int = POOL_GRID) -> np.ndarray:
    """Average ``frame`` over a ``grid x grid`` block layout and subtract the mean."""
    frame = np.asarray(frame, dtype=float)
    h, w = frame.shape
    if h % grid or w % grid:
        raise ValueError(f"frame {h}x{w} is not divisible into a {grid}x{grid} grid")
    v = frame.reshape(grid, h // grid, grid, w // grid).mean(axis=(1, 3)).ravel()
    return v - v.mean()


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("pooled frame is constant; cosine scored as 0", DegenerateScoreWarning, stacklevel=3)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def appearance_alignment(frames: np.ndarray, sketch: np.ndarray) -> float:
    frames = np.asarray(frames, dtype=float)
    if frames.shape[1:] != np.shape(sketch):
        raise ValueError(f"frame shape {frames.shape[1:]} does not match sketch {np.shape(sketch)}")
    ref = pooled_vector(sketch)
    return float(np.mean([_cosine(pooled_vector(f), ref) for f in frames]))


def temporal_consistency(frames: np.ndarray) -> float:
    frames = np.asarray(frames, dtype=float)
    if len(frames) < 2:
        raise ValueError("temporal consistency needs at least two frames")
    vecs = [pooled_vector(f) for f in frames]
    return float(np.mean([_cosine(a, b) for a, b in zip(vecs[:-1], vecs[1:])]))


def centroid_track(frames: np.ndarray) -> np.ndarray:
    """Per-frame ink centre of mass ``(F, 2)`` as (x, y) in unit coordinates.

    A frame without ink gets the image centre.
    """
    frames = np.asarray(frames, dtype=float)
    _, h, w = frames.shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    mass = frames.sum(axis=(1, 2))
    safe = np.where(mass > 0, mass, 1.0)
    cx = (frames.sum(axis=1) @ xs) / safe
    cy = (frames.sum(axis=2) @ ys) / safe
    track = np.stack([cx, cy], axis=1)
    track[mass <= 0] = 0.5
    return track


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    # constant tracks carry no motion
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def track_alignment(track: np.ndarray, reference: np.ndarray) -> float:
    track, reference = np.asarray(track, dtype=float), np.asarray(reference, dtype=float)
    if track.shape != reference.shape:
        raise ValueError(f"track of {len(track)} frames does not match reference of {len(reference)}")
    return 0.5 * (_pearson(track[:, 0], reference[:, 0]) + _pearson(track[:, 1], reference[:, 1]))


def motion_alignment(frames: np.ndarray, reference_track: np.ndarray) -> float:
    return track_alignment(centroid_track(frames), reference_track)


@dataclass
class EvalReport:
    appearance_alignment: float
    motion_alignment: float
    temporal_consistency: float
    track: np.ndarray
    reference_track: np.ndarray
    label: str = "full"

    def row(self) -> dict:
        return {
            "variant": self.label,
            "appearance": self.appearance_alignment,
            "motion": self.motion_alignment,
            "temporal": self.temporal_consistency,
        }


def evaluate(frames: np.ndarray, sketch: np.ndarray, reference_track: np.ndarray, label: str = "full") -> EvalReport:
    return EvalReport(
        appearance_alignment(frames, sketch),
        motion_alignment(frames, reference_track),
        temporal_consistency(frames),
        centroid_track(frames),
        np.asarray(reference_track, dtype=float),
        label,
    )


@dataclass
class AblationTable:
    reports: list[EvalReport] = field(default_factory=list)

    def add(self, report: EvalReport) -> None:
        self.reports.append(report)

    def get(self, label: str) -> EvalReport:
        for r in self.reports:
            if r.label == label:
                return r
        raise KeyError(label)

    def deltas(self, baseline: str = "full") -> dict:
        """Score difference ``baseline - variant`` for each other row."""
        base = self.get(baseline).row()
        return {
            r.label: {c: base[c] - r.row()[c] for c in METRIC_COLUMNS}
            for r in self.reports
            if r.label != baseline
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(("variant",) + METRIC_COLUMNS)
        for r in self.reports:
            row = r.row()
            out.writerow([row["variant"]] + [repr(float(row[c])) for c in METRIC_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        rows = list(csv.DictReader(io.StringIO(text)))
        table = cls()
        empty = np.zeros((0, 2))
        for row in rows:
            table.add(EvalReport(float(row["appearance"]), float(row["motion"]), float(row["temporal"]),
                                 empty, empty, row["variant"]))
        return table

    def to_text(self) -> str:
        lines = [f"{'variant':<12}" + "".join(f"{c:>12}" for c in METRIC_COLUMNS)]
        for r in self.reports:
            row = r.row()
            lines.append(f"{r.label:<12}" + "".join(f"{row[c]:>12.4f}" for c in METRIC_COLUMNS))
        if len(self.reports) > 1 and any(r.label == "full" for r in self.reports):
            for label, d in self.deltas().items():
                lines.append(f"{'d ' + label:<12}" + "".join(f"{d[c]:>+12.4f}" for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"
