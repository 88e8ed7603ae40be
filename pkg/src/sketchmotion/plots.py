"""Report figures, rendered off-screen to PNG."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_tracks(path, reports) -> None:
    """Centroid x and y per frame for every report, against the reference."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharex=True)
    ref = reports[0].reference_track
    frames = np.arange(len(ref))
    for axis, ax in enumerate(axes):
        ax.plot(frames, ref[:, axis], "k--", lw=1.5, label="reference")
        for r in reports:
            ax.plot(frames, r.track[:, axis], marker="o", ms=3, lw=1, label=r.label)
        ax.set_xlabel("frame")
        ax.set_ylabel("centroid " + "xy"[axis])
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_traces(path, traces: dict) -> None:
    """Training loss per step; ``traces`` maps a label to a sequence of losses."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for label, losses in traces.items():
        ax.plot(np.arange(len(losses)), losses, lw=0.8, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def plot_filmstrip(path, video: np.ndarray, every: int = 1) -> None:
    frames = video[::every]
    fig, axes = plt.subplots(1, len(frames), figsize=(1.1 * len(frames), 1.3))
    for ax, frame, k in zip(np.atleast_1d(axes), frames, range(0, len(video), every)):
        ax.imshow(1.0 - frame, cmap="gray", vmin=0, vmax=1)
        ax.set_title(str(k), fontsize=6)
        ax.axis("off")
    _save(fig, path)
