"""Desk-scale training and distillation claims, checked on the shared default-size runs."""

import shutil

import numpy as np
import pytest
import torch

from sketchmotion import cli
from sketchmotion.config import build_config
from sketchmotion.denoiser import init_weights
from sketchmotion.diffusion import build_schedule, encode
from sketchmotion.formats import load_weights, read_csv, read_pgm_frames, write_pgm_frames
from sketchmotion.lora import load_adapters
from sketchmotion.metrics import centroid_track
from sketchmotion.raster import render_video
from sketchmotion.trainer import StageConfig, heldout_loss

from helpers import run_cli

pytestmark = pytest.mark.slow

WINDOW = 50


def moving_average(values, window=WINDOW):
    return np.convolve(values, np.ones(window) / window, mode="valid")


def adapter_usage(path):
    """Frobenius norm of the summed low-rank updates of an adapter file."""
    return float(np.sqrt(sum(float(torch.sum(ad.delta() ** 2)) for ad in load_adapters(path))))


def path_variance(video):
    track = centroid_track(video)
    return float(np.sum(np.var(track, axis=0)))


def test_pretraining_beats_untrained_model(pipeline):
    clip, runs = pipeline
    out, _ = runs[0]
    base = load_weights(out / "base.skwt")
    lat = base.latent_hw
    untrained = init_weights(0, d_model=base.d_model, latent_hw=lat, max_frames=16)
    untrained.register_prompt("a square is sliding")
    sched = build_schedule(base.T)
    z0 = encode(read_pgm_frames(clip))
    cfg = StageConfig()
    trained = heldout_loss(base, z0, "a square is sliding", sched, cfg)
    zero = heldout_loss(untrained, z0, "a square is sliding", sched, cfg)
    assert trained <= 0.7 * zero


@pytest.mark.parametrize("trace", ["pretrain_trace.csv", "stage1_trace.csv", "stage2_trace.csv"])
def test_loss_trace_non_increasing_under_moving_average(pipeline, trace):
    out, _ = pipeline[1][0]
    _, rows = read_csv(out / trace)
    ma = moving_average(np.array([float(r[1]) for r in rows]))
    rises = np.diff(ma)
    assert np.all(rises <= 0), f"{np.count_nonzero(rises > 0)} of {len(rises)} steps rise, max {rises.max():.4f}"


def test_static_clip_needs_less_motion_adapter(pipeline, tmp_path):
    clip, runs = pipeline
    out, _ = runs[0]
    static = tmp_path / "static"
    write_pgm_frames(static, np.repeat(read_pgm_frames(clip)[:1], 16, axis=0))
    shutil.copy(out / "base.skwt", tmp_path / "base.skwt")
    run_cli("stage2", "--out", tmp_path, "--seed", 0, "--video-dir", static)
    moving, still = adapter_usage(out / "M.skad"), adapter_usage(tmp_path / "M.skad")
    assert still < 0.25 * moving, f"static {still:.4f} vs moving {moving:.4f}"


def test_dropping_motion_adapter_flattens_the_path(pipeline):
    _, runs = pipeline
    out, _ = runs[0]
    cfg = build_config([], {"out": str(out), "seed": 0})
    art = cli.Artifacts(out)
    res = cfg.resolution
    full = path_variance(read_pgm_frames(out / "frames"))
    without = cli.run_distill(cfg, art, cfg.lambda_a, 0.0)
    flat = path_variance(render_video(without.anim, res, res, cli.softness(cfg)))
    assert flat < 0.3 * full, f"without M {flat:.2e} vs full {full:.2e}"
