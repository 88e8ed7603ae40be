import numpy as np
import pytest
import torch

from sketchmotion.denoiser import init_weights
from sketchmotion.diffusion import build_schedule

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched():
    return build_schedule(1000)


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 16-wide model on 8x8 latents; randomised head so outputs are non-trivial."""
    m = init_weights(3, d_model=16, patch=4, latent_hw=(8, 8), max_frames=4)
    with torch.no_grad():
        m.out_w.copy_(torch.randn(m.out_w.shape, generator=torch.Generator().manual_seed(5)) * 0.3)
    m.register_prompt("a square is sliding")
    m.freeze()
    return m


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


PIPELINE_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Default-size runs on the translate fixture, one per seed, with per-command timings.

    Returns ``(clip_dir, {seed: (run_dir, timings)})``. Tests must not modify the run directories.
    """
    import time

    from helpers import run_cli

    root = tmp_path_factory.mktemp("pipeline")
    clip = root / "clip"
    run_cli("synth", "--out", clip)  # defaults: translate, 16 frames, built-in car sketch
    runs = {}
    for seed in PIPELINE_SEEDS:
        out = root / f"seed{seed}"
        times = {}
        for cmd, extra in (("pretrain", ()), ("stage1", ("--sketch", clip / "car.svg")),
                           ("stage2", ("--video-dir", clip)), ("stage3", ()), ("eval", ())):
            t0 = time.perf_counter()
            run_cli(cmd, "--out", out, "--seed", seed, *extra)
            times[cmd] = time.perf_counter() - t0
        runs[seed] = (out, times)
    return clip, runs
