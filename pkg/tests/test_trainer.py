import numpy as np
import pytest
import torch

from sketchmotion.denoiser import init_weights
from sketchmotion.raster import SoftnessConfig
from sketchmotion.sketch import SketchFrame
from sketchmotion.synthetic import builtin_sketch, make_synthetic_video
from sketchmotion.trainer import (
    NonFiniteLoss,
    PretrainConfig,
    StageConfig,
    heldout_loss,
    new_words,
    pretrain,
    pretrain_pool,
    sketch_latent,
    train_appearance,
    train_motion,
)

SOFT = SoftnessConfig(0.01, 16)


@pytest.fixture
def model():
    m = init_weights(1, d_model=16, latent_hw=(8, 8), max_frames=4)
    with torch.no_grad():
        m.out_w.copy_(torch.randn(m.out_w.shape, generator=torch.Generator().manual_seed(2)) * 0.2)
    m.register_prompt("a square is sliding")
    m.freeze()
    return m


@pytest.fixture(scope="module")
def clip():
    return make_synthetic_video("translate", 4, 16, 16, velocity=(0.08, 0.05)).video


def snapshot(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_steps_must_be_positive():
    with pytest.raises(ValueError):
        StageConfig(steps=0)


def test_one_step_makes_b_nonzero(model):
    res = train_appearance(builtin_sketch("car"), "car", model, StageConfig(steps=1, batch_size=2), 16, SOFT)
    assert all(torch.count_nonzero(ad.B) > 0 for ad in res.adapters["A"])
    assert set(res.words) == {"car"}


def test_base_weights_never_change(model, clip):
    before = snapshot(model)
    train_appearance(builtin_sketch("car"), "car", model, StageConfig(steps=3, batch_size=2), 16, SOFT)
    train_motion(clip, "a block is sliding", model, StageConfig(steps=3, batch_size=2))
    after = snapshot(model)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_stage_reproducible(model, clip):
    cfg = StageConfig(steps=4, batch_size=2, seed=5)
    a = train_motion(clip, "a block is sliding", model, cfg)
    b = train_motion(clip, "a block is sliding", model, cfg)
    for role in ("A_prime", "M"):
        for x, y in zip(a.adapters[role], b.adapters[role]):
            assert torch.equal(x.B, y.B) and torch.equal(x.A, y.A)
    assert a.trace == b.trace
    assert torch.equal(a.words["block"], b.words["block"])


def test_motion_loss_decomposes(model, clip):
    res = train_motion(clip, "a square is sliding", model, StageConfig(steps=5, batch_size=2))
    for row in res.trace:
        assert abs(row["loss"] - (row["spatial"] + row["temporal"])) <= 1e-9
    assert res.words == {}
    assert {ad.target for ad in res.adapters["M"]} == {"temporal.q", "temporal.k", "temporal.v", "temporal.o"}


def test_motion_needs_two_frames(model, clip):
    with pytest.raises(ValueError):
        train_motion(clip[:1], "a square is sliding", model, StageConfig(steps=1))


def test_empty_sketch_rejected(model):
    far = SketchFrame(np.full((1, 4, 2), 9.0), np.array([0.02]))
    with pytest.raises(ValueError, match="empty"):
        sketch_latent(far, 16, SOFT)


def test_new_words_only_for_unknown(model):
    words = new_words(model, "a square is wobbling", seed=0)
    assert list(words) == ["wobbling"]
    assert words["wobbling"].requires_grad


def test_heldout_draws_are_fixed(model, clip):
    from sketchmotion.diffusion import build_schedule, encode

    sched = build_schedule()
    z0 = encode(clip)
    cfg = StageConfig(eval_draws=20)
    assert heldout_loss(model, z0, "a square is sliding", sched, cfg) == heldout_loss(
        model, z0, "a square is sliding", sched, cfg)


def test_non_finite_loss_is_raised(model, clip):
    with torch.no_grad():
        model.out_b.fill_(float("nan"))
    with pytest.raises(NonFiniteLoss):
        train_motion(clip, "a square is sliding", model, StageConfig(steps=1, batch_size=1))


def test_pretrain_reduces_loss_and_freezes():
    cfg = PretrainConfig(steps=60, pool_size=8, n_frames=4, resolution=16, batch_size=2)
    m = init_weights(0, d_model=16, latent_hw=(8, 8), max_frames=4)
    pool = pretrain_pool(cfg)
    assert len(pool) == 8 and pool[0].prompt == "a square is sliding"
    trace = pretrain(m, cfg, pool=pool)
    losses = [r["loss"] for r in trace]
    assert np.mean(losses[-15:]) < np.mean(losses[:15])
    assert not any(p.requires_grad for p in m.parameters())
