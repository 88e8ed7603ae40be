import copy

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sketchmotion.denoiser import ConditioningContext, predict_noise
from sketchmotion.lora import (
    AdapterFileError,
    AdapterSet,
    LoraAdapter,
    adapter_set_for,
    dump_adapters,
    load_adapters,
    merge,
    merged_model,
    new_adapter,
    parse_adapters,
    save_adapters,
)


def randomized(aset, seed, scale=0.2):
    gen = torch.Generator().manual_seed(seed)
    for ad in aset:
        with torch.no_grad():
            ad.B.copy_(torch.randn(ad.B.shape, generator=gen, dtype=ad.B.dtype) * scale)
    return aset.detached()


def tiny_model_64(model):
    return copy.deepcopy(model).to(torch.float64)


def test_rank_one_outer_product():
    ad = LoraAdapter("spatial.q", torch.tensor([[1.0], [0.0]]), torch.tensor([[0.0, 1.0]]), 1.0)
    out = merge(torch.eye(2), [(ad, 1.0)])
    torch.testing.assert_close(out, torch.tensor([[1.0, 1.0], [0.0, 1.0]]), rtol=0, atol=0)


def test_default_scales_sum():
    ones = LoraAdapter("spatial.q", torch.ones(4, 1), torch.ones(1, 4), 1.0)
    m = LoraAdapter("temporal.q", torch.ones(4, 1), torch.ones(1, 4), 1.0)
    w0 = torch.arange(16.0).reshape(4, 4)
    torch.testing.assert_close(merge(w0, [(ones, 0.5), (m, 1.0)]), w0 + 1.5, rtol=0, atol=0)


def test_fresh_adapter_is_exact_noop():
    ad = new_adapter("temporal.v", 16, 16, rank=4, seed=3)
    assert torch.count_nonzero(ad.B) == 0
    w0 = torch.randn(16, 16)
    assert torch.equal(merge(w0, [(ad, 0.7)]), w0)


def test_rank_bound():
    new_adapter("spatial.q", 32, 32, rank=8)
    with pytest.raises(ValueError):
        new_adapter("spatial.q", 32, 32, rank=16)
    with pytest.raises(ValueError):
        new_adapter("spatial.q", 32, 32, rank=0)


def test_same_seed_same_a():
    assert torch.equal(new_adapter("spatial.k", 16, 16, 2, seed=9).A, new_adapter("spatial.k", 16, 16, 2, seed=9).A)
    assert not torch.equal(new_adapter("spatial.k", 16, 16, 2, seed=9).A, new_adapter("spatial.k", 16, 16, 2, seed=10).A)


@settings(max_examples=30, deadline=None)
@given(st.floats(-4, 4), st.integers(0, 1000))
def test_merge_is_linear_in_lambda(lam, seed):
    gen = torch.Generator().manual_seed(seed)
    ad = LoraAdapter("spatial.o", torch.randn(8, 2, generator=gen, dtype=torch.float64),
                     torch.randn(2, 8, generator=gen, dtype=torch.float64), 0.5)
    w0 = torch.randn(8, 8, generator=gen, dtype=torch.float64)
    one, two = merge(w0, [(ad, lam)]), merge(w0, [(ad, 2 * lam)])
    torch.testing.assert_close(two - one, lam * ad.delta(), rtol=0, atol=1e-12)
    torch.testing.assert_close(merge(w0, [(ad, lam), (ad, lam)]), two, rtol=0, atol=1e-12)


def test_merge_shape_mismatch():
    with pytest.raises(ValueError):
        merge(torch.zeros(4, 4), [(new_adapter("spatial.q", 8, 8, 2), 1.0)])


def test_role_segregation(tiny_model):
    with pytest.raises(ValueError):
        AdapterSet("M", {"spatial.q": new_adapter("spatial.q", 16, 16, 1)})
    aset = AdapterSet("A")
    with pytest.raises(ValueError):
        aset.add(new_adapter("temporal.q", 16, 16, 1))
    with pytest.raises(ValueError):
        AdapterSet("Z")
    with pytest.raises(KeyError):
        new_adapter("spatial.ff1", 16, 16, 1)
    assert {ad.target for ad in adapter_set_for(tiny_model, "M", 1)} == {"temporal.q", "temporal.k", "temporal.v", "temporal.o"}


def test_merged_matches_on_the_fly(tiny_model):
    # float64 so the comparison measures the algebra, not float32 rounding
    tiny_model = tiny_model_64(tiny_model)
    a = randomized(adapter_set_for(tiny_model, "A", 2, seed=1), 1)
    m = randomized(adapter_set_for(tiny_model, "M", 2, seed=2), 2)
    contributions = a.scaled(0.5) + m.scaled(1.0)
    merged = merged_model(tiny_model, contributions)
    c = ConditioningContext(tiny_model.embed_prompt("a square is sliding"), 321)
    z = torch.randn(4, 8, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    on_the_fly = predict_noise(z, c, tiny_model, contributions)
    folded = predict_noise(z, c, merged)
    torch.testing.assert_close(folded, on_the_fly, rtol=0, atol=1e-6)
    # the base model is untouched
    assert not torch.equal(merged.projection("spatial.q"), tiny_model.projection("spatial.q"))


def test_file_round_trip_is_bit_exact(tiny_model, tmp_path):
    aset = randomized(adapter_set_for(tiny_model, "M", 2, alpha=0.75, seed=4), 4)
    path = tmp_path / "m.skad"
    save_adapters(aset, path)
    back = load_adapters(path)
    assert back.role == "M"
    for a, b in zip(aset, back):
        assert a.target == b.target and a.alpha == b.alpha
        assert torch.equal(a.B, b.B) and torch.equal(a.A, b.A)
    assert dump_adapters(back) == path.read_bytes()


def test_header_layout(tiny_model):
    data = dump_adapters(adapter_set_for(tiny_model, "A", 1, seed=0).detached())
    assert data.startswith(b"SKAD1\nrole A\ncount 4\nadapter spatial.q 16 16 1 1.0\n")
    assert len(data) == len(b"SKAD1\nrole A\ncount 4\n") + 4 * (len(b"adapter spatial.q 16 16 1 1.0\n") + 4 * 32)


def test_corruption_is_reported(tiny_model):
    data = dump_adapters(randomized(adapter_set_for(tiny_model, "A", 1), 2))
    with pytest.raises(AdapterFileError, match="SKAD1"):
        parse_adapters(b"X" + data[1:])
    with pytest.raises(AdapterFileError, match="truncated"):
        parse_adapters(data[:-3])
    with pytest.raises(AdapterFileError, match="trailing"):
        parse_adapters(data + b"\0")


def test_cross_stage_merge_identical(tiny_model, tmp_path):
    a = randomized(adapter_set_for(tiny_model, "A", 1), 5)
    save_adapters(a, tmp_path / "a.skad")
    w0 = tiny_model.projection("spatial.v")
    loaded = load_adapters(tmp_path / "a.skad")
    assert torch.equal(merge(w0, a.scaled(0.5)[2:3]), merge(w0, loaded.scaled(0.5)[2:3]))
    assert np.isclose(float(merge(w0, a.scaled(0.0)[2:3]).sum()), float(w0.sum()))
