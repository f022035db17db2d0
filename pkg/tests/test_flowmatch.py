import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmaster.errors import (
    EmptyDatasetError, NonFiniteLossError, NonFiniteStateError, RangeError, ShapeError, ValidationError,
)
from conceptmaster.flowmatch import (
    DEFAULT_MIX, FreezePolicy, Trainer, cfg_velocity, dropout_conditions, euler_sample, fm_loss, interpolate,
    mix_sampler,
)


def test_interpolate_endpoints_and_midpoint():
    z0, eps = torch.randn(3, 4, 5), torch.randn(3, 4, 5)
    assert torch.equal(interpolate(z0, eps, 0.0), z0)
    assert torch.equal(interpolate(z0, eps, 1.0), eps)
    mid = interpolate(torch.zeros(2, 2), 2 * torch.ones(2, 2), 0.5)
    assert torch.equal(mid, torch.ones(2, 2))


def test_interpolate_per_sample_t():
    z0, eps = torch.randn(3, 2, 2), torch.randn(3, 2, 2)
    t = torch.tensor([0.0, 0.5, 1.0])
    out = interpolate(z0, eps, t)
    for i in range(3):
        assert torch.allclose(out[i], (1 - t[i]) * z0[i] + t[i] * eps[i])


def test_interpolate_errors():
    with pytest.raises(ShapeError):
        interpolate(torch.zeros(2), torch.zeros(3), 0.5)
    with pytest.raises(RangeError):
        interpolate(torch.zeros(2), torch.zeros(2), 1.5)


def test_fm_loss_examples():
    z0, eps = torch.randn(2, 2), torch.randn(2, 2)
    assert fm_loss(eps - z0, z0, eps).item() == 0.0
    assert fm_loss(eps - z0 + 1, z0, eps).item() == pytest.approx(1.0)
    v = torch.randn(2, 2)
    brute = sum((v[i, j] - (eps[i, j] - z0[i, j])) ** 2 for i in range(2) for j in range(2)) / 4
    assert fm_loss(v, z0, eps).item() == pytest.approx(brute.item(), rel=1e-6)
    with pytest.raises(ShapeError):
        fm_loss(torch.zeros(2), torch.zeros(3), torch.zeros(3))


@given(st.lists(st.floats(-10, 10).filter(lambda x: x == 0 or abs(x) > 1e-100), min_size=4, max_size=4))
def test_fm_loss_nonnegative_zero_iff_exact(vals):
    v = torch.tensor(vals, dtype=torch.float64)
    z0, eps = torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
    loss = fm_loss(v, z0, eps).item()
    assert loss >= 0
    assert (loss == 0) == bool((v == 0).all())


def test_dropout_extremes(rng):
    for _ in range(50):
        c = dropout_conditions(rng, "cap", ["r"], 0.0, 0.0)
        assert c.caption_kept and c.refs_kept and c.c_text == "cap" and c.c_ids == ["r"]
        c = dropout_conditions(rng, "cap", ["r"], 1.0, 0.0)
        assert c.c_text is None and not c.caption_kept and c.c_ids == ["r"]


def test_dropout_null_iff_dropped(rng):
    for _ in range(200):
        c = dropout_conditions(rng, "cap", ["r"])
        assert (c.c_text is None) == (not c.caption_kept)
        assert (c.c_ids is None) == (not c.refs_kept)


def test_dropout_rejects_bad_probability(rng):
    with pytest.raises(ValidationError):
        dropout_conditions(rng, "c", [], 1.2, 0.0)


def test_mix_sampler_single_and_zero_weight(rng):
    s = mix_sampler(rng, {"a": 1.0, "b": 0.0}, {"a": [{"video": np.zeros((1, 2, 2, 3))}], "b": []})
    assert all(next(s)[0] == "a" for _ in range(100))


def test_mix_sampler_lifts_images(rng):
    s = mix_sampler(rng, {"img": 1.0}, {"img": [{"image": np.zeros((4, 4, 3))}]})
    name, sample = next(s)
    assert sample["video"].shape == (1, 4, 4, 3)


def test_mix_sampler_errors(rng):
    with pytest.raises(EmptyDatasetError):
        next(mix_sampler(rng, {"a": 1.0}, {"a": []}))
    with pytest.raises(ValidationError):
        next(mix_sampler(rng, {"a": 0.0}, {"a": [1]}))
    with pytest.raises(ValidationError):
        next(mix_sampler(rng, {"a": -1.0, "b": 2.0}, {"a": [1], "b": [1]}))


def test_mix_sampler_default_proportions():
    data = {k: [{"video": np.zeros((1, 1, 1, 3))}] for k in DEFAULT_MIX}
    s = mix_sampler(np.random.default_rng(0), DEFAULT_MIX, data)
    names = [next(s)[0] for _ in range(10_000)]
    for k, p in (("mcvc", 0.8), ("single_image", 0.1), ("single_video", 0.1)):
        assert abs(names.count(k) / 1e4 - p) <= 0.02


def test_cfg_velocity_examples():
    vc, vu = 2 * torch.ones(3), torch.zeros(3)
    assert torch.equal(cfg_velocity(vc, vu, 7.5), 15 * torch.ones(3))
    a, b = torch.randn(5), torch.randn(5)
    assert cfg_velocity(a, b, 1) is a
    assert torch.equal(cfg_velocity(a, b, 0), b)
    with pytest.raises(ShapeError):
        cfg_velocity(torch.zeros(2), torch.zeros(3), 2.0)


def test_euler_zero_velocity_returns_noise():
    eps = torch.randn(2, 3)
    out = euler_sample(lambda z, t: torch.zeros_like(z), eps, steps=17, cfg_scale=7.5)
    assert torch.equal(out, eps)


@pytest.mark.parametrize("steps", [1, 10, 100])
def test_euler_recovers_target_under_constant_velocity(steps):
    g = torch.Generator().manual_seed(steps)
    z0, eps = torch.randn(4, 6, generator=g, dtype=torch.float64), torch.randn(4, 6, generator=g, dtype=torch.float64)
    out = euler_sample(lambda z, t: eps - z0, eps, steps=steps, cfg_scale=1.0)
    assert torch.max(torch.abs(out - z0)).item() <= 1e-6


def test_euler_two_steps_manual():
    eps = torch.randn(3, dtype=torch.float64)

    def v(z, t, **kw):
        return z * t + (1.0 if kw.get("c") else 0.0)

    out = euler_sample(v, eps, steps=2, cfg_scale=3.0, cond={"c": True}, uncond={})
    z = eps.clone()
    for t in (1.0, 0.5):
        vel = v(z, t) + 3.0 * (v(z, t, c=True) - v(z, t))
        z = z - 0.5 * vel
    assert torch.allclose(out, z, rtol=0, atol=1e-15)


def test_euler_errors():
    with pytest.raises(RangeError):
        euler_sample(lambda z, t: z, torch.zeros(2), steps=0)
    with pytest.raises(NonFiniteStateError):
        euler_sample(lambda z, t: torch.full_like(z, math.inf), torch.zeros(2), steps=3, cfg_scale=1)


class _Quad(torch.nn.Module):
    def __init__(self, w0):
        super().__init__()
        self.w = torch.nn.Parameter(torch.tensor([w0], dtype=torch.float64))


def _adam_oracle(w, grads_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for k in range(1, steps + 1):
        g = grads_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat, vhat = m / (1 - b1**k), v / (1 - b2**k)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
    return w


def test_adam_step_matches_closed_form():
    mod = _Quad(1.7)
    tr = Trainer(mod, lr=0.05)
    for _ in range(5):
        tr.step(lambda: 3.0 * (mod.w - 0.3).pow(2).sum())
    expected = _adam_oracle(1.7, lambda w: 6.0 * (w - 0.3), 0.05, 5)
    assert abs(mod.w.item() - expected) <= 1e-10


def test_trainer_returns_pre_step_loss():
    mod = _Quad(2.0)
    tr = Trainer(mod, lr=0.1)
    assert tr.step(lambda: mod.w.pow(2).sum()) == pytest.approx(4.0)


def test_nonfinite_loss_leaves_params():
    mod = _Quad(2.0)
    tr = Trainer(mod, lr=0.1)
    with pytest.raises(NonFiniteLossError):
        tr.step(lambda: mod.w.sum() * math.nan)
    assert mod.w.item() == 2.0


def test_all_frozen_never_moves():
    mod = _Quad(2.0)
    tr = Trainer(mod, lr=0.1, freeze=FreezePolicy.all_frozen(["w"]), group_fn=lambda n: n)
    for _ in range(10):
        tr.step(lambda: mod.w.pow(2).sum())
    assert mod.w.item() == 2.0


def test_freeze_policy_default_freezes_temporal_only():
    fp = FreezePolicy()
    assert fp.is_frozen("temporal_attn")
    assert not fp.is_frozen("spatial_attn")


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(1, 20))
def test_interpolate_is_affine(t, seed):
    g = torch.Generator().manual_seed(seed)
    z0, eps = torch.randn(5, generator=g, dtype=torch.float64), torch.randn(5, generator=g, dtype=torch.float64)
    zt = interpolate(z0, eps, t)
    assert torch.allclose(zt, z0 + t * (eps - z0), atol=1e-12)
