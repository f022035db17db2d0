import json

import numpy as np
import pytest
import torch

from conceptmaster import toydata as td
from conceptmaster.backbone import VideoLatent, param_group, unpatchify
from conceptmaster.errors import CheckpointError, ShapeError
from conceptmaster.flowmatch import FreezePolicy, Trainer
from conceptmaster.model import load_checkpoint, save_checkpoint

from conftest import tiny_model

SHAPE = (4, 16, 16, 3)


def _samples(n=3, seed=0):
    out = []
    for i in range(n):
        spec = td.gen_scene(seed + i, 2, n_frames=4, height=16, width=16, size_range=(4, 5))
        out.append(td.scene_sample(spec))
    return out


def test_make_batch_shapes(rng):
    m = tiny_model()
    b = m.make_batch(_samples(), rng, video_shape=SHAPE)
    assert b.z0.shape == (3, 2, 16, m.model_cfg.patch_dim)
    assert b.eps.shape == b.z0.shape and b.t.shape == (3,)
    assert torch.isfinite(m.loss(b))


def test_make_batch_tiles_single_images(rng):
    m = tiny_model()
    s = _samples(1)[0]
    img = {"video": s["video"][:1], "refs": s["refs"], "caption": s["caption"]}
    b = m.make_batch([img], rng, video_shape=SHAPE)
    video = unpatchify(VideoLatent(b.z0.numpy()[0], b.grid), m.model_cfg)
    assert np.allclose(video, np.repeat(s["video"][:1], 4, axis=0), atol=1e-6)
    with pytest.raises(ShapeError):
        m.make_batch([{"video": np.zeros((3, 16, 16, 3))}], rng, video_shape=SHAPE)


def test_full_dropout_batch_has_no_conditions(rng):
    m = tiny_model()
    b = m.make_batch(_samples(), rng, p_caption=1.0, p_refs=1.0, video_shape=SHAPE)
    assert b.ref_dense is None and not b.text_mask.any()
    assert torch.isfinite(m.loss(b))


def test_every_parameter_has_a_group():
    m = tiny_model()
    groups = m.param_groups()
    assert set(groups) >= {"qformer", "dam", "mc_injector", "temporal_attn"}
    assert sum(len(v) for v in groups.values()) == len(list(m.parameters()))


def test_zero_init_sample_is_noise_through_unpatchify():
    m = tiny_model()
    s = _samples(1)[0]
    video = m.sample(s["refs"], s["caption"], SHAPE, steps=3, seed=11)
    gen = torch.Generator().manual_seed(11)
    eps = torch.randn((2, 16, m.model_cfg.patch_dim), generator=gen, dtype=torch.float64).float()
    assert np.array_equal(video, unpatchify(VideoLatent(eps.numpy(), (2, 4, 4)), m.model_cfg))


def test_sample_deterministic():
    m = tiny_model(randomize=True)
    s = _samples(1)[0]
    a = m.sample(s["refs"], s["caption"], SHAPE, steps=2, seed=3)
    b = m.sample(s["refs"], s["caption"], SHAPE, steps=2, seed=3)
    assert np.array_equal(a, b)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = tiny_model(randomize=True)
    man = save_checkpoint(m, tmp_path / "ck", FreezePolicy())
    m2, man2 = load_checkpoint(tmp_path / "ck")
    for (n1, p1), (n2, p2) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    assert man["content_hash"] == man2["content_hash"]
    frozen = {e["group"] for e in man["parameters"] if e["frozen"]}
    assert "temporal_attn" in frozen and "fixed" in frozen


def test_checkpoint_tamper_detected(tmp_path):
    m = tiny_model()
    save_checkpoint(m, tmp_path / "ck")
    blob = tmp_path / "ck" / "params" / "dit.final_gain.f32"
    data = bytearray(blob.read_bytes())
    data[0] ^= 1
    blob.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_training_reduces_loss_on_fixed_batch():
    m = tiny_model()
    rng = np.random.default_rng(0)
    b = m.make_batch(_samples(4), rng, video_shape=SHAPE)
    tr = Trainer(m, 3e-3, FreezePolicy(), param_group)
    first = tr.step(lambda: m.loss(b))
    for _ in range(30):
        last = tr.step(lambda: m.loss(b))
    assert last < first
