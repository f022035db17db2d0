import json

import numpy as np
import pytest

from conftest import TINY_CLI, cli, tree_digest
from conceptmaster.config import config_hash, defaults, load_config
from conceptmaster.errors import ParseError, SchemaError
from conceptmaster.model import load_checkpoint
from conceptmaster.tensorio import read_tensor


def test_defaults_validate_and_hash_stable():
    a, b = load_config(), load_config()
    assert a == defaults() and config_hash(a) == config_hash(b)
    assert config_hash(load_config(overrides=["seed=1"])) != config_hash(a)


def test_file_then_overrides(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"seed": 5, "train": {"lr": 0.01, "mix": {"mcvc": 2}}}))
    cfg = load_config(f, ["train.lr=0.5", "train.freeze.ffn=true"])
    assert cfg["seed"] == 5 and cfg["train"]["lr"] == 0.5
    assert cfg["train"]["mix"] == {"mcvc": 2, "single_image": 1, "single_video": 1}
    assert cfg["train"]["freeze"] == {"temporal_attn": True, "ffn": True}


def test_unknown_keys_listed(tmp_path):
    with pytest.raises(SchemaError) as e:
        load_config(overrides=["train.bogus=1", "nope.deep.key=2"])
    assert e.value.keys == ["train.bogus", "nope.deep.key"]
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"model": {"widht": 3}}))
    with pytest.raises(SchemaError, match="model.widht"):
        load_config(f)


def test_bad_values_and_files(tmp_path):
    with pytest.raises(SchemaError):
        load_config(overrides=["train.steps=\"many\""])
    with pytest.raises(SchemaError):
        load_config(overrides=["train.steps=1.5"])
    with pytest.raises(ParseError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ParseError):
        load_config(tmp_path / "bad.json")
    with pytest.raises(ParseError):
        load_config(overrides=["no_equals"])


def test_exit_codes(tmp_path, capsys):
    assert cli("gen-data", "--out", str(tmp_path / "a"), "--set", "bogus=1") == 1
    assert "bogus" in capsys.readouterr().err
    assert cli("eval", "--out", str(tmp_path / "b"), "--manifest", str(tmp_path / "none.json")) == 1
    assert cli("gen-data", "--kind", "bench", "-n", "2", "--out", str(tmp_path / "c"), sets=["gen_data.fixtures=none"]) == 0
    # MissingArtifactError is a runtime failure, not a validation one
    assert cli("eval", "--out", str(tmp_path / "d"), "--manifest", str(tmp_path / "c" / "bench.json")) == 2
    assert "MissingArtifactError" in capsys.readouterr().err


def test_gen_data_and_manifest(tmp_path):
    out = tmp_path / "s"
    assert cli("gen-data", "-n", "3", "--out", str(out), "--seed", "4") == 0
    man = json.loads((out / "run_manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seeds"] == {"seed": 4}
    paths = {a["path"] for a in man["artifacts"]}
    assert "scenes.json" in paths and any(p.startswith("scenes/scene_00002/") for p in paths)


def test_corpus_curate_pipeline(tmp_path):
    assert cli("gen-data", "--kind", "corpus", "--out", str(tmp_path / "corpus")) == 0
    assert cli("curate", "--corpus", str(tmp_path / "corpus" / "corpus.json"), "--out", str(tmp_path / "cur")) == 0
    summary = json.loads((tmp_path / "cur" / "summary.json").read_text())
    assert summary["accepted"] == 14 and summary["total"] == 20
    assert summary["success_rate"] == 13 / 14
    lines = (tmp_path / "cur" / "records.jsonl").read_text().splitlines()
    assert len(lines) == 20
    ids = [json.loads(l)["video_id"] for l in lines]
    assert ids == sorted(ids)


@pytest.mark.parametrize("fixtures,mixing", [("oracle", 0.0), ("swapped", 1.0)])
def test_bench_eval(tmp_path, fixtures, mixing):
    assert cli("gen-data", "--kind", "bench", "-n", "6", "--out", str(tmp_path / "b"),
               sets=[f"gen_data.fixtures={fixtures}"]) == 0
    assert cli("eval", "--manifest", str(tmp_path / "b" / "bench.json"), "--out", str(tmp_path / "e")) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert rep["summary"]["overall"]["decoupling"]["mixing_rate"] == mixing
    assert (tmp_path / "e" / "table.txt").read_text().strip()


def _train(tmp_path, name, steps, extra=()):
    data = tmp_path / "data"
    if not data.exists():
        assert cli("gen-data", "-n", "4", "--out", str(data)) == 0
    out = tmp_path / name
    sets = TINY_CLI + [f"train.steps={steps}", "train.batch_size=2", "train.checkpoint_every=2", "train.keep_last=1",
                       f"train.datasets.mcvc={json.dumps(str(data / 'scenes'))}", *extra]
    assert cli("train", "--out", str(out), sets=sets) == 0
    return out


def test_train_zero_steps_is_init(tmp_path):
    import torch

    from conceptmaster.cli import build_model

    out = _train(tmp_path, "t0", 0)
    model, _ = load_checkpoint(out / "checkpoint")
    ref = build_model(load_config(overrides=TINY_CLI))
    for (k, a), (_, b) in zip(model.state_dict().items(), ref.state_dict().items()):
        assert torch.equal(a, b), k
    assert (out / "loss.jsonl").read_bytes() == b""


def test_train_checkpoints_and_sample(tmp_path):
    out = _train(tmp_path, "t", 5)
    losses = [json.loads(l)["loss"] for l in (out / "loss.jsonl").read_text().splitlines()]
    assert len(losses) == 5 and all(np.isfinite(losses))
    kept = sorted(p.name for p in (out / "checkpoints").iterdir() if p.is_dir())
    best = json.loads((out / "checkpoints" / "best.json").read_text())["path"]
    assert "step_0000004" in kept and best in kept and len(kept) <= 2

    ref = tmp_path / "data" / "scenes" / "scene_00000" / "ref_0.f32"
    s = tmp_path / "s"
    assert cli("sample", "--checkpoint", str(out / "checkpoint"), "--ref", str(ref), "--caption", "a thing",
               "--out", str(s), sets=["sample.steps=3"]) == 0
    video, _ = read_tensor(s / "video.f32")
    assert video.shape == (8, 32, 32, 3) and np.isfinite(video).all()
    side = json.loads((s / "video.json").read_text())
    assert side["steps"] == 3 and side["refs"][0]["label"]


def test_sample_too_many_refs(tmp_path):
    out = _train(tmp_path, "t", 0)
    ref = str(tmp_path / "data" / "scenes" / "scene_00000" / "ref_0.f32")
    assert cli("sample", "--checkpoint", str(out / "checkpoint"), *sum([["--ref", ref]] * 5, []),
               "--out", str(tmp_path / "s")) == 1


def test_train_requires_dataset(tmp_path):
    assert cli("train", "--out", str(tmp_path / "x"), sets=TINY_CLI) == 1


def test_gen_data_deterministic(tmp_path):
    for name in ("a", "b"):
        assert cli("gen-data", "--kind", "bench", "-n", "4", "--seed", "9", "--out", str(tmp_path / name)) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
