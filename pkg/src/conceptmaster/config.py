"""Run configuration: nested JSON defaults, file overlay, dotted overrides, schema check."""

import copy
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .backbone import ModelConfig
from .conditioning import ConditioningConfig
from .datapipe import CurateConfig
from .errors import ParseError, SchemaError
from .flowmatch import DEFAULT_MIX


def defaults():
    model = asdict(ModelConfig())
    cond = asdict(ConditioningConfig(concept_dim=model["concept_dim"]))
    return {
        "version": __version__,
        "seed": 0,
        "out": "run",
        "model": model,
        "conditioning": cond,
        "caption_seed": 3,
        "data": {"video_shape": [8, 32, 32, 3]},
        "train": {
            "steps": 100,
            "batch_size": 8,
            "lr": 1e-3,
            "p_caption": 0.5,
            "p_refs": 0.33,
            "mix": dict(DEFAULT_MIX),
            "datasets": {"mcvc": "", "single_image": "", "single_video": ""},
            "freeze": {"temporal_attn": True},
            "checkpoint_every": 50,
            "keep_last": 3,
        },
        "sample": {"checkpoint": "", "refs": [], "caption": "", "steps": 100, "cfg_scale": 7.5},
        "curate": {**asdict(CurateConfig()), "corpus": "", "workers": 1},
        "eval": {"manifest": "", "generated": "", "workers": 1},
        "gen_data": {
            "kind": "scenes",
            "n": 16,
            "concepts": 2,
            "n_frames": 8,
            "height": 32,
            "width": 32,
            "fixtures": "oracle",
        },
    }


# subtrees whose keys are free-form (names of groups or datasets)
OPEN_MAPS = {"train.mix", "train.freeze", "train.datasets"}


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(tree, key, value):
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def _merge(base, over, prefix=""):
    for k, v in over.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            if path in OPEN_MAPS:
                base[k].update(copy.deepcopy(v))
            else:
                _merge(base[k], v, path + ".")
        else:
            base[k] = copy.deepcopy(v)


def _leaves(v, path):
    if isinstance(v, dict) and v:
        return [p for k, sub in v.items() for p in _leaves(sub, f"{path}.{k}")]
    return [path]


def _unknown(tree, ref, prefix=""):
    bad = []
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if k not in ref:
            bad.extend(_leaves(v, path))
        elif isinstance(v, dict) and isinstance(ref[k], dict) and path not in OPEN_MAPS:
            bad.extend(_unknown(v, ref[k], path + "."))
    return bad


def _type_errors(tree, ref, prefix=""):
    bad = []
    for k, v in ref.items():
        path = f"{prefix}{k}"
        got = tree.get(k)
        if isinstance(v, dict):
            if not isinstance(got, dict):
                bad.append(path)
            elif path not in OPEN_MAPS:
                bad.extend(_type_errors(got, v, path + "."))
        elif isinstance(v, bool):
            if not isinstance(got, bool):
                bad.append(path)
        elif isinstance(v, (int, float)):
            if isinstance(got, bool) or not isinstance(got, (int, float)):
                bad.append(path)
            elif isinstance(v, int) and not isinstance(v, bool) and isinstance(got, float) and not got.is_integer():
                bad.append(path)
        elif isinstance(v, str) and not isinstance(got, str):
            bad.append(path)
        elif isinstance(v, list) and not isinstance(got, list):
            bad.append(path)
    return bad


def validate(tree):
    ref = defaults()
    bad = _unknown(tree, ref)
    if bad:
        raise SchemaError(bad, "unknown config keys")
    bad = _type_errors(tree, ref)
    if bad:
        raise SchemaError(bad, "config values of the wrong type")
    return tree


def load_config(path=None, overrides=()):
    """defaults <- JSON file <- ``key=value`` overrides (values parsed as JSON when possible)."""
    tree = defaults()
    if path:
        path = Path(path)
        if not path.exists():
            raise ParseError(f"config file {path} does not exist")
        text = path.read_text()
        try:
            user = json.loads(text) if text.strip() else {}
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: {e}") from e
        if not isinstance(user, dict):
            raise ParseError(f"{path}: top level must be an object")
        bad = _unknown(user, tree)
        if bad:
            raise SchemaError(bad, "unknown config keys")
        _merge(tree, user)
    over, bad = {}, []
    for item in overrides:
        if "=" not in item:
            raise ParseError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        _set_dotted(over, key.strip(), _parse_value(value))
    bad = _unknown(over, tree)
    if bad:
        raise SchemaError(bad, "unknown config keys")
    _merge(tree, over)
    return validate(tree)


def config_hash(tree):
    return hashlib.sha256(json.dumps(tree, sort_keys=True).encode()).hexdigest()
