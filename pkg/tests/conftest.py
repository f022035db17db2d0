import numpy as np
import pytest
import torch

from conceptmaster.backbone import ModelConfig
from conceptmaster.conditioning import ConditioningConfig
from conceptmaster.model import ConceptMaster


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(seed=0, depth=1, width=32, dtype=torch.float32, randomize=False):
    """Small model; ``randomize`` replaces the zero inits so every path is live."""
    torch.manual_seed(seed)
    mc = ModelConfig(depth=depth, width=width, heads=4, timestep_dim=16, caption_dim=16, concept_dim=16)
    cc = ConditioningConfig(grid=4, visual_dim=24, concept_dim=16, num_queries=4, qformer_layers=1,
                            qformer_heads=2, dam_heads=2, ffn_mult=2)
    m = ConceptMaster(mc, cc).to(dtype)
    if randomize:
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in m.parameters():
                p.add_(0.2 * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype))
    return m


@pytest.fixture
def model():
    return tiny_model()


TINY_CLI = [
    "model.depth=1", "model.width=32", "model.timestep_dim=16", "model.caption_dim=16", "model.concept_dim=16",
    "conditioning.grid=4", "conditioning.visual_dim=24", "conditioning.concept_dim=16",
    "conditioning.num_queries=4", "conditioning.qformer_layers=1", "conditioning.qformer_heads=2",
    "conditioning.dam_heads=2", "conditioning.ffn_mult=2",
]


def cli(*argv, sets=()):
    """Run the CLI in-process with ``--set`` overrides; returns the exit code."""
    from conceptmaster.cli import main

    args = list(argv)
    for s in sets:
        args += ["--set", s]
    return main(args)


def tree_digest(root, skip=("run_manifest.json",)):
    """relative path -> file bytes, for bit-identity comparisons between runs."""
    from pathlib import Path

    root = Path(root)
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }
