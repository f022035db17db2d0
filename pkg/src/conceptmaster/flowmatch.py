"""Rectified-flow objective, condition dropout, dataset mixing, freezing, and sampling."""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import EmptyDatasetError, NonFiniteLossError, NonFiniteStateError, RangeError, ShapeError, ValidationError
from .validation import check_probability, check_random_state

FULL_SCALE_LR = 5e-6  # optimizer setting for full-size training (global batch 256)
FULL_SCALE_BATCH = 256


def _check_t(t):
    tt = torch.as_tensor(t, dtype=torch.float64)
    if bool(((tt < 0) | (tt > 1)).any()):
        raise RangeError(f"t must lie in [0, 1], got {t}")


def interpolate(z0, eps, t):
    """Straight path ``(1 - t) z0 + t eps``; ``t`` is a scalar or per-batch vector."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    _check_t(t)
    if isinstance(t, torch.Tensor) and t.dim() == 1:
        t = t.reshape(-1, *([1] * (z0.dim() - 1))).to(z0.dtype)
    elif isinstance(t, np.ndarray) and t.ndim == 1:
        t = t.reshape(-1, *([1] * (z0.ndim - 1)))
    return (1 - t) * z0 + t * eps


def fm_loss(v_pred, z0, eps):
    """Mean squared error between the predicted and straight-path velocity ``eps - z0``."""
    if not (v_pred.shape == z0.shape == eps.shape):
        raise ShapeError(f"shape mismatch: {tuple(v_pred.shape)}, {tuple(z0.shape)}, {tuple(eps.shape)}")
    return ((v_pred - (eps - z0)) ** 2).mean()


@dataclass
class TrainBatchCondition:
    caption_kept: bool
    refs_kept: bool
    c_text: object = None
    c_ids: object = None


def dropout_conditions(rng, caption, refs, p_caption=0.5, p_refs=0.33):
    """Independently drop the caption and the (images + labels) reference set."""
    p_caption = check_probability(p_caption, "p_caption")
    p_refs = check_probability(p_refs, "p_refs")
    rng = check_random_state(rng)
    caption_kept = not rng.random() < p_caption
    refs_kept = not rng.random() < p_refs
    return TrainBatchCondition(
        caption_kept, refs_kept, caption if caption_kept else None, refs if refs_kept else None
    )


DEFAULT_MIX = {"mcvc": 8.0, "single_image": 1.0, "single_video": 1.0}


def check_mix_weights(weights):
    weights = {k: float(v) for k, v in dict(weights).items()}
    if any(v < 0 or not math.isfinite(v) for v in weights.values()):
        raise ValidationError(f"mix weights must be finite and nonnegative: {weights}")
    if not any(v > 0 for v in weights.values()):
        raise ValidationError("at least one mix weight must be positive")
    return weights


def lift_sample(sample):
    """Single-image samples become one-frame videos; videos pass through."""
    if "video" in sample:
        return sample
    out = dict(sample)
    out["video"] = np.asarray(sample["image"])[None]
    return out


def mix_sampler(rng, weights, datasets):
    """Infinite stream of ``(dataset name, sample)`` drawn with probability w_d / sum(w)."""
    weights = check_mix_weights(weights)
    names = sorted(n for n, w in weights.items() if w > 0)
    for n in names:
        if n not in datasets or len(datasets[n]) == 0:
            raise EmptyDatasetError(f"dataset {n!r} has positive weight but no samples")
    rng = check_random_state(rng)
    p = np.array([weights[n] for n in names])
    p = p / p.sum()
    while True:
        name = names[int(rng.choice(len(names), p=p))]
        data = datasets[name]
        yield name, lift_sample(data[int(rng.integers(len(data)))])


@dataclass
class FreezePolicy:
    """Parameter-group name -> frozen flag; unlisted groups are trainable."""

    frozen: dict = field(default_factory=lambda: {"temporal_attn": True})

    def is_frozen(self, group):
        return bool(self.frozen.get(group, False))

    def apply(self, module, group_fn):
        """Set ``requires_grad`` per group; returns {group: [param names]}."""
        groups = {}
        for name, p in module.named_parameters():
            g = group_fn(name)
            groups.setdefault(g, []).append(name)
            p.requires_grad_(not self.is_frozen(g))
        return groups

    @classmethod
    def all_frozen(cls, groups):
        return cls({g: True for g in groups})


class Trainer:
    """Adam on the unfrozen parameter groups of ``module``.

    ``step(loss_fn)`` evaluates the loss, aborts on non-finite values without
    touching parameters, and otherwise applies one update. The returned loss
    is the pre-update value.
    """

    def __init__(self, module, lr=1e-3, freeze=None, group_fn=None, betas=(0.9, 0.999), eps=1e-8):
        self.module = module
        self.freeze = freeze or FreezePolicy()
        self.groups = self.freeze.apply(module, group_fn or (lambda name: name))
        params = [p for p in module.parameters() if p.requires_grad]
        self.optimizer = torch.optim.Adam(params, lr=lr, betas=betas, eps=eps) if params else None

    def step(self, loss_fn):
        loss = loss_fn()
        if not bool(torch.isfinite(loss)):
            raise NonFiniteLossError(f"loss is {loss.item()}")
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
        return float(loss.detach())


def cfg_velocity(v_cond, v_uncond, scale):
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"{tuple(v_cond.shape)} vs {tuple(v_uncond.shape)}")
    if scale == 1:
        return v_cond
    return v_uncond + scale * (v_cond - v_uncond)


def euler_sample(velocity_fn, eps, steps=100, cfg_scale=7.5, cond=None, uncond=None):
    """Integrate dz/dt = v from t = 1 (noise ``eps``) down to t = 0 with explicit Euler.

    ``velocity_fn(z, t, **cond)`` is called with ``cond`` and, for guidance,
    with ``uncond`` (default: no conditions at all).
    """
    if steps < 1:
        raise RangeError("steps must be >= 1")
    cond = cond or {}
    uncond = uncond or {}
    dt = 1.0 / steps
    z = eps
    with torch.no_grad():
        for k in range(steps, 0, -1):
            t = k / steps
            v = velocity_fn(z, t, **cond)
            if cfg_scale != 1:
                v = cfg_velocity(v, velocity_fn(z, t, **uncond), cfg_scale)
            z = z - dt * v
            if not bool(torch.isfinite(z).all()):
                raise NonFiniteStateError(f"non-finite latent at t={t}")
    return z
