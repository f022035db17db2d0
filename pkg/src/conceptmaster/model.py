"""ConceptMaster = video DiT + concept conditioner + caption encoder, with checkpoints."""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import ModelConfig, VideoDiT, VideoLatent, grid_for, param_group, patchify, unpatchify
from .conditioning import ConceptConditioner, ConditioningConfig, ConceptRef, ToyTextEncoder, pad_tokens
from .errors import CheckpointError, ShapeError
from .flowmatch import dropout_conditions, euler_sample, fm_loss, interpolate
from .tensorio import atomic_write_bytes, atomic_write_json
from .validation import check_random_state


@dataclass
class Batch:
    z0: torch.Tensor  # (B, F', S, P)
    eps: torch.Tensor
    t: torch.Tensor  # (B,)
    c_text: torch.Tensor  # (B, Lt, Ct)
    text_mask: torch.Tensor  # (B, Lt); all-False rows are dropped captions
    ref_dense: torch.Tensor  # (R, G*G, D_v), kept refs only
    ref_labels: torch.Tensor  # (R, L, D)
    ref_label_mask: torch.Tensor
    ref_owner: list  # sample index of each ref row
    grid: tuple


class ConceptMaster(nn.Module):
    def __init__(self, model_cfg=None, cond_cfg=None, caption_seed=3, image_encoder=None, label_encoder=None):
        super().__init__()
        self.model_cfg = model_cfg or ModelConfig()
        self.cond_cfg = cond_cfg or ConditioningConfig(concept_dim=self.model_cfg.concept_dim)
        if self.cond_cfg.concept_dim != self.model_cfg.concept_dim:
            raise ShapeError("conditioning and model concept_dim differ")
        self.caption_seed = caption_seed
        self.dit = VideoDiT(self.model_cfg)
        self.conditioner = ConceptConditioner(self.cond_cfg, image_encoder, label_encoder)
        self.caption_encoder = ToyTextEncoder(self.model_cfg.caption_dim, seed=caption_seed)

    @property
    def dtype(self):
        return self.dit.final_gain.dtype

    def param_groups(self):
        groups = {}
        for name, _ in self.named_parameters():
            groups.setdefault(param_group(name), []).append(name)
        return groups

    def encode_caption(self, caption):
        return torch.as_tensor(self.caption_encoder.encode(caption), dtype=self.dtype)

    def conditions(self, refs=None, caption=None):
        """Keyword conditions for a single (unbatched) sample; ``None`` drops one."""
        c_text = None if caption is None else self.encode_caption(caption)[None]
        c_ids = None if not refs else self.conditioner(refs).tokens[None]
        return {"c_text": c_text, "c_ids": c_ids}

    def velocity(self, z, t, **cond):
        return self.dit(z, t, **cond)

    # -- training ----------------------------------------------------------------

    def make_batch(self, samples, rng, p_caption=0.5, p_refs=0.33, video_shape=None):
        """Collate samples (dicts with video, refs, caption) into a training batch.

        One-frame videos are tiled in time to ``video_shape``; drawn noise,
        timesteps, and condition dropout all come from ``rng``.
        """
        rng = check_random_state(rng)
        videos = []
        for s in samples:
            v = np.asarray(s["video"], dtype=np.float64)
            if video_shape is not None and v.shape[0] == 1 and video_shape[0] > 1:
                v = np.repeat(v, video_shape[0], axis=0)
            if video_shape is not None and v.shape != tuple(video_shape):
                raise ShapeError(f"sample video {v.shape} does not match {tuple(video_shape)}")
            videos.append(v)
        lat = patchify(np.stack(videos), self.model_cfg)
        dt = self.dtype
        z0 = torch.as_tensor(np.ascontiguousarray(lat.tokens), dtype=dt)
        eps = torch.as_tensor(rng.standard_normal(z0.shape), dtype=dt)
        t = torch.as_tensor(rng.random(len(samples)), dtype=dt)

        caps, dense, labels, owner = [], [], [], []
        for i, s in enumerate(samples):
            cond = dropout_conditions(rng, s.get("caption"), s.get("refs"), p_caption, p_refs)
            if cond.c_text:
                caps.append(self.caption_encoder.encode(cond.c_text))
            else:
                caps.append(np.zeros((0, self.model_cfg.caption_dim)))
            for j, ref in enumerate(cond.c_ids or []):
                d, lab = self.conditioner.encode_ref(ref, j)
                dense.append(d)
                labels.append(lab)
                owner.append(i)
        lt = max(1, max(len(c) for c in caps))
        c_text = torch.zeros(len(samples), lt, self.model_cfg.caption_dim, dtype=dt)
        text_mask = torch.zeros(len(samples), lt, dtype=torch.bool)
        for i, c in enumerate(caps):
            c_text[i, : len(c)] = torch.as_tensor(c, dtype=dt)
            text_mask[i, : len(c)] = True
        if dense:
            ref_dense = torch.as_tensor(np.stack(dense), dtype=dt)
            ref_labels, ref_label_mask = pad_tokens(labels, dt)
        else:
            ref_dense = ref_labels = ref_label_mask = None
        return Batch(z0, eps, t, c_text, text_mask, ref_dense, ref_labels, ref_label_mask, owner, lat.grid)

    def batch_conditions(self, batch):
        """Run the conditioner on the batch refs and pad into per-sample c_ids."""
        b = batch.z0.shape[0]
        if batch.ref_dense is None:
            return None, None
        emb = self.conditioner.embed_pairs(batch.ref_dense, batch.ref_labels, batch.ref_label_mask)
        m = emb.shape[1]
        counts = np.bincount(batch.ref_owner, minlength=b)
        rows = int(counts.max()) * m
        c_ids = emb.new_zeros(b, rows, emb.shape[-1])
        mask = torch.zeros(b, rows, dtype=torch.bool)
        cursor = [0] * b
        placed = []
        for r, i in enumerate(batch.ref_owner):
            placed.append((i, cursor[i], r))
            cursor[i] += m
        # functional scatter keeps autograd simple
        index_rows = torch.zeros(b, rows, dtype=torch.long)
        for i, start, r in placed:
            index_rows[i, start : start + m] = torch.arange(r * m, (r + 1) * m)
            mask[i, start : start + m] = True
        flat = emb.reshape(-1, emb.shape[-1])
        c_ids = torch.where(mask[..., None], flat[index_rows], c_ids)
        return c_ids, mask

    def loss(self, batch):
        z_t = interpolate(batch.z0, batch.eps, batch.t)
        c_ids, ids_mask = self.batch_conditions(batch)
        v = self.dit(z_t, batch.t, batch.c_text, c_ids, batch.text_mask, ids_mask, grid=batch.grid)
        return fm_loss(v, batch.z0, batch.eps)

    # -- inference ---------------------------------------------------------------

    def sample(self, refs, caption, video_shape, steps=100, cfg_scale=7.5, seed=0):
        """Generate a (F, H, W, C) video from references and a caption."""
        f, h, w, c = video_shape
        grid = grid_for(self.model_cfg, f, h, w)
        shape = (grid[0], grid[1] * grid[2], self.model_cfg.patch_dim)
        gen = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(shape, generator=gen, dtype=torch.float64).to(self.dtype)
        refs = [r if isinstance(r, ConceptRef) else ConceptRef(*r) for r in (refs or [])]
        with torch.no_grad():
            cond = self.conditions(refs, caption)

            def fn(z, t, **kw):
                return self.dit(z, t, grid=grid, **kw)

            z = euler_sample(fn, eps, steps, cfg_scale, cond, {})
        return unpatchify(VideoLatent(z.numpy(), grid), self.model_cfg)

    def config_dict(self):
        return {"model": asdict(self.model_cfg), "conditioning": asdict(self.cond_cfg), "caption_seed": self.caption_seed}


# -- checkpoints -------------------------------------------------------------------


def _tensor_bytes(t):
    return np.ascontiguousarray(t.detach().cpu().numpy().astype("<f4")).tobytes()


def save_checkpoint(model, directory, freeze=None, extra=None):
    """Write ``manifest.json`` plus one raw f32le blob per tensor under ``params/``."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries, h = [], hashlib.sha256()
    tensors = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name in sorted({**tensors, **buffers}):
        t = tensors.get(name, buffers.get(name))
        data = _tensor_bytes(t)
        fname = f"params/{name}.f32"
        atomic_write_bytes(directory / fname, data)
        h.update(name.encode() + b"\0" + data)
        if name in tensors:
            group = param_group(name)
            frozen = bool(freeze.is_frozen(group)) if freeze is not None else not t.requires_grad
        else:
            group, frozen = "fixed", True
        entries.append({"name": name, "shape": list(t.shape), "dtype": "f32le", "group": group,
                        "frozen": frozen, "file": fname})
    manifest = {"config": model.config_dict(), "parameters": entries, "content_hash": h.hexdigest()}
    if extra:
        manifest["extra"] = extra
    atomic_write_json(directory / "manifest.json", manifest)
    return manifest


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {directory}: {exc}") from exc
    cfg = manifest["config"]
    model = ConceptMaster(ModelConfig(**cfg["model"]), ConditioningConfig(**cfg["conditioning"]), cfg["caption_seed"])
    state = model.state_dict()
    h = hashlib.sha256()
    loaded = {}
    for e in manifest["parameters"]:
        try:
            data = (directory / e["file"]).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"missing blob for {e['name']}") from exc
        h.update(e["name"].encode() + b"\0" + data)
        arr = np.frombuffer(data, dtype="<f4")
        if e["name"] not in state or arr.size != int(np.prod(e["shape"])):
            raise CheckpointError(f"parameter {e['name']} does not fit the model")
        loaded[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    if h.hexdigest() != manifest["content_hash"]:
        raise CheckpointError("checkpoint content hash mismatch")
    missing = set(state) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
    model.load_state_dict(loaded)
    return model, manifest
