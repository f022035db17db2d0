"""Toy video diffusion transformer predicting rectified-flow velocities.

Each block runs five timestep-modulated, pre-RMSNorm residual sublayers:
per-frame spatial self-attention, full spatiotemporal self-attention, text
cross-attention, the MC-Injector cross-attention over the composite concept
embedding, and an FFN.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from .errors import DimensionError, MaskError, RangeError, ShapeError

SUBLAYERS = ("spatial", "temporal", "text_cross", "mc_injector", "ffn")


@dataclass
class ModelConfig:
    depth: int = 2
    width: int = 96
    heads: int = 4
    patch_t: int = 2
    patch_h: int = 4
    patch_w: int = 4
    channels: int = 3
    timestep_dim: int = 32
    caption_dim: int = 32
    concept_dim: int = 64
    rmsnorm_eps: float = 1e-6
    ffn_mult: int = 4
    embed_seed: int = 0

    def __post_init__(self):
        dims = ("depth", "width", "heads", "patch_t", "patch_h", "patch_w", "channels",
                "timestep_dim", "caption_dim", "concept_dim", "ffn_mult")
        bad = [d for d in dims if getattr(self, d) <= 0]
        if bad:
            raise DimensionError(f"dimensions must be positive: {bad}")
        if self.width % self.heads:
            raise DimensionError(f"width {self.width} not divisible by heads {self.heads}")
        if self.rmsnorm_eps <= 0:
            raise DimensionError("rmsnorm_eps must be > 0")

    @property
    def patch_dim(self):
        return self.patch_t * self.patch_h * self.patch_w * self.channels

    def to_dict(self):
        return asdict(self)


@dataclass
class VideoLatent:
    """Patch tokens of shape (..., F', S, patch_dim) plus the (F', H', W') grid."""

    tokens: object
    grid: tuple

    def __post_init__(self):
        f, h, w = self.grid
        if min(f, h, w) < 1:
            raise ShapeError(f"grid dimensions must be >= 1, got {self.grid}")
        if tuple(self.tokens.shape[-3:-1]) != (f, h * w):
            raise ShapeError(f"tokens {tuple(self.tokens.shape)} do not match grid {self.grid}")


def patchify(video, cfg):
    """Lossless space-to-depth rearrangement of (..., F, H, W, C) into patch tokens.

    Works on numpy arrays and torch tensors alike.
    """
    *_, f, h, w, c = video.shape
    pt, ph, pw = cfg.patch_t, cfg.patch_h, cfg.patch_w
    if f % pt or h % ph or w % pw:
        raise DimensionError(f"video {(f, h, w)} not divisible by patch {(pt, ph, pw)}")
    if c != cfg.channels:
        raise DimensionError(f"expected {cfg.channels} channels, got {c}")
    tokens = rearrange(
        video, "... (f pt) (h ph) (w pw) c -> ... f (h w) (pt ph pw c)", pt=pt, ph=ph, pw=pw
    )
    return VideoLatent(tokens, (f // pt, h // ph, w // pw))


def unpatchify(latent, cfg):
    f, h, w = latent.grid
    return rearrange(
        latent.tokens,
        "... f (h w) (pt ph pw c) -> ... (f pt) (h ph) (w pw) c",
        h=h, w=w, pt=cfg.patch_t, ph=cfg.patch_h, pw=cfg.patch_w, c=cfg.channels,
    )


def rmsnorm(x, gain, eps):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + eps) * gain


def modulated_sublayer(x, scale, sublayer, gain, eps):
    """``x + sublayer(rmsnorm(x) * (1 + scale))``."""
    if scale.shape[-1] != x.shape[-1] or gain.shape[-1] != x.shape[-1]:
        raise ShapeError(f"scale/gain width {scale.shape[-1]} != token width {x.shape[-1]}")
    return x + sublayer(rmsnorm(x, gain, eps) * (1 + scale))


def attention(q, k, v, heads, mask=None, strict=False):
    """Multi-head scaled dot-product attention over already-projected tokens.

    ``mask`` is boolean, True = attend, broadcastable to (..., Lq, Lk).
    Query rows with no visible key produce zeros (or raise when ``strict``).
    """
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]) or q.shape[-1] % heads:
        raise ShapeError(f"widths {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]} incompatible with {heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("keys and values must have the same length")
    q, k, v = (rearrange(x, "... l (h d) -> ... h l d", h=heads) for x in (q, k, v))
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is None:
        weights = scores.softmax(-1)
    else:
        mask = mask.unsqueeze(-3)  # broadcast over heads
        try:
            mask = mask.expand(scores.shape)
        except RuntimeError as exc:
            raise ShapeError(f"mask {tuple(mask.shape)} incompatible with scores {tuple(scores.shape)}") from exc
        visible = mask.any(-1, keepdim=True)
        if strict and not bool(visible.all()):
            raise MaskError("attention mask has a row with no visible key")
        scores = scores.masked_fill(~mask, float("-inf")).masked_fill(~visible, 0.0)
        weights = scores.softmax(-1) * mask
    return rearrange(weights @ v, "... h l d -> ... l (h d)")


class Attention(nn.Module):
    """Bias-free projections so that an all-masked row maps to exactly zero."""

    def __init__(self, width, heads, context_dim=None, zero_out=False):
        super().__init__()
        context_dim = context_dim or width
        self.heads = heads
        self.to_q = nn.Linear(width, width, bias=False)
        self.to_k = nn.Linear(context_dim, width, bias=False)
        self.to_v = nn.Linear(context_dim, width, bias=False)
        self.to_out = nn.Linear(width, width, bias=False)
        if zero_out:
            nn.init.zeros_(self.to_out.weight)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        out = attention(self.to_q(x), self.to_k(context), self.to_v(context), self.heads, mask)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, width, mult=4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(width, width * mult), nn.GELU(), nn.Linear(width * mult, width))

    def forward(self, x):
        return self.net(x)


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal features of ``t`` in [0, 1] (scaled by 1000)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = 1000.0 * t[..., None] * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def sincos_positions(grid, width, dtype=torch.float32):
    """Fixed 3-axis sinusoidal position table of shape (F', H'*W', width)."""
    f, h, w = grid
    per_axis = 2 * ((width // 3) // 2)
    axes = []
    for n in (f, h, w):
        pos = torch.arange(n, dtype=torch.float64)
        freqs = torch.exp(-math.log(100.0) * torch.arange(per_axis // 2, dtype=torch.float64) / max(per_axis // 2, 1))
        args = pos[:, None] * freqs
        axes.append(torch.cat([torch.sin(args), torch.cos(args)], dim=-1))
    pf, ph, pw = axes
    table = torch.cat(
        [
            pf[:, None, None].expand(f, h, w, per_axis),
            ph[None, :, None].expand(f, h, w, per_axis),
            pw[None, None, :].expand(f, h, w, per_axis),
        ],
        dim=-1,
    )
    table = F.pad(table, (0, width - table.shape[-1]))
    return table.reshape(f, h * w, width).to(dtype)


class Block(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c = cfg.width
        self.eps = cfg.rmsnorm_eps
        self.spatial = Attention(c, cfg.heads)
        self.temporal = Attention(c, cfg.heads)
        self.text_cross = Attention(c, cfg.heads, context_dim=cfg.caption_dim)
        self.mc_injector = Attention(c, cfg.heads, context_dim=cfg.concept_dim, zero_out=True)
        self.ffn = FeedForward(c, cfg.ffn_mult)
        self.norm_gains = nn.ParameterDict({name: nn.Parameter(torch.ones(c)) for name in SUBLAYERS})
        # one scale vector per sublayer; zero init keeps (1 + scale) neutral
        self.scale_proj = nn.Linear(c, len(SUBLAYERS) * c)
        nn.init.zeros_(self.scale_proj.weight)
        nn.init.zeros_(self.scale_proj.bias)

    def scales(self, t_emb):
        return self.scale_proj(t_emb).unflatten(-1, (len(SUBLAYERS), -1))

    def forward(self, x, t_emb, c_text=None, text_mask=None, c_ids=None, ids_mask=None, token_mask=None):
        """``x``: (B, F', S, C); masks are boolean key masks (True = valid)."""
        b, f, s, c = x.shape
        scales = self.scales(t_emb)[:, :, None, None, :]  # (B, 5, 1, 1, C)

        def mod(x, k, fn):
            return modulated_sublayer(x, scales[:, k], fn, self.norm_gains[SUBLAYERS[k]], self.eps)

        def spatial(h):
            m = None if token_mask is None else token_mask.reshape(b * f, 1, s)
            return self.spatial(h.reshape(b * f, s, c), mask=m).reshape(b, f, s, c)

        def temporal(h):
            m = None if token_mask is None else token_mask.reshape(b, 1, f * s)
            return self.temporal(h.reshape(b, f * s, c), mask=m).reshape(b, f, s, c)

        def cross(module, context, key_mask):
            def fn(h):
                m = None if key_mask is None else key_mask[:, None, :]
                return module(h.reshape(b, f * s, c), context, mask=m).reshape(b, f, s, c)

            return fn

        x = mod(x, 0, spatial)
        x = mod(x, 1, temporal)
        if c_text is not None:
            x = mod(x, 2, cross(self.text_cross, c_text, text_mask))
        if c_ids is not None:
            x = mod(x, 3, cross(self.mc_injector, c_ids, ids_mask))
        x = mod(x, 4, self.ffn)
        return x


class VideoDiT(nn.Module):
    """Velocity model v(z_t, t, c_text, c_ids) over patch-token latents."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        c = cfg.width
        gen = torch.Generator().manual_seed(cfg.embed_seed)
        embed = torch.randn(max(c, cfg.patch_dim), min(c, cfg.patch_dim), generator=gen)
        q, _ = torch.linalg.qr(embed)
        embed = q if c >= cfg.patch_dim else q.T
        # fixed, parameter-free input embedding (bias is identically zero)
        self.register_buffer("patch_embed", embed.reshape(c, cfg.patch_dim).contiguous())
        self.time_embed = nn.Sequential(nn.Linear(cfg.timestep_dim, c), nn.SiLU(), nn.Linear(c, c))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.depth))
        self.final_gain = nn.Parameter(torch.ones(c))
        self.final_scale = nn.Linear(c, c)
        self.final_out = nn.Linear(c, cfg.patch_dim)
        for lin in (self.final_scale, self.final_out):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def embed_tokens(self, z):
        return z @ self.patch_embed.T

    def forward(self, z, t, c_text=None, c_ids=None, text_mask=None, ids_mask=None, token_mask=None, grid=None):
        """Predict the velocity for latent tokens ``z`` of shape ([B,] F', S, patch_dim).

        ``None`` conditions skip their cross-attention sublayer entirely.
        ``grid`` is (F', H', W'); without it S is factored as close to square.
        """
        unbatched = z.dim() == 3
        if unbatched:
            z = z[None]
            c_text = None if c_text is None else c_text[None] if c_text.dim() == 2 else c_text
            c_ids = None if c_ids is None else c_ids[None] if c_ids.dim() == 2 else c_ids
        if z.dim() != 4 or z.shape[-1] != self.cfg.patch_dim:
            raise ShapeError(f"latent must be (B, F', S, {self.cfg.patch_dim}), got {tuple(z.shape)}")
        b, f, s, _ = z.shape
        t = torch.as_tensor(t, dtype=z.dtype, device=z.device)
        if bool(((t < 0) | (t > 1)).any()):
            raise RangeError("t must lie in [0, 1]")
        t = t.expand(b) if t.dim() == 0 else t
        h, w = _grid_hw(s) if grid is None else grid[1:]
        x = self.embed_tokens(z) + sincos_positions((f, h, w), self.cfg.width, z.dtype).to(z.device)
        t_emb = self.time_embed(timestep_embedding(t, self.cfg.timestep_dim))
        for block in self.blocks:
            x = block(x, t_emb, c_text, text_mask, c_ids, ids_mask, token_mask)
        scale = self.final_scale(t_emb)[:, None, None, :]
        out = self.final_out(rmsnorm(x, self.final_gain, self.cfg.rmsnorm_eps) * (1 + scale))
        return out[0] if unbatched else out


def _grid_hw(s):
    # positions only need a consistent (H', W') factorization of S
    h = int(math.isqrt(s))
    while s % h:
        h -= 1
    return h, s // h


def param_group(name):
    """Freeze-policy group of a parameter name (model or conditioner)."""
    parts = name.split(".")
    if parts[0] == "conditioner":
        return parts[1]
    if parts[0] == "dit":
        parts = parts[1:]
    if parts[0] == "blocks":
        sub = parts[2]
        if sub == "norm_gains":
            sub = parts[3]
        if sub == "scale_proj":
            return "timestep"
        return {"spatial": "spatial_attn", "temporal": "temporal_attn", "text_cross": "text_cross_attn",
                "mc_injector": "mc_injector", "ffn": "ffn"}[sub]
    if parts[0] == "time_embed":
        return "timestep"
    if parts[0].startswith("final"):
        return "output"
    raise KeyError(f"no parameter group for {name!r}")


def grid_for(cfg, frames, height, width):
    return frames // cfg.patch_t, height // cfg.patch_h, width // cfg.patch_w


def as_numpy(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
