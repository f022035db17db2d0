"""Composite multi-concept embedding: encoders -> Q-Former -> DAM -> concat.

Each (reference image, label) pair is processed on its own; pairs only meet
when their embeddings are concatenated, so changing one concept can never
move another concept's rows.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeedForward, attention, rmsnorm
from .errors import BackendError, EmptyListError, ShapeError, TooManyConceptsError, ValidationError
from .validation import check_image, check_label


@dataclass
class ConditioningConfig:
    grid: int = 16
    visual_dim: int = 768
    concept_dim: int = 64
    num_queries: int = 16
    qformer_layers: int = 2
    qformer_heads: int = 4
    dam_heads: int = 4
    dam_residual: bool = True
    max_concepts: int = 4
    ffn_mult: int = 4
    image_seed: int = 1
    label_seed: int = 2
    rmsnorm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("grid", "visual_dim", "concept_dim", "num_queries", "qformer_heads", "dam_heads",
                     "max_concepts", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.qformer_layers < 0:
            raise ValidationError("qformer_layers must be >= 0")
        for heads in (self.qformer_heads, self.dam_heads):
            if self.concept_dim % heads:
                raise ValidationError(f"concept_dim {self.concept_dim} not divisible by {heads} heads")


@dataclass(frozen=True)
class ConceptRef:
    image: np.ndarray = field(repr=False)
    label: str

    def __post_init__(self):
        object.__setattr__(self, "image", check_image(self.image))
        object.__setattr__(self, "label", check_label(self.label))


@dataclass
class CompositeConceptEmbedding:
    """Row-wise concatenation of per-concept embeddings plus their row spans."""

    tokens: torch.Tensor
    spans: list

    def block(self, i):
        start, end = self.spans[i]
        return self.tokens[start:end]


# -- toy encoders -------------------------------------------------------------


def _cell_edges(n, g):
    return np.linspace(0, n, g + 1).round().astype(int)


class ToyImageEncoder:
    """G x G grid of pooled color/edge statistics lifted by a seeded linear map.

    Per cell: mean RGB, mean luminance-gradient magnitude, luminance variance.
    The map has a bias row, so a black image yields that row everywhere.
    """

    thread_safe = True
    n_features = 5

    def __init__(self, grid=16, dim=768, seed=1):
        self.grid, self.dim = grid, dim
        rng = np.random.default_rng(seed)
        self.weight = rng.standard_normal((self.n_features, dim)) / np.sqrt(self.n_features)
        self.bias = 0.1 * rng.standard_normal(dim)

    def features(self, image):
        image = check_image(image)
        h, w, _ = image.shape
        if h < self.grid or w < self.grid:
            raise ShapeError(f"image {h}x{w} smaller than the {self.grid}x{self.grid} token grid")
        lum = image @ np.array([0.299, 0.587, 0.114])
        gy, gx = np.gradient(lum)
        edge = np.hypot(gx, gy)
        ys, xs = _cell_edges(h, self.grid), _cell_edges(w, self.grid)
        feats = np.zeros((self.grid, self.grid, self.n_features))
        for i in range(self.grid):
            for j in range(self.grid):
                sl = (slice(ys[i], ys[i + 1]), slice(xs[j], xs[j + 1]))
                feats[i, j, :3] = image[sl].reshape(-1, 3).mean(0)
                feats[i, j, 3] = edge[sl].mean()
                feats[i, j, 4] = lum[sl].var()
        return feats

    def encode(self, image):
        return self.features(image) @ self.weight + self.bias


def _word_index(word, size):
    return int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little") % size


class ToyTextEncoder:
    """One token per whitespace-separated word, looked up in a seeded table by hash."""

    thread_safe = True

    def __init__(self, dim=64, table_size=4096, seed=2):
        self.dim = dim
        self.table = np.random.default_rng(seed).standard_normal((table_size, dim))

    def encode(self, text):
        words = check_label(text).lower().split()
        return self.table[[_word_index(w, len(self.table)) for w in words]]


def encode_image(backend, image, index=None):
    try:
        return np.asarray(backend.encode(image), dtype=np.float64)
    except (BackendError, ValidationError):
        raise
    except Exception as exc:
        raise BackendError(str(exc), context=f"concept {index}") from exc


def encode_label(backend, label, index=None):
    label = check_label(label)
    try:
        return np.asarray(backend.encode(label), dtype=np.float64)
    except (BackendError, ValidationError):
        raise
    except Exception as exc:
        raise BackendError(str(exc), context=f"concept {index}") from exc


# -- learnable modules --------------------------------------------------------


class QFormerLayer(nn.Module):
    def __init__(self, dim, visual_dim, heads, ffn_mult, eps):
        super().__init__()
        self.heads, self.eps = heads, eps
        self.attn_gain = nn.Parameter(torch.ones(dim))
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(visual_dim, dim, bias=False)
        self.to_v = nn.Linear(visual_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)
        self.ffn_gain = nn.Parameter(torch.ones(dim))
        self.ffn = FeedForward(dim, ffn_mult)

    def forward(self, x, dense):
        h = rmsnorm(x, self.attn_gain, self.eps)
        x = x + self.to_out(attention(self.to_q(h), self.to_k(dense), self.to_v(dense), self.heads))
        return x + self.ffn(rmsnorm(x, self.ffn_gain, self.eps))


class QFormer(nn.Module):
    """Learnable queries cross-attending to flattened dense visual tokens."""

    def __init__(self, cfg):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(cfg.num_queries, cfg.concept_dim) * 0.5)
        self.layers = nn.ModuleList(
            QFormerLayer(cfg.concept_dim, cfg.visual_dim, cfg.qformer_heads, cfg.ffn_mult, cfg.rmsnorm_eps)
            for _ in range(cfg.qformer_layers)
        )

    def forward(self, dense):
        """``dense``: (..., G*G, D_v) flattened tokens -> (..., M, D)."""
        x = self.queries.expand(*dense.shape[:-2], *self.queries.shape)
        for layer in self.layers:
            x = layer(x, dense)
        return x


def qformer(dense_grid, module):
    """Run ``module`` on a (..., G, G, D_v) token grid."""
    return module(dense_grid.flatten(-3, -2))


class GatedFFN(nn.Module):
    """Two-layer MLP whose hidden activation is a GELU-gated linear unit."""

    def __init__(self, dim, mult=4):
        super().__init__()
        self.w_in = nn.Linear(dim, 2 * mult * dim)
        self.w_out = nn.Linear(mult * dim, dim)

    def forward(self, x):
        a, gate = self.w_in(x).chunk(2, dim=-1)
        return self.w_out(a * F.gelu(gate))


class DAM(nn.Module):
    """Intra-pair attention: visual tokens query their own label tokens, then an FFN."""

    def __init__(self, cfg):
        super().__init__()
        d = cfg.concept_dim
        self.heads = cfg.dam_heads
        self.residual = cfg.dam_residual
        self.w_q = nn.Linear(d, d, bias=False)
        self.w_k = nn.Linear(d, d, bias=False)
        self.w_v = nn.Linear(d, d, bias=False)
        self.ffn = GatedFFN(d, cfg.ffn_mult)

    def forward(self, x, y, label_mask=None):
        """``x``: (..., M, D) visual tokens; ``y``: (..., L, D) label tokens."""
        if x.shape[-1] != y.shape[-1] or x.shape[-1] != self.w_q.in_features:
            raise ShapeError(f"DAM widths differ: {x.shape[-1]} vs {y.shape[-1]}")
        mask = None if label_mask is None else label_mask[..., None, :]
        h = attention(self.w_q(x), self.w_k(y), self.w_v(y), self.heads, mask)
        if self.residual:
            h = x + h
            return h + self.ffn(h)
        return self.ffn(h)


def composite(embeddings):
    """Concatenate per-concept (M_i, D) embeddings in order and record row spans."""
    embeddings = list(embeddings)
    if not embeddings:
        raise EmptyListError("composite needs at least one concept embedding")
    widths = {e.shape[-1] for e in embeddings}
    if len(widths) != 1:
        raise ShapeError(f"concept embeddings have different widths: {sorted(widths)}")
    spans, start = [], 0
    for e in embeddings:
        spans.append((start, start + e.shape[0]))
        start += e.shape[0]
    return CompositeConceptEmbedding(torch.cat(embeddings, dim=0), spans)


class ConceptConditioner(nn.Module):
    """Q-Former + DAM with pluggable image/label encoders."""

    def __init__(self, cfg=None, image_encoder=None, label_encoder=None):
        super().__init__()
        self.cfg = cfg = cfg or ConditioningConfig()
        self.image_encoder = image_encoder or ToyImageEncoder(cfg.grid, cfg.visual_dim, cfg.image_seed)
        self.label_encoder = label_encoder or ToyTextEncoder(cfg.concept_dim, seed=cfg.label_seed)
        self.qformer = QFormer(cfg)
        self.dam = DAM(cfg)
        self._cache = {}

    def encode_ref(self, ref, index=None):
        """(dense tokens (G*G, D_v), label tokens (L, D)) as float64 numpy, memoized."""
        image, label = (ref.image, ref.label) if isinstance(ref, ConceptRef) else ref
        image = np.asarray(image, dtype=np.float64)
        key = (hashlib.sha1(image.tobytes()).hexdigest(), image.shape, label)
        if key not in self._cache:
            dense = encode_image(self.image_encoder, image, index)
            dense = dense.reshape(-1, dense.shape[-1])
            if dense.shape[-1] != self.cfg.visual_dim:
                raise BackendError(f"image encoder returned width {dense.shape[-1]}", context=f"concept {index}")
            tokens = encode_label(self.label_encoder, label, index)
            if tokens.ndim != 2 or tokens.shape[-1] != self.cfg.concept_dim or len(tokens) < 1:
                raise BackendError(f"label encoder returned shape {tokens.shape}", context=f"concept {index}")
            self._cache[key] = (dense, tokens)
        return self._cache[key]

    def embed_pairs(self, dense, labels, label_mask=None):
        """Batched Q-Former + DAM: (N, G*G, D_v), (N, L, D) -> (N, M, D)."""
        return self.dam(self.qformer(dense), labels, label_mask)

    def embed_refs(self, refs):
        """Per-concept embeddings (N, M, D) for a list of refs, in order."""
        if len(refs) > self.cfg.max_concepts:
            raise TooManyConceptsError(f"{len(refs)} concepts exceed the maximum of {self.cfg.max_concepts}")
        if not refs:
            raise EmptyListError("at least one concept reference is required")
        dtype = self.qformer.queries.dtype
        out = []
        # one concept per call: no shared padding or batching between pairs
        for i, r in enumerate(refs):
            dense, tokens = self.encode_ref(r, i)
            dense = torch.as_tensor(dense, dtype=dtype)[None]
            out.append(self.embed_pairs(dense, torch.as_tensor(tokens, dtype=dtype)[None])[0])
        return torch.stack(out)

    def forward(self, refs):
        """Build the composite embedding c*_IDs for up to ``max_concepts`` refs."""
        return composite(list(self.embed_refs(refs)))


def build_conditions(refs, conditioner):
    return conditioner(refs)


def pad_tokens(seqs, dtype=torch.float32):
    """Stack variable-length (L_i, D) arrays into (N, L_max, D) plus a validity mask."""
    n, lmax = len(seqs), max(len(s) for s in seqs)
    d = seqs[0].shape[-1]
    out = torch.zeros(n, lmax, d, dtype=dtype)
    mask = torch.zeros(n, lmax, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(np.asarray(s), dtype=dtype)
        mask[i, : len(s)] = True
    return out, mask
