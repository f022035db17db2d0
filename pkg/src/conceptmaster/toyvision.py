"""Deterministic toy vision primitives shared by the data pipeline and the benchmark.

Everything here works on hard-rasterized synthetic frames: saturated named
colors over a low-contrast gray background.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
COLOR_NAMES = tuple(COLORS)
COLOR_TABLE = np.array([COLORS[c] for c in COLOR_NAMES])

SHAPES = ("circle", "square", "triangle")
# fill ratio of a shape inside its own bounding box
IDEAL_FILL = {"circle": np.pi / 4, "square": 1.0, "triangle": 0.5, "person": 1.0}

BACKGROUND_GRAY = 0.5
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)
EIGHT_CONNECTED = ndimage.generate_binary_structure(2, 2)


def classify_pixels(frame, tol=0.3):
    """Index into ``COLOR_NAMES`` for each pixel, or -1 when no named color is within ``tol``."""
    frame = np.asarray(frame, dtype=np.float64)
    d = np.linalg.norm(frame[..., None, :] - COLOR_TABLE, axis=-1)
    idx = d.argmin(axis=-1)
    idx[d.min(axis=-1) > tol] = -1
    return idx


def foreground(frame, tol=0.3):
    return classify_pixels(frame, tol) >= 0


def close_mask(mask):
    """Bridge one-pixel gaps (e.g. striped rendering) and fill interior holes."""
    closed = ndimage.binary_closing(np.pad(mask, 1), structure=EIGHT_CONNECTED)[1:-1, 1:-1]
    return ndimage.binary_fill_holes(closed | mask)


def count_components(mask):
    _, n = ndimage.label(np.asarray(mask, dtype=bool), structure=FOUR_CONNECTED)
    return int(n)


def mask_bbox(mask):
    """(x0, y0, x1, y1) with exclusive upper bounds, or None for an empty mask."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def shape_features(mask):
    """(fill ratio inside bbox, log aspect h/w) of a binary mask."""
    bbox = mask_bbox(mask)
    if bbox is None:
        return np.zeros(2)
    x0, y0, x1, y1 = bbox
    h, w = y1 - y0, x1 - x0
    return np.array([mask.sum() / float(h * w), np.log(h / w)])


def classify_shape(mask):
    """Shape name for a filled component mask, or None when nothing fits."""
    fill, log_aspect = shape_features(mask)
    aspect = np.exp(log_aspect)
    if aspect >= 1.6 and fill >= 0.8:
        return "person"
    if not 0.6 <= aspect <= 1.6:
        return None
    if fill >= 0.9:
        return "square"
    if fill >= 0.62:
        return "circle"
    if fill >= 0.3:
        return "triangle"
    return None


def shape_confidence(mask, shape):
    fill = shape_features(mask)[0]
    return float(np.clip(1.0 - abs(fill - IDEAL_FILL[shape]), 0.0, 1.0))


@dataclass(frozen=True)
class Region:
    """One detected colored blob."""

    color: str
    shape: str
    box: tuple  # (x0, y0, x1, y1), exclusive upper bounds
    mask: np.ndarray
    raw_mask: np.ndarray
    confidence: float

    @property
    def label(self):
        return f"{self.color} {self.shape}"


def detect_regions(frame, *, tol=0.3, min_area=12, shapes=None):
    """Connected components per named color, each classified into a shape.

    Components whose shape cannot be classified (or is not in ``shapes``)
    are dropped. Order is deterministic: by color, then by component label.
    """
    idx = classify_pixels(frame, tol)
    out = []
    for ci, cname in enumerate(COLOR_NAMES):
        raw = idx == ci
        if not raw.any():
            continue
        closed = close_mask(raw)
        labels, n = ndimage.label(closed, structure=EIGHT_CONNECTED)
        for k in range(1, n + 1):
            comp = labels == k
            if comp.sum() < min_area:
                continue
            shape = classify_shape(comp)
            if shape is None or (shapes is not None and shape not in shapes):
                continue
            out.append(
                Region(
                    color=cname,
                    shape=shape,
                    box=mask_bbox(comp),
                    mask=comp,
                    raw_mask=raw & comp,
                    confidence=shape_confidence(comp, shape),
                )
            )
    return out


def crop_features(crop, tol=0.3):
    """(fill, log aspect, mean r, mean g, mean b) of the dominant blob in ``crop``.

    The blob is the largest closed component of named-color pixels.
    """
    crop = np.asarray(crop, dtype=np.float64)
    fg = foreground(crop, tol)
    if not fg.any():
        return np.concatenate([np.zeros(2), np.full(3, BACKGROUND_GRAY)])
    closed = close_mask(fg)
    labels, n = ndimage.label(closed, structure=EIGHT_CONNECTED)
    sizes = ndimage.sum(closed, labels, index=np.arange(1, n + 1))
    comp = labels == (int(np.argmax(sizes)) + 1)
    pix = crop[comp & fg]
    return np.concatenate([shape_features(comp), pix.mean(axis=0)])


def face_template(seed=7, size=6):
    """Seeded black/white face pattern; balanced and never constant."""
    rng = np.random.default_rng(seed)
    bits = np.zeros(size * size)
    bits[rng.permutation(size * size)[: size * size // 2]] = 1.0
    return bits.reshape(size, size)


def match_template(gray, template, threshold=0.9):
    """All (y, x) offsets where zero-mean normalized correlation >= ``threshold``."""
    gray = np.asarray(gray, dtype=np.float64)
    th, tw = template.shape
    if gray.shape[0] < th or gray.shape[1] < tw:
        return []
    windows = np.lib.stride_tricks.sliding_window_view(gray, (th, tw))
    t = template - template.mean()
    w = windows - windows.mean(axis=(-1, -2), keepdims=True)
    num = (w * t).sum(axis=(-1, -2))
    den = np.sqrt((w**2).sum(axis=(-1, -2)) * (t**2).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(den > 1e-12, num / den, 0.0)
    ys, xs = np.nonzero(ncc >= threshold)
    return list(zip(ys.tolist(), xs.tolist()))


def luminance(frames):
    frames = np.asarray(frames, dtype=np.float64)
    return frames[..., 0] * 0.299 + frames[..., 1] * 0.587 + frames[..., 2] * 0.114
