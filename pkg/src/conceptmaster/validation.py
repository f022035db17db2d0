"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .errors import RangeError, ShapeError, TooFewFramesError, ValidationError


def check_video(video, *, min_frames=1, dtype=np.float64, copy=False):
    """Validate a (frames, height, width, channels) array with values in [0, 1].

    Returns the array as ``dtype``.
    """
    arr = np.array(video, dtype=dtype, copy=copy) if copy else np.asarray(video, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"video must be 4-D (F, H, W, C), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"video has an empty dimension: {arr.shape}")
    if arr.shape[0] < min_frames:
        raise TooFewFramesError(f"need at least {min_frames} frames, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("video contains non-finite values")
    return arr


def check_image(image, *, dtype=np.float64):
    """Validate an (H, W, 3) image in [0, 1]."""
    arr = np.asarray(image, dtype=dtype)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"image must be (H, W, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"image is empty: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError("image values must lie in [0, 1]")
    return arr


def check_label(label):
    if not isinstance(label, str) or not label.strip():
        raise ValidationError("label must be a nonempty string")
    return label.strip()


def check_probability(p, name="p"):
    if not isinstance(p, numbers.Real) or not 0.0 <= p <= 1.0:
        raise RangeError(f"{name} must be in [0, 1], got {p!r}")
    return float(p)


def check_unit_interval(t, name="t"):
    if not 0.0 <= float(t) <= 1.0:
        raise RangeError(f"{name} must be in [0, 1], got {t!r}")
    return float(t)


def check_same_shape(*arrays):
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def check_random_state(seed):
    """Turn ``seed`` into a ``np.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
