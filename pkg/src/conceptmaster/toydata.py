"""Synthetic multi-concept videos: colored shapes moving over a gray texture.

Every scene carries exact ground truth (captions, reference images, and
per-frame boxes computed from the trajectory rather than from pixels).
"""

import json
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import RangeError
from .tensorio import read_tensor, write_tensor
from .toyvision import BACKGROUND_GRAY, COLOR_NAMES, COLORS, SHAPES
from .validation import check_random_state

ALL_CONCEPTS = tuple(product(SHAPES, COLOR_NAMES))
MOTIONS = ("left", "right", "up", "down", "bob")
MOTION_PHRASES = {
    "left": "moving left",
    "right": "moving right",
    "up": "moving up",
    "down": "moving down",
    "bob": "bobbing",
    "still": "resting",
}
CAPTION_TEMPLATES = (
    "{subjects} across a textured background",
    "{subjects} on a gray backdrop",
)
REFERENCE_SIZE = 32
REFERENCE_SHAPE_SIZE = 20


@dataclass(frozen=True)
class Trajectory:
    """Integer-valued path of a shape center.

    ``linear``: start + velocity * f.  ``sinusoidal``: x moves linearly while
    y oscillates by ``round(amplitude * sin(2 pi f / period))``.
    """

    kind: str
    start: tuple
    velocity: tuple = (0, 0)
    amplitude: int = 0
    period: int = 8

    def position(self, f):
        x = self.start[0] + self.velocity[0] * f
        y = self.start[1] + self.velocity[1] * f
        if self.kind == "sinusoidal":
            y += int(round(self.amplitude * np.sin(2 * np.pi * f / self.period)))
        return float(x), float(y)

    @property
    def motion(self):
        if self.kind == "sinusoidal":
            return "bob"
        vx, vy = self.velocity
        if vx == 0 and vy == 0:
            return "still"
        if abs(vx) >= abs(vy):
            return "left" if vx < 0 else "right"
        return "up" if vy < 0 else "down"


@dataclass(frozen=True)
class ConceptSpec:
    shape: str
    color: str
    size: int
    trajectory: Trajectory

    @property
    def label(self):
        return f"{self.color} {self.shape}"


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int
    height: int
    width: int
    concepts: tuple
    background_seed: int = 0
    caption_template: int = 0
    background_amplitude: float = 0.06
    meta: dict = field(default_factory=dict, compare=False)

    def to_json(self):
        d = asdict(self)
        d.pop("meta")
        return d

    @classmethod
    def from_json(cls, d):
        concepts = tuple(
            ConceptSpec(
                shape=c["shape"],
                color=c["color"],
                size=int(c["size"]),
                trajectory=Trajectory(
                    kind=c["trajectory"]["kind"],
                    start=tuple(c["trajectory"]["start"]),
                    velocity=tuple(c["trajectory"]["velocity"]),
                    amplitude=int(c["trajectory"]["amplitude"]),
                    period=int(c["trajectory"]["period"]),
                ),
            )
            for c in d["concepts"]
        )
        kw = {k: v for k, v in d.items() if k != "concepts"}
        return cls(concepts=concepts, **kw)


def _extent(traj, n_frames):
    pts = np.array([traj.position(f) for f in range(n_frames)])
    return pts.min(axis=0), pts.max(axis=0)


def gen_scene(
    rng,
    K,
    *,
    n_frames=8,
    height=32,
    width=32,
    size_range=None,
    concepts=None,
    motions=MOTIONS,
    max_tries=200,
):
    """Random scene with ``K`` distinct (shape, color) concepts.

    Boxes stay pairwise separated by at least ``MIN_GAP`` px in every frame. ``concepts``
    optionally fixes the (shape, color) pairs. ``size_range`` defaults
    to (8, 12) for up to two concepts and (7, 9) for more.
    """
    if not 1 <= K <= 4:
        raise RangeError(f"K must be in [1, 4], got {K}")
    rng = check_random_state(rng)
    if concepts is None:
        picks = rng.choice(len(ALL_CONCEPTS), size=K, replace=False)
        concepts = [ALL_CONCEPTS[i] for i in picks]
    elif len(set(concepts)) != len(concepts) or len(concepts) != K:
        raise RangeError("concepts must be K distinct (shape, color) pairs")

    if size_range is None:
        size_range = (8, 12) if K <= 2 else (7, 9)
    for _ in range(max_tries):
        placed = _place(rng, concepts, n_frames, height, width, size_range, motions)
        if placed is not None:
            break
    else:
        raise RangeError("could not place concepts without overlap; enlarge the frame")
    return SceneSpec(
        n_frames=n_frames,
        height=height,
        width=width,
        concepts=tuple(placed),
        background_seed=int(rng.integers(2**31)),
        caption_template=int(rng.integers(len(CAPTION_TEMPLATES))),
    )



def _place(rng, concepts, n_frames, height, width, size_range, motions, tries=100):
    """One placement attempt; None when some concept finds no free spot."""
    placed = []
    for shape, color in concepts:
        for _ in range(tries):
            size = int(rng.integers(size_range[0], size_range[1] + 1))
            motion = motions[int(rng.integers(len(motions)))]
            speed = int(rng.integers(1, 3))
            vel = {"left": (-speed, 0), "right": (speed, 0), "up": (0, -speed), "down": (0, speed)}
            if motion == "bob":
                traj_proto = Trajectory("sinusoidal", (0, 0), (0, 0), int(rng.integers(2, 4)), n_frames)
            else:
                traj_proto = Trajectory("linear", (0, 0), vel[motion])
            lo, hi = _extent(traj_proto, n_frames)
            half = size / 2.0
            # corner must be integral so rasterization is exact
            xmin, xmax = half - lo[0], width - half - hi[0]
            ymin, ymax = half - lo[1], height - half - hi[1]
            if xmax < xmin or ymax < ymin:
                continue
            cx = half + int(rng.integers(int(np.ceil(xmin - half)), int(np.floor(xmax - half)) + 1))
            cy = half + int(rng.integers(int(np.ceil(ymin - half)), int(np.floor(ymax - half)) + 1))
            traj = Trajectory(traj_proto.kind, (cx, cy), traj_proto.velocity, traj_proto.amplitude, traj_proto.period)
            cand = ConceptSpec(shape, color, size, traj)
            if any(
                _boxes_close(placed_boxes([cand], f)[0], other, MIN_GAP)
                for f in range(n_frames)
                for other in placed_boxes(placed, f)
            ):
                continue
            placed.append(cand)
            break
        else:
            return None
    return placed

MIN_GAP = 4


def placed_boxes(placed, frame=0):
    out = []
    for c in placed:
        x, y = c.trajectory.position(frame)
        h = c.size / 2.0
        out.append((x - h, y - h, x + h, y + h))
    return out


def _boxes_close(a, b, gap):
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def shape_mask(shape, center, size, height, width):
    """Hard rasterization: a pixel is on iff its center lies inside the shape."""
    cx, cy = center
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    half = size / 2.0
    if shape == "circle":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
    if shape == "square":
        return (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    if shape == "triangle":
        top = cy - half
        depth = ys - top
        return (depth >= 0) & (depth <= size) & (np.abs(xs - cx) <= depth * half / size)
    raise ValueError(f"unknown shape {shape!r}")


def background(spec):
    rng = np.random.default_rng(spec.background_seed)
    noise = rng.standard_normal((spec.height, spec.width))
    smooth = ndimage.gaussian_filter(noise, sigma=2.0, mode="wrap")
    smooth /= max(np.abs(smooth).max(), 1e-12)
    gray = BACKGROUND_GRAY + spec.background_amplitude * smooth
    return np.repeat(gray[..., None], 3, axis=-1)


def render_video(spec):
    """(F, H, W, 3) float64 video; later concepts paint over earlier ones."""
    bg = background(spec)
    video = np.broadcast_to(bg, (spec.n_frames,) + bg.shape).copy()
    for f in range(spec.n_frames):
        for c in spec.concepts:
            m = shape_mask(c.shape, c.trajectory.position(f), c.size, spec.height, spec.width)
            video[f][m] = COLORS[c.color]
    return video


def render_reference(concept, size=REFERENCE_SIZE, shape_size=REFERENCE_SHAPE_SIZE):
    """Canonical reference image on plain mid-gray and its ``"<color> <shape>"`` label."""
    img = np.full((size, size, 3), BACKGROUND_GRAY)
    m = shape_mask(concept.shape, (size / 2.0, size / 2.0), shape_size, size, size)
    img[m] = COLORS[concept.color]
    return img, concept.label


def caption(spec):
    phrases = [f"a {c.label} {MOTION_PHRASES[c.trajectory.motion]}" for c in spec.concepts]
    if len(phrases) == 1:
        subjects = phrases[0]
    else:
        subjects = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    return CAPTION_TEMPLATES[spec.caption_template % len(CAPTION_TEMPLATES)].format(subjects=subjects)


def oracle_locate(spec, frame_index):
    """[(concept_index, (x0, y0, x1, y1))] from trajectory math alone."""
    if not 0 <= frame_index < spec.n_frames:
        raise RangeError(f"frame_index {frame_index} outside [0, {spec.n_frames})")
    out = []
    for i, c in enumerate(spec.concepts):
        x, y = c.trajectory.position(frame_index)
        h = c.size / 2.0
        out.append((i, (x - h, y - h, x + h, y + h)))
    return out


def write_scene_dir(path, spec, fps=15):
    """Scene folder: ``video.f32``, ``ref_<i>.f32``, and ``scene.json``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "video.f32", render_video(spec), fps=fps)
    labels = []
    for i, c in enumerate(spec.concepts):
        img, label = render_reference(c)
        write_tensor(path / f"ref_{i}.f32", img, label=label)
        labels.append(label)
    boxes = [
        [{"concept": i, "box": list(b)} for i, b in oracle_locate(spec, f)] for f in range(spec.n_frames)
    ]
    doc = {"spec": spec.to_json(), "caption": caption(spec), "labels": labels, "oracle_boxes": boxes}
    (path / "scene.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_scene_dir(path):
    """Load a scene folder as a sample dict: video, refs [(image, label)], caption, spec."""
    path = Path(path)
    doc = json.loads((path / "scene.json").read_text())
    video, _ = read_tensor(path / "video.f32")
    refs = []
    for i, label in enumerate(doc["labels"]):
        img, _ = read_tensor(path / f"ref_{i}.f32")
        refs.append((img.astype(np.float64), label))
    return {
        "video": video.astype(np.float64),
        "refs": refs,
        "caption": doc["caption"],
        "spec": SceneSpec.from_json(doc["spec"]),
    }


def scene_sample(spec):
    """In-memory equivalent of ``read_scene_dir`` for a freshly generated spec."""
    return {
        "video": render_video(spec),
        "refs": [render_reference(c) for c in spec.concepts],
        "caption": caption(spec),
        "spec": spec,
    }
