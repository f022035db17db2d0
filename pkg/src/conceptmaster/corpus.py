"""Synthetic curation corpora with planted flaws, for exercising the data pipeline."""

from dataclasses import dataclass, replace

import numpy as np

from .datapipe import PERSON_WIDTH, render_person
from .toydata import SceneSpec, background, shape_mask
from .toyvision import COLOR_NAMES, COLORS

FLAWS = {
    "scene_cut": "scene_cut",
    "static": "low_flow",
    "low_contrast": "low_contrast",
    "undersized": "all_boxes_eliminated",
    "fragmented": "bad_mask",
    "faceless": "face_missing",
}


@dataclass(frozen=True)
class Item:
    kind: str  # circle | square | triangle | person
    color: str
    size: int
    start: tuple
    velocity: tuple
    striped: bool = False
    face: bool = True


@dataclass(frozen=True)
class CorpusVideo:
    video_id: str
    items: tuple
    n_frames: int = 20
    height: int = 64
    width: int = 64
    bg_seed: int = 0
    flaw: str = ""
    ground_truth: tuple = ()

    @property
    def expected_reason(self):
        return FLAWS.get(self.flaw, "none")


def render(cv):
    spec = SceneSpec(cv.n_frames, cv.height, cv.width, (), background_seed=cv.bg_seed)
    bg = background(spec)
    video = np.broadcast_to(bg, (cv.n_frames,) + bg.shape).copy()
    for f in range(cv.n_frames):
        for it in cv.items:
            cx = it.start[0] + it.velocity[0] * f
            cy = it.start[1] + it.velocity[1] * f
            if it.kind == "person":
                render_person(video[f], (cx, cy), it.size, it.color, face=it.face)
                continue
            m = shape_mask(it.kind, (cx, cy), it.size, cv.height, cv.width)
            if it.striped:
                m[1::2] = False
            video[f][m] = COLORS[it.color]
    if cv.flaw == "scene_cut":
        other = replace(cv, items=(Item("square", "green", 26, (40, 30), (-1, 0)),), flaw="", bg_seed=cv.bg_seed + 1)
        cut = render(other) * 0.3
        video[cv.n_frames // 2 :] = cut[cv.n_frames // 2 :]
    if cv.flaw == "low_contrast":
        video = 0.5 + 0.1 * (video - 0.5)
    return video


def _clean_items(rng, k):
    kinds = ["circle", "square", "triangle", "person"]
    picks = rng.choice(len(kinds), size=k, replace=False)
    colors = rng.choice(len(COLOR_NAMES), size=k, replace=False)
    items = []
    for slot, (ki, ci) in enumerate(zip(picks, colors)):
        kind = kinds[ki]
        size = {"person": PERSON_WIDTH, "triangle": int(rng.integers(30, 32))}.get(kind, int(rng.integers(26, 30)))
        # left/right halves keep the two entities apart for all 20 frames
        cx = 16 if slot == 0 else 48
        if k == 1:
            cx = 30
        vy = int(rng.choice([-1, 1]))
        items.append(Item(kind, COLOR_NAMES[ci], size, (cx, 32 - 5 * vy), (0, vy)))
    return tuple(items)


def planted_corpus(seed=0, n_clean=14, flaws=tuple(FLAWS), mislabeled=1):
    """``n_clean`` clean videos, one video per planted flaw, and ``mislabeled``
    clean videos whose ground truth carries a wrong extra label.

    Ground truth lists entity classes.
    """
    rng = np.random.default_rng(seed)
    videos = []
    for i in range(n_clean):
        items = _clean_items(rng, 1 + i % 2)
        gt = tuple(sorted({it.kind for it in items}))
        if i < mislabeled:
            gt = tuple(sorted(set(gt) | {"dog"}))
        videos.append(CorpusVideo(f"clean_{i:02d}", items, bg_seed=int(rng.integers(2**31)), ground_truth=gt))
    for flaw in flaws:
        bg = int(rng.integers(2**31))
        if flaw == "undersized":
            items = (Item("circle", "red", 8, (16, 30), (1, 0)), Item("square", "blue", 8, (44, 34), (-1, 0)))
        elif flaw == "fragmented":
            items = (Item("circle", "orange", 28, (30, 32), (0, 1), striped=True),)
        elif flaw == "faceless":
            items = (Item("person", "purple", PERSON_WIDTH, (30, 30), (1, 0), face=False),)
        else:
            items = _clean_items(rng, 2)
            if flaw == "static":
                items = tuple(replace(it, velocity=(0, 0)) for it in items)
        gt = tuple(sorted({it.kind for it in items}))
        videos.append(CorpusVideo(f"flaw_{flaw}", items, bg_seed=bg, flaw=flaw, ground_truth=gt))
    return videos
