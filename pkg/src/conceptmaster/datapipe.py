"""Two-stage curation of multi-concept training videos.

Stage 1 cheaply rejects unsuitable videos (scene cuts, no motion, low
contrast, no usable entity boxes). Stage 2 extracts per-entity masks and
reference crops and drops entities whose masks, classification, or faces
do not hold up. Model backends are pluggable; the toy ones here work on
synthetic shape videos.
"""

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import toyvision as tv
from .errors import AlignmentError, BackendError, ShapeError, TooFewFramesError, ValidationError
from .validation import check_video

REJECT_REASONS = (
    "scene_cut", "low_flow", "low_contrast", "no_nouns", "all_boxes_eliminated", "bad_mask", "face_missing", "none",
)

DEFAULT_TAXONOMY = {
    "circle": ["circle", "disc", "disk"],
    "square": ["square", "cube"],
    "triangle": ["triangle", "wedge"],
    "person": ["person", "man", "woman", "boy", "girl"],
    "dog": ["dog", "puppy", "beagle"],
    "cat": ["cat", "kitten"],
    "ball": ["ball"],
}


class Taxonomy:
    """Class name -> sub-words, with every sub-word owned by exactly one class."""

    def __init__(self, classes):
        self.classes = {}
        owner = {}
        for cls, words in dict(classes).items():
            words = list(words)
            if not words:
                raise ValidationError(f"taxonomy class {cls!r} has no sub-words")
            for w in words:
                if w != w.lower() or not w.strip():
                    raise ValidationError(f"sub-word {w!r} must be lowercase and nonempty")
                if w in owner:
                    raise ValidationError(f"sub-word {w!r} appears in both {owner[w]!r} and {cls!r}")
                owner[w] = cls
            self.classes[cls] = words
        self.owner = owner

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text()))

    def __len__(self):
        return len(self.classes)


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float
    score: float = 1.0
    label: str = ""

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValidationError(f"degenerate box {self}")

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def within(self, height, width):
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= width and self.y1 <= height

    def slices(self):
        return slice(int(self.y0), int(np.ceil(self.y1))), slice(int(self.x0), int(np.ceil(self.x1)))


def iou(a, b):
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


# -- stage 1 gates ---------------------------------------------------------------


def color_histograms(frames, bins=16):
    frames = np.asarray(frames)
    hists = np.stack(
        [
            np.stack([np.histogram(f[..., ch], bins=bins, range=(0.0, 1.0))[0] for ch in range(f.shape[-1])])
            for f in frames
        ]
    ).astype(np.float64)
    return hists / hists.sum(-1, keepdims=True)


def scene_cut_scores(frames, bins=16):
    """Per adjacent frame pair: channel-averaged total-variation distance of color histograms."""
    h = color_histograms(frames, bins)
    return 0.5 * np.abs(np.diff(h, axis=0)).sum(-1).mean(-1)


def scene_cut_gate(frames, threshold=0.3):
    frames = check_video(frames, min_frames=2)
    return bool(np.all(scene_cut_scores(frames) <= threshold))


def flow_score(frames):
    """Mean absolute inter-frame difference, a stand-in for optical-flow magnitude."""
    frames = check_video(frames, min_frames=2)
    return float(np.abs(np.diff(frames, axis=0)).mean())


def flow_gate(frames, min_score=2e-4):
    return flow_score(frames) >= min_score


def contrast_score(frames):
    frames = check_video(frames)
    return float(tv.luminance(frames).reshape(len(frames), -1).std(axis=1).mean())


def contrast_gate(frames, min_std=0.025):
    return contrast_score(frames) >= min_std


def extract_nouns(caption, taxonomy):
    """[(surface word, class)] in caption order, one entry per class."""
    if not caption or not caption.strip():
        raise ValidationError("caption must be nonempty")
    out, seen = [], set()
    for word in re.findall(r"[a-z]+", caption.lower()):
        cls = taxonomy.owner.get(word)
        if cls is not None and cls not in seen:
            seen.add(cls)
            out.append((word, cls))
    return out


def sample_frames(n_frames, fraction=0.10):
    if n_frames < 1:
        raise ValidationError("n_frames must be >= 1")
    if not 0 < fraction <= 1:
        raise ValidationError("fraction must be in (0, 1]")
    k = max(1, int(np.floor(fraction * n_frames + 0.5)))
    return [int(i * n_frames // k) for i in range(k)]


def nms(boxes, iou_threshold=0.5):
    """Greedy NMS. Priority: score desc, then x0, y0, input order."""
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, boxes[i].x0, boxes[i].y0, i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(i)
    return [boxes[i] for i in kept]


def area_gate(boxes, frame_dims, lo=0.10, hi=0.90):
    h, w = frame_dims
    if h <= 0 or w <= 0:
        raise ValidationError(f"invalid frame dims {frame_dims}")
    area = float(h * w)
    return [b for b in boxes if lo <= b.area / area <= hi]


def consistency_gate(classifier, crop, expected_class, labels):
    labels = list(labels)
    if expected_class not in labels:
        raise ValidationError(f"{expected_class!r} not among candidate labels")
    if np.asarray(crop).size == 0:
        raise ValidationError("empty crop")
    return classifier.classify(crop, labels) == expected_class


def mask_gate(mask, frame_dims, lo=0.10, hi=0.90, max_components=3):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(frame_dims):
        raise ShapeError(f"mask {mask.shape} does not match frame {tuple(frame_dims)}")
    frac = mask.sum() / float(mask.size)
    return bool(lo <= frac <= hi and tv.count_components(mask) <= max_components)


def face_gate(face_detector, crop, label_class):
    if label_class != "person":
        return True
    if np.asarray(crop).size == 0:
        raise ValidationError("empty crop")
    return len(face_detector.detect(crop)) > 0


# -- toy backends ------------------------------------------------------------------


PERSON_WIDTH = 16


def render_person(frame, center, width, color, face=True, template_seed=7):
    """Paint a toy person (tall rectangle, optional face pattern near the top) in place."""
    cx, cy = center
    h, w = frame.shape[:2]
    height = 2 * width
    x0, y0 = int(round(cx - width / 2)), int(round(cy - height / 2))
    frame[max(y0, 0) : y0 + height, max(x0, 0) : x0 + width] = tv.COLORS[color]
    if face:
        t = tv.face_template(template_seed)
        fy, fx = y0 + 2, x0 + (width - t.shape[1]) // 2
        frame[fy : fy + t.shape[0], fx : fx + t.shape[1]] = t[..., None]
    return frame


class ToyCaptioner:
    """Describes the colored blobs found in the middle frame."""

    def caption(self, frames):
        regions = tv.detect_regions(frames[len(frames) // 2], shapes=tv.SHAPES + ("person",))
        parts = [f"a person in {r.color}" if r.shape == "person" else f"a {r.color} {r.shape}" for r in regions]
        if not parts:
            return "an empty textured scene"
        body = parts[0] if len(parts) == 1 else ", ".join(parts[:-1]) + " and " + parts[-1]
        return body + " in motion"


class ToyDetector:
    """Text-guided detection over colored components.

    Like real open-set detectors it also reports a slightly looser duplicate
    of every box at a lower score, which NMS is expected to remove.
    """

    def detect(self, frame, classes):
        h, w = frame.shape[:2]
        boxes = []
        for r in tv.detect_regions(frame, shapes=set(classes)):
            x0, y0, x1, y1 = r.box
            score = 0.5 + 0.49 * r.confidence
            boxes.append(Box(x0, y0, x1, y1, score, r.shape))
            boxes.append(Box(max(x0 - 1, 0), max(y0 - 1, 0), min(x1 + 1, w), min(y1 + 1, h), 0.9 * score, r.shape))
        return boxes


class ToyClassifier:
    """Nearest centroid over (fill, aspect[, mean color]) features of the dominant blob.

    Centroids come from canonical renders of each label plus a small seeded
    offset. Labels look like ``"circle"``, ``"person"`` or ``"red circle"``;
    color features only count for labels that name a color.
    """

    def __init__(self, seed=11, jitter=1e-3):
        self.seed, self.jitter = seed, jitter
        self._centroids = {}

    def supports(self, label):
        return label.split()[-1] in tv.SHAPES + ("person",)

    def centroid(self, label):
        if label not in self._centroids:
            words = label.split()
            shape = words[-1]
            color = words[0] if len(words) > 1 else "red"
            if color not in tv.COLORS or not self.supports(label):
                raise BackendError(f"toy classifier cannot represent {label!r}")
            img = np.full((40, 40, 3), tv.BACKGROUND_GRAY)
            if shape == "person":
                render_person(img, (20, 20), PERSON_WIDTH, color)
            else:
                from .toydata import shape_mask

                img[shape_mask(shape, (20.0, 20.0), 20, 40, 40)] = tv.COLORS[color]
            rng = np.random.default_rng([self.seed, sum(map(ord, label))])
            self._centroids[label] = tv.crop_features(img) + self.jitter * rng.standard_normal(5)
        return self._centroids[label]

    def scores(self, crop, labels):
        feat = tv.crop_features(crop)
        out = {}
        for lab in labels:
            c = self.centroid(lab)
            dims = slice(None) if len(lab.split()) > 1 else slice(0, 2)
            out[lab] = -float(np.linalg.norm(feat[dims] - c[dims]))
        return out

    def classify(self, crop, labels):
        s = self.scores(crop, labels)
        return max(labels, key=lambda lab: s[lab])


class ToySegmenter:
    """Text-prompted instance masks: raw color pixels of each matching component."""

    def segment(self, frame, label_class):
        return [r.raw_mask for r in tv.detect_regions(frame, shapes={label_class})]


class ToyFaceDetector:
    """Finds the seeded face template by normalized cross-correlation."""

    def __init__(self, template_seed=7, threshold=0.9):
        self.template = tv.face_template(template_seed)
        self.threshold = threshold

    def detect(self, crop):
        th, tw = self.template.shape
        return [(x, y, x + tw, y + th) for y, x in tv.match_template(tv.luminance(crop), self.template, self.threshold)]


@dataclass
class BackendSuite:
    captioner: object = field(default_factory=ToyCaptioner)
    detector: object = field(default_factory=ToyDetector)
    classifier: object = field(default_factory=ToyClassifier)
    segmenter: object = field(default_factory=ToySegmenter)
    face_detector: object = field(default_factory=ToyFaceDetector)


# -- pipeline ------------------------------------------------------------------------


@dataclass
class CurateConfig:
    scene_cut_threshold: float = 0.3
    min_flow: float = 2e-4
    min_contrast: float = 0.025
    frame_fraction: float = 0.10
    iou_threshold: float = 0.5
    box_lo: float = 0.10
    box_hi: float = 0.90
    mask_lo: float = 0.10
    mask_hi: float = 0.90
    max_components: int = 3


@dataclass
class Entity:
    label: str
    frame_index: int
    box: tuple
    crop: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)


@dataclass
class CurationRecord:
    video_id: str
    n_frames: int
    caption: str = ""
    nouns: list = field(default_factory=list)
    stage_status: dict = field(default_factory=dict)
    reject_reason: str = "none"
    entities: list = field(default_factory=list)
    dropped_entities: dict = field(default_factory=dict)
    error: str = ""

    @property
    def accepted(self):
        return self.reject_reason == "none" and bool(self.entities) and not self.error

    def to_json(self):
        d = {
            "video_id": self.video_id,
            "n_frames": self.n_frames,
            "caption": self.caption,
            "nouns": [list(n) for n in self.nouns],
            "stage_status": self.stage_status,
            "reject_reason": self.reject_reason,
            "accepted": self.accepted,
            "entities": [{"label": e.label, "frame_index": e.frame_index, "box": list(e.box)} for e in self.entities],
            "dropped_entities": self.dropped_entities,
        }
        if self.error:
            d["error"] = self.error
        return d


def _call(stage, fn, *args):
    try:
        return fn(*args)
    except (BackendError, ValidationError):
        raise
    except Exception as exc:
        raise BackendError(str(exc), context=stage) from exc


def _reject(rec, reason, stage):
    rec.reject_reason = reason
    rec.stage_status[stage] = "fail"
    return rec


def run_pipeline(video, suite=None, taxonomy=None, config=None, video_id="video"):
    """Curate one video; the first failing gate sets ``reject_reason``."""
    suite = suite or BackendSuite()
    taxonomy = taxonomy or Taxonomy(DEFAULT_TAXONOMY)
    cfg = config or CurateConfig()
    frames = check_video(video)
    n, h, w, _ = frames.shape
    if n < 2:
        raise TooFewFramesError("curation needs at least 2 frames")
    rec = CurationRecord(video_id=video_id, n_frames=n)

    if not scene_cut_gate(frames, cfg.scene_cut_threshold):
        return _reject(rec, "scene_cut", "stage1")
    if not flow_gate(frames, cfg.min_flow):
        return _reject(rec, "low_flow", "stage1")
    if not contrast_gate(frames, cfg.min_contrast):
        return _reject(rec, "low_contrast", "stage1")

    rec.caption = _call("caption", suite.captioner.caption, frames)
    rec.nouns = extract_nouns(rec.caption, taxonomy)
    if not rec.nouns:
        return _reject(rec, "no_nouns", "stage1")
    classes = [c for _, c in rec.nouns]
    vocab = [c for c in taxonomy.classes if suite.classifier.supports(c)]

    picks = sample_frames(n, cfg.frame_fraction)
    best = {}  # class -> {frame: best surviving stage-1 score}
    for fi in picks:
        boxes = _call("detect", suite.detector.detect, frames[fi], classes)
        boxes = nms(boxes, cfg.iou_threshold)
        boxes = area_gate(boxes, (h, w), cfg.box_lo, cfg.box_hi)
        for b in boxes:
            crop = frames[fi][b.slices()]
            if b.label in vocab and _call("classify", consistency_gate, suite.classifier, crop, b.label, vocab):
                per = best.setdefault(b.label, {})
                per[fi] = max(per.get(fi, 0.0), b.score)
    if not best:
        return _reject(rec, "all_boxes_eliminated", "stage1")
    rec.stage_status["stage1"] = "pass"

    for cls in [c for c in classes if c in best]:
        reason, candidates = None, []
        for fi in picks:
            masks = _call("segment", suite.segmenter.segment, frames[fi], cls)
            if not masks:
                reason = reason or "bad_mask"
            for m in masks:
                if not mask_gate(m, (h, w), cfg.mask_lo, cfg.mask_hi, cfg.max_components):
                    reason = reason or "bad_mask"
                    continue
                x0, y0, x1, y1 = tv.mask_bbox(m)
                box = Box(x0, y0, x1, y1, best[cls].get(fi, 0.0), cls)
                crop = frames[fi][box.slices()]
                if not _call("classify", consistency_gate, suite.classifier, crop, cls, vocab):
                    reason = reason or "all_boxes_eliminated"
                    continue
                if not _call("face", face_gate, suite.face_detector, crop, cls):
                    reason = reason or "face_missing"
                    continue
                candidates.append((-box.score, fi, Entity(cls, fi, (x0, y0, x1, y1), crop.copy(), m.copy())))
        if candidates:
            rec.entities.append(min(candidates, key=lambda c: c[:2])[2])
        else:
            rec.dropped_entities[cls] = reason or "bad_mask"
    if not rec.entities:
        return _reject(rec, next(iter(rec.dropped_entities.values())), "stage2")
    rec.stage_status["stage2"] = "pass"
    return rec


def success_rate(records, ground_truth):
    """Share of accepted videos whose entity label set equals the ground truth exactly."""
    ids = [r.video_id for r in records]
    missing = [i for i in ids if i not in ground_truth]
    if missing:
        raise AlignmentError(f"no ground truth for {missing}")
    accepted = [r for r in records if r.accepted]
    if not accepted:
        return 0.0
    ok = sum({e.label for e in r.entities} == set(ground_truth[r.video_id]) for r in accepted)
    return ok / len(accepted)


def summarize(records, ground_truth=None):
    rejected = {}
    for r in records:
        if not r.accepted:
            key = r.reject_reason if not r.error else "error"
            rejected[key] = rejected.get(key, 0) + 1
    out = {"total": len(records), "accepted": sum(r.accepted for r in records), "rejected_by_reason": rejected}
    if ground_truth is not None:
        scored = [r for r in records if r.video_id in ground_truth]
        out["success_rate"] = success_rate(scored, ground_truth)
    return out


def record_json_line(record):
    return json.dumps(record.to_json(), sort_keys=True)
