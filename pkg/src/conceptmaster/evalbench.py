"""Three-axis benchmark for generated multi-concept videos.

Concept fidelity (whole-video similarity and caption coverage), decoupling
ability (per-region similarity against the assigned reference and the rate
of attribute mixing between references), and video-quality proxies.
"""

import json
import re
from dataclasses import dataclass, field

import numpy as np

from . import toyvision as tv
from .errors import BackendError, EmptyError, NoRegionsError, TooFewFramesError, ValidationError
from .validation import check_video

SCENARIOS = (
    "multi-person", "person+living", "person+stuff", "multi-living", "living+stuff", "person+living+stuff",
)
# toy stand-ins for the benchmark's entity categories, keyed by color family so
# every scenario admits concepts with pairwise distinct shapes and colors
CATEGORY = {
    "red": "person", "orange": "person", "yellow": "person",
    "green": "living", "cyan": "living", "blue": "living",
    "magenta": "stuff", "purple": "stuff",
}
SCENARIO_CATEGORIES = {
    "multi-person": ("person", "person"),
    "person+living": ("person", "living"),
    "person+stuff": ("person", "stuff"),
    "multi-living": ("living", "living"),
    "living+stuff": ("living", "stuff"),
    "person+living+stuff": ("person", "living", "stuff"),
}

METRICS = (
    ("fidelity", "clipT_proxy"),
    ("fidelity", "clipI_proxy"),
    ("decoupling", "clipT_proxy"),
    ("decoupling", "clipI_proxy"),
    ("decoupling", "dinoI_proxy"),
    ("decoupling", "mixing_rate"),
    ("quality", "motion_smoothness"),
    ("quality", "dynamic_degree"),
)

_PAIR = re.compile(r"\b(" + "|".join(tv.COLOR_NAMES) + r")\s+(" + "|".join(tv.SHAPES) + r")\b")


def parse_label(label):
    m = _PAIR.search(label.lower())
    if not m:
        raise ValidationError(f"{label!r} is not a '<color> <shape>' label")
    return m.group(1), m.group(2)


def caption_pairs(caption):
    return list(dict.fromkeys(_PAIR.findall(caption.lower())))


def infer_scenario(labels):
    cats = [CATEGORY[parse_label(lab)[0]] for lab in labels]
    p, liv, s = cats.count("person"), cats.count("living"), cats.count("stuff")
    if p and liv and s:
        return "person+living+stuff"
    if p and liv:
        return "person+living"
    if p and s:
        return "person+stuff"
    if liv and s:
        return "living+stuff"
    if p >= 2:
        return "multi-person"
    if liv >= 2:
        return "multi-living"
    return "other"


# -- embedders ---------------------------------------------------------------------


class _ProjectedEmbedder:
    """Hand-built features through a fixed seeded projection, L2-normalized."""

    thread_safe = True
    out_dim = 64

    def __init__(self, seed):
        self.seed = seed
        self._proj = None

    def features(self, image):
        raise NotImplementedError

    def __call__(self, image):
        return self.embed(image)

    def embed(self, image):
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
            raise BackendError(f"cannot embed array of shape {image.shape}")
        feats = self.features(np.clip(image, 0.0, 1.0))
        if self._proj is None:
            rng = np.random.default_rng(self.seed)
            self._proj = rng.standard_normal((len(feats), self.out_dim)) / np.sqrt(len(feats))
        v = feats @ self._proj
        return v / np.linalg.norm(v)


SHAPE_WEIGHT = 3.0


def _shape_moments(image):
    return SHAPE_WEIGHT * tv.crop_features(image)[:2]


class ToyClipEmbedder(_ProjectedEmbedder):
    """Joint 4x4x4 color histogram of the foreground plus shape moments of the dominant blob."""

    def __init__(self, seed=21):
        super().__init__(seed)

    def features(self, image):
        pix = image[tv.foreground(image)]
        if len(pix) == 0:
            pix = image.reshape(-1, 3)
        q = np.minimum((pix * 4).astype(int), 3)
        hist = np.bincount(q[:, 0] * 16 + q[:, 1] * 4 + q[:, 2], minlength=64) / len(q)
        return np.concatenate([hist, _shape_moments(image), [1.0]])


class ToyDinoEmbedder(_ProjectedEmbedder):
    """2x2 grid of mean colors and edge energy plus the named-color mix of the foreground."""

    def __init__(self, seed=22):
        super().__init__(seed)

    def features(self, image):
        h, w, _ = image.shape
        lum = tv.luminance(image)
        gy, gx = np.gradient(lum) if min(h, w) > 1 else (np.zeros_like(lum), np.zeros_like(lum))
        edge = np.hypot(gx, gy)
        cells = []
        for ys in (slice(0, max(h // 2, 1)), slice(h // 2, h)):
            for xs in (slice(0, max(w // 2, 1)), slice(w // 2, w)):
                block = image[ys, xs]
                if block.size == 0:
                    block = image
                cells.append(np.concatenate([block.reshape(-1, 3).mean(0), [edge[ys, xs].mean() if edge[ys, xs].size else 0.0]]))
        idx = tv.classify_pixels(image)
        fg = idx[idx >= 0]
        mix = np.bincount(fg, minlength=len(tv.COLOR_NAMES)) / max(len(fg), 1)
        return np.concatenate([np.concatenate(cells), mix, _shape_moments(image), [1.0]])


def bench_concepts(rng, scenario):
    """(shape, color) pairs for a scenario: distinct shapes, distinct colors from the right families."""
    cats = SCENARIO_CATEGORIES[scenario]
    shapes = [tv.SHAPES[i] for i in rng.permutation(len(tv.SHAPES))[: len(cats)]]
    colors = []
    for cat in cats:
        pool = [c for c in tv.COLOR_NAMES if CATEGORY[c] == cat and c not in colors]
        colors.append(pool[int(rng.integers(len(pool)))])
    return list(zip(shapes, colors))


def embed(embedder, image):
    return embedder.embed(image)


def cosine(a, b):
    return float(np.clip(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


# -- detection ---------------------------------------------------------------------


class ToyAttributeDetector:
    """Color-threshold components classified into shapes; queried by labels.

    A region is reported when its shape or its color appears in any query
    label, mimicking an open-vocabulary detector that fires on partial
    matches. Regions keep their true attributes.
    """

    def __init__(self, tol=0.3, min_area=12):
        self.tol, self.min_area = tol, min_area

    def detect(self, frame, labels=None):
        regions = tv.detect_regions(np.clip(frame, 0.0, 1.0), tol=self.tol, min_area=self.min_area, shapes=tv.SHAPES)
        if labels is None:
            return regions
        pairs = [parse_label(lab) for lab in labels]
        colors, shapes = {c for c, _ in pairs}, {s for _, s in pairs}
        return [r for r in regions if r.color in colors or r.shape in shapes]


def detect_regions(detector, video, labels=None):
    video = check_video(np.clip(video, 0.0, 1.0))
    return [detector.detect(frame, labels) for frame in video]


def _crop(frame, box):
    x0, y0, x1, y1 = box
    return frame[y0:y1, x0:x1]


# -- metrics -----------------------------------------------------------------------


def _as_pair(ref):
    if hasattr(ref, "image"):
        return np.asarray(ref.image, dtype=np.float64), ref.label
    img, lab = ref
    return np.asarray(img, dtype=np.float64), lab


@dataclass
class EvalCase:
    case_id: str
    refs: list  # [(image, label)]
    caption: str
    generated: np.ndarray = field(repr=False)
    scenario: str = ""

    def __post_init__(self):
        if not self.refs:
            raise ValidationError("an eval case needs at least one reference")
        self.refs = [_as_pair(r) for r in self.refs]
        if not self.scenario:
            self.scenario = infer_scenario([lab for _, lab in self.refs])

    @property
    def labels(self):
        return [lab for _, lab in self.refs]


def global_fidelity(case, embedder, detector=None):
    """(clipI_proxy, clipT_proxy): frame-vs-reference similarity and caption pair coverage."""
    detector = detector or ToyAttributeDetector()
    video = np.clip(case.generated, 0.0, 1.0)
    ref_vecs = [embedder.embed(img) for img, _ in case.refs]
    clip_i = float(np.mean([max(cosine(embedder.embed(f), r) for r in ref_vecs) for f in video]))
    wanted = caption_pairs(case.caption) or [parse_label(lab) for lab in case.labels]
    found = {(r.color, r.shape) for regions in detect_regions(detector, video) for r in regions}
    clip_t = sum(p in found for p in wanted) / len(wanted)
    return clip_i, clip_t


def assign_regions(regions, frame, refs, embedder):
    """Greedy one-to-one matching of regions to refs by embedding similarity."""
    if not regions:
        return []
    ref_vecs = [embedder.embed(img) for img, _ in refs]
    reg_vecs = [embedder.embed(_crop(frame, r.box)) for r in regions]
    pairs = sorted(
        ((cosine(rv, fv), ri, fi) for ri, rv in enumerate(reg_vecs) for fi, fv in enumerate(ref_vecs)),
        key=lambda p: (-p[0], p[1], p[2]),
    )
    used_r, used_f, out = set(), set(), []
    for sim, ri, fi in pairs:
        if ri in used_r or fi in used_f:
            continue
        used_r.add(ri)
        used_f.add(fi)
        out.append((regions[ri], fi))
    return out


def is_mixed(region, ref_index, ref_pairs):
    """Region attributes are all drawn from the references, but not from its own one alone."""
    if (region.color, region.shape) == ref_pairs[ref_index]:
        return False
    colors = {c for c, _ in ref_pairs}
    shapes = {s for _, s in ref_pairs}
    return region.color in colors and region.shape in shapes


@dataclass
class DecouplingScores:
    clipT_proxy: float
    clipI_proxy: float
    dinoI_proxy: float
    mixing_rate: float
    n_regions: int
    no_regions: bool = False


def decoupling_scores(case, detector=None, clip_embedder=None, dino_embedder=None, strict=False):
    """Region-level scores after assigning detections to references.

    With no assignable region the similarity scores are 0, the mixing rate
    is 0 and ``no_regions`` is set (``strict`` raises instead).
    """
    detector = detector or ToyAttributeDetector()
    clip_embedder = clip_embedder or ToyClipEmbedder()
    dino_embedder = dino_embedder or ToyDinoEmbedder()
    video = np.clip(case.generated, 0.0, 1.0)
    ref_pairs = [parse_label(lab) for lab in case.labels]
    clip_ref = [clip_embedder.embed(img) for img, _ in case.refs]
    dino_ref = [dino_embedder.embed(img) for img, _ in case.refs]
    t_hits, ci, di, mixed = [], [], [], []
    for frame, regions in zip(video, detect_regions(detector, video, case.labels)):
        for region, fi in assign_regions(regions, frame, case.refs, clip_embedder):
            crop = _crop(frame, region.box)
            t_hits.append((region.color, region.shape) == ref_pairs[fi])
            ci.append(cosine(clip_embedder.embed(crop), clip_ref[fi]))
            di.append(cosine(dino_embedder.embed(crop), dino_ref[fi]))
            mixed.append(is_mixed(region, fi, ref_pairs))
    if not t_hits:
        if strict:
            raise NoRegionsError(f"no regions assigned in case {case.case_id!r}")
        return DecouplingScores(0.0, 0.0, 0.0, 0.0, 0, no_regions=True)
    return DecouplingScores(
        float(np.mean(t_hits)), float(np.mean(ci)), float(np.mean(di)), float(np.mean(mixed)), len(t_hits)
    )


def quality_proxies(video):
    """(motion_smoothness, dynamic_degree) from first and second temporal differences."""
    video = check_video(np.clip(video, 0.0, 1.0), min_frames=3)
    dynamic = float(np.abs(np.diff(video, axis=0)).mean())
    second = np.abs(video[2:] - 2 * video[1:-1] + video[:-2]).mean()
    # |a - 2b + c| <= 2 for values in [0, 1]
    smooth = float(np.clip(1.0 - second / 2.0, 0.0, 1.0))
    return smooth, dynamic


def evaluate_case(case, detector=None, clip_embedder=None, dino_embedder=None):
    detector = detector or ToyAttributeDetector()
    clip_embedder = clip_embedder or ToyClipEmbedder()
    dino_embedder = dino_embedder or ToyDinoEmbedder()
    clip_i, clip_t = global_fidelity(case, clip_embedder, detector)
    dec = decoupling_scores(case, detector, clip_embedder, dino_embedder)
    if len(case.generated) >= 3:
        smooth, dynamic = quality_proxies(case.generated)
    else:
        raise TooFewFramesError("quality proxies need at least 3 frames")
    return {
        "case_id": case.case_id,
        "scenario": case.scenario,
        "fidelity": {"clipT_proxy": clip_t, "clipI_proxy": clip_i},
        "decoupling": {
            "clipT_proxy": dec.clipT_proxy,
            "clipI_proxy": dec.clipI_proxy,
            "dinoI_proxy": dec.dinoI_proxy,
            "mixing_rate": dec.mixing_rate,
        },
        "quality": {"motion_smoothness": smooth, "dynamic_degree": dynamic},
        "flags": ["no_regions"] if dec.no_regions else [],
    }


def _mean_report(reports):
    out = {}
    for axis, name in METRICS:
        out.setdefault(axis, {})[name] = float(np.mean([r[axis][name] for r in reports]))
    out["n_cases"] = len(reports)
    return out


def aggregate(reports):
    """Per-scenario and overall means over case reports."""
    reports = list(reports)
    if not reports:
        raise EmptyError("nothing to aggregate")
    by = {}
    for r in reports:
        by.setdefault(r["scenario"], []).append(r)
    return {
        "overall": _mean_report(reports),
        "scenarios": {s: _mean_report(rs) for s, rs in sorted(by.items())},
    }


def format_table(summary):
    """Aligned text table, columns grouped as fidelity | decoupling | quality."""
    header1 = ["", "Concept Fidelity", "", "Decoupling Ability", "", "", "", "Video Quality", ""]
    header2 = ["Scenario", "CLIP-T", "CLIP-I", "CLIP-T", "CLIP-I", "DINO-I", "Mixing", "Smooth", "Dynamic"]
    rows = []
    for name, rep in list(summary["scenarios"].items()) + [("overall", summary["overall"])]:
        rows.append([name] + [f"{rep[a][m]:.4f}" for a, m in METRICS])
    table = [header1, header2] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header2))]

    def fmt(r):
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        return " | ".join([cells[0], " ".join(cells[1:3]), " ".join(cells[3:7]), " ".join(cells[7:])])

    return "\n".join(fmt(r) for r in table) + "\n"


def report_json(summary, cases):
    return json.dumps({"summary": summary, "cases": cases}, indent=2, sort_keys=True) + "\n"
