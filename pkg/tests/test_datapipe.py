import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmaster import corpus
from conceptmaster import datapipe as dp
from conceptmaster import toydata as td
from conceptmaster.errors import AlignmentError, BackendError, ShapeError, ValidationError


def nms_oracle(boxes, thr):
    """Suppress-forward formulation over a precomputed IoU matrix."""
    n = len(boxes)
    if n == 0:
        return []
    xy = np.array([[b.x0, b.y0, b.x1, b.y1] for b in boxes], dtype=np.float64)
    ix = np.clip(np.minimum(xy[:, None, 2], xy[None, :, 2]) - np.maximum(xy[:, None, 0], xy[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(xy[:, None, 3], xy[None, :, 3]) - np.maximum(xy[:, None, 1], xy[None, :, 1]), 0, None)
    inter = ix * iy
    area = (xy[:, 2] - xy[:, 0]) * (xy[:, 3] - xy[:, 1])
    union = area[:, None] + area[None, :] - inter
    ious = np.where(inter > 0, inter / union, 0.0)
    scores = np.array([b.score for b in boxes])
    order = np.lexsort((np.arange(n), xy[:, 1], xy[:, 0], -scores))
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in order:
        if not alive[i]:
            continue
        keep.append(i)
        alive &= ~(ious[i] > thr)
    return [boxes[i] for i in keep]


def random_boxes(rng, n):
    out = []
    for _ in range(n):
        x0, y0 = rng.integers(0, 40, 2)
        w, h = rng.integers(1, 20, 2)
        out.append(dp.Box(float(x0), float(y0), float(x0 + w), float(y0 + h), float(rng.integers(0, 5) / 4)))
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 30), st.sampled_from([0.0, 0.3, 0.5, 0.7, 1.0]))
def test_nms_matches_oracle(seed, n, thr):
    boxes = random_boxes(np.random.default_rng(seed), n)
    assert dp.nms(boxes, thr) == nms_oracle(boxes, thr)


def test_nms_examples():
    a = dp.Box(0, 0, 10, 10, 0.9)
    b = dp.Box(1, 1, 11, 11, 0.8)
    c = dp.Box(30, 30, 40, 40, 0.5)
    assert dp.nms([b, a, c], 0.5) == [a, c]
    assert dp.nms([a, a], 0.5) == [a]
    assert dp.nms([], 0.5) == []


def test_iou_and_box():
    a, b = dp.Box(0, 0, 2, 2), dp.Box(1, 1, 3, 3)
    assert dp.iou(a, b) == pytest.approx(1 / 7)
    assert dp.iou(a, dp.Box(5, 5, 6, 6)) == 0.0
    with pytest.raises(ValidationError):
        dp.Box(1, 1, 1, 2)


def test_stage1_gate_examples():
    still = np.full((4, 8, 8, 3), 0.5)
    assert dp.scene_cut_gate(still)
    assert not dp.flow_gate(still)
    assert not dp.contrast_gate(still)
    cut = np.concatenate([np.zeros((2, 8, 8, 3)), np.ones((2, 8, 8, 3))])
    assert not dp.scene_cut_gate(cut)
    moving = td.render_video(td.gen_scene(1, 2))
    assert dp.scene_cut_gate(moving) and dp.flow_gate(moving) and dp.contrast_gate(moving)


def test_taxonomy_and_nouns():
    tax = dp.Taxonomy(dp.DEFAULT_TAXONOMY)
    assert dp.extract_nouns("A beagle chases a ball", tax) == [("beagle", "dog"), ("ball", "ball")]
    assert dp.extract_nouns("a puppy and a dog", tax) == [("puppy", "dog")]
    assert dp.extract_nouns("nothing here", tax) == []
    with pytest.raises(ValidationError):
        dp.extract_nouns("  ", tax)
    with pytest.raises(ValidationError):
        dp.Taxonomy({"a": ["x"], "b": ["x"]})


def test_sample_frames():
    assert dp.sample_frames(20, 0.1) == [0, 10]
    assert dp.sample_frames(3, 0.1) == [0]
    assert dp.sample_frames(10, 1.0) == list(range(10))
    with pytest.raises(ValidationError):
        dp.sample_frames(0)


def test_area_and_mask_gates():
    boxes = [dp.Box(0, 0, 2, 2), dp.Box(0, 0, 5, 5), dp.Box(0, 0, 10, 10)]
    assert dp.area_gate(boxes, (10, 10)) == [boxes[1]]
    m = np.zeros((10, 10), dtype=bool)
    m[2:6, 2:6] = True
    assert dp.mask_gate(m, (10, 10))
    stripes = np.zeros((10, 10), dtype=bool)
    stripes[::2, :] = True
    assert not dp.mask_gate(stripes, (10, 10))
    with pytest.raises(ShapeError):
        dp.mask_gate(m, (5, 5))


def test_face_gate_only_for_person():
    fd = dp.ToyFaceDetector()
    blank = np.full((32, 16, 3), 0.5)
    assert dp.face_gate(fd, blank, "dog")
    assert not dp.face_gate(fd, blank, "person")
    frame = np.full((40, 40, 3), 0.5)
    dp.render_person(frame, (20, 20), dp.PERSON_WIDTH, "purple")
    assert dp.face_gate(fd, frame, "person")


def test_classifier_consistency():
    clf = dp.ToyClassifier()
    img, _ = td.render_reference(td.ConceptSpec("triangle", "red", 20, td.Trajectory("linear", (0, 0))))
    assert clf.classify(img, ["circle", "square", "triangle"]) == "triangle"
    assert dp.consistency_gate(clf, img, "triangle", ["circle", "triangle"])
    with pytest.raises(ValidationError):
        dp.consistency_gate(clf, img, "dog", ["circle"])
    with pytest.raises(BackendError):
        clf.centroid("dog")


def test_planted_corpus_reasons():
    videos = corpus.planted_corpus()
    for cv in videos:
        rec = dp.run_pipeline(corpus.render(cv), video_id=cv.video_id)
        assert rec.reject_reason == cv.expected_reason, cv.video_id
        assert rec.accepted == (cv.flaw == "")


def test_success_rate_and_summary():
    r1 = dp.CurationRecord("a", 4, entities=[dp.Entity("circle", 0, (0, 0, 1, 1), None, None)])
    r2 = dp.CurationRecord("b", 4, entities=[dp.Entity("dog", 0, (0, 0, 1, 1), None, None)])
    r3 = dp.CurationRecord("c", 4, reject_reason="low_flow")
    gt = {"a": ["circle"], "b": ["cat"], "c": []}
    assert dp.success_rate([r1, r2, r3], gt) == 0.5
    assert dp.success_rate([r3], gt) == 0.0
    with pytest.raises(AlignmentError):
        dp.success_rate([r1], {})
    s = dp.summarize([r1, r2, r3], gt)
    assert s["total"] == 3 and s["accepted"] == 2 and s["rejected_by_reason"] == {"low_flow": 1}


def test_pipeline_static_gray_rejected_by_flow_first():
    rec = dp.run_pipeline(np.full((6, 16, 16, 3), 0.5))
    assert rec.reject_reason == "low_flow"


def test_pipeline_backend_failure_names_stage():
    class Broken:
        def caption(self, frames):
            raise RuntimeError("down")

    suite = dp.BackendSuite(captioner=Broken())
    with pytest.raises(BackendError) as info:
        dp.run_pipeline(td.render_video(td.gen_scene(0, 2)), suite)
    assert info.value.context == "caption"
