import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptmaster import toydata as td
from conceptmaster import toyvision as tv
from conceptmaster.errors import RangeError


def test_gen_scene_deterministic():
    assert td.gen_scene(5, 3) == td.gen_scene(5, 3)
    assert td.gen_scene(5, 3) != td.gen_scene(6, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_scene_concepts_distinct_inside_and_separated(seed, k):
    spec = td.gen_scene(seed, k)
    assert len({(c.shape, c.color) for c in spec.concepts}) == k
    for f in range(spec.n_frames):
        boxes = [b for _, b in td.oracle_locate(spec, f)]
        for x0, y0, x1, y1 in boxes:
            assert x0 >= 0 and y0 >= 0 and x1 <= spec.width and y1 <= spec.height
        for i in range(k):
            for j in range(i + 1, k):
                a, b = boxes[i], boxes[j]
                gap = max(b[0] - a[2], a[0] - b[2], b[1] - a[3], a[1] - b[3])
                assert gap >= td.MIN_GAP


def test_gen_scene_errors():
    with pytest.raises(RangeError):
        td.gen_scene(0, 5)
    with pytest.raises(RangeError):
        td.gen_scene(0, 2, concepts=[("circle", "red"), ("circle", "red")])


def test_render_video_range_and_colors():
    spec = td.gen_scene(3, 2)
    v = td.render_video(spec)
    assert v.shape == (8, 32, 32, 3)
    assert v.min() >= 0 and v.max() <= 1
    for c in spec.concepts:
        m = td.shape_mask(c.shape, c.trajectory.position(0), c.size, 32, 32)
        assert np.allclose(v[0][m], tv.COLORS[c.color])


def test_reference_and_caption():
    spec = td.gen_scene(3, 3)
    img, label = td.render_reference(spec.concepts[0])
    assert img.shape == (32, 32, 3) and label == spec.concepts[0].label
    cap = td.caption(spec)
    for c in spec.concepts:
        assert c.label in cap
    assert " and " in cap


def test_trajectory_motion_names():
    assert td.Trajectory("linear", (0, 0), (-1, 0)).motion == "left"
    assert td.Trajectory("linear", (0, 0), (0, 2)).motion == "down"
    assert td.Trajectory("sinusoidal", (0, 0), (0, 0), 2, 8).motion == "bob"
    assert td.Trajectory("linear", (0, 0)).motion == "still"


def test_json_and_directory_roundtrip(tmp_path):
    spec = td.gen_scene(9, 2)
    assert td.SceneSpec.from_json(spec.to_json()) == spec
    td.write_scene_dir(tmp_path / "s", spec)
    loaded = td.read_scene_dir(tmp_path / "s")
    assert loaded["spec"] == spec
    assert np.allclose(loaded["video"], td.render_video(spec), atol=1e-7)
    assert [lab for _, lab in loaded["refs"]] == [c.label for c in spec.concepts]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_detector_recovers_rendered_concepts(seed):
    spec = td.gen_scene(seed, 2)
    frame = td.render_video(spec)[0]
    found = sorted(r.label for r in tv.detect_regions(frame, shapes=tv.SHAPES))
    assert found == sorted(c.label for c in spec.concepts)


def test_oracle_boxes_match_masks():
    spec = td.gen_scene(4, 2)
    for i, (x0, y0, x1, y1) in td.oracle_locate(spec, 2):
        c = spec.concepts[i]
        m = td.shape_mask(c.shape, c.trajectory.position(2), c.size, 32, 32)
        bx = tv.mask_bbox(m)
        assert x0 <= bx[0] and y0 <= bx[1] and bx[2] <= x1 and bx[3] <= y1


def test_shape_classifier_on_references():
    for shape in tv.SHAPES:
        img, _ = td.render_reference(td.ConceptSpec(shape, "blue", 10, td.Trajectory("linear", (0, 0))))
        regions = tv.detect_regions(img)
        assert [r.shape for r in regions] == [shape]


def test_face_template_and_match():
    t = tv.face_template()
    assert t.shape == (6, 6) and t.sum() == 18
    gray = np.full((12, 12), 0.5)
    gray[3:9, 2:8] = t
    assert (3, 2) in tv.match_template(gray, t)
    assert tv.match_template(np.full((12, 12), 0.5), t) == []
    assert tv.match_template(np.zeros((3, 3)), t) == []


def test_components_and_bbox():
    m = np.zeros((6, 6), dtype=bool)
    m[0, 0] = m[3, 3] = m[3, 4] = True
    assert tv.count_components(m) == 2
    assert tv.mask_bbox(m) == (0, 0, 5, 4)
    assert tv.mask_bbox(np.zeros((3, 3), dtype=bool)) is None
