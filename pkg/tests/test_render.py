import xml.etree.ElementTree as ET

import numpy as np
import pytest

from m2d.errors import M2dError
from m2d.motion import MotionSequence
from m2d.parts import N_KEYPOINTS
from m2d.render import SKELETON_EDGES, SkeletonStyle, frame_filenames, render_sequence


def make_seq(L=10):
    rng = np.random.default_rng(0)
    frames = np.zeros((L, N_KEYPOINTS, 3))
    frames[:, :, :2] = rng.uniform(0, 500, size=(L, N_KEYPOINTS, 2))
    frames[:, :, 2] = 0.9
    return MotionSequence(frames, source_id="render-test")


def svg_circles(svg: str):
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    return root.findall(f"{ns}circle")


def test_edge_endpoints_in_range():
    assert all(0 <= a < 133 and 0 <= b < 133 for a, b in SKELETON_EDGES)
    assert len(SKELETON_EDGES) == len(set(map(tuple, SKELETON_EDGES)))


def test_frame_count_matches_stride():
    seq = make_seq(L=10)
    svgs, index = render_sequence(seq, stride=2)
    assert len(svgs) == 5
    assert frame_filenames(10, 2) == [f"frame_{i:05d}.svg" for i in (0, 2, 4, 6, 8)]
    svgs, _ = render_sequence(seq, stride=3)
    assert len(svgs) == 4  # ceil(10/3)


def test_every_document_parses_as_xml():
    svgs, index = render_sequence(make_seq(L=4), stride=1)
    for svg in svgs:
        ET.fromstring(svg)
    assert "<html>" in index
    assert index.count("<img") == 4


def test_low_confidence_style_rule():
    frames = np.zeros((1, N_KEYPOINTS, 3))
    frames[:, :, :2] = np.random.default_rng(1).uniform(0, 100, size=(1, N_KEYPOINTS, 2))
    frames[:, :, 2] = 0.9
    frames[0, 7, 2] = 0.1  # one low-confidence keypoint
    seq = MotionSequence(frames)
    svgs, _ = render_sequence(seq, stride=1)
    circles = svg_circles(svgs[0])
    assert len(circles) == N_KEYPOINTS
    low = circles[7]
    assert low.get("stroke-dasharray") is not None
    assert float(low.get("opacity")) < 1.0
    assert low.get("fill") == "none"
    solid = circles[8]
    assert solid.get("stroke-dasharray") is None
    assert solid.get("fill", "none") != "none"


def test_connected_low_conf_edge_is_dashed():
    frames = np.zeros((1, N_KEYPOINTS, 3))
    frames[:, :, :2] = 50.0
    frames[:, :, 2] = 0.9
    frames[0, 15, 2] = 0.05  # left ankle: its limb edges go dashed
    svgs, _ = render_sequence(MotionSequence(frames), stride=1)
    root = ET.fromstring(svgs[0])
    ns = "{http://www.w3.org/2000/svg}"
    lines = root.findall(f"{ns}line")
    assert len(lines) == len(SKELETON_EDGES)
    dashed = [l for l in lines if l.get("stroke-dasharray")]
    # ankle 15 participates in (15,13) and the three left-foot edges
    assert len(dashed) == sum(1 for a, b in SKELETON_EDGES if 15 in (a, b))


def test_bad_stride():
    with pytest.raises(M2dError, match="stride"):
        render_sequence(make_seq(2), stride=0)


def test_style_rejects_out_of_range_edges():
    with pytest.raises(M2dError, match="range"):
        SkeletonStyle(edges=((0, 133),))
