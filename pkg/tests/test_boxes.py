"""Rotated-box overlap against a rasterization oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import random_box, raster_iou_3d, raster_iou_bev

from unibev.boxes import (Box3D, DetectionSet, bev_corners, convex_clip, pairwise_iou, polygon_area,
                          rotated_iou_3d, rotated_iou_bev, wrap_angle)


def test_unit_squares_half_offset():
    a = np.array([0, 0, 0, 1, 1, 1, 0.0])
    b = np.array([0.5, 0, 0, 1, 1, 1, 0.0])
    assert rotated_iou_bev(a, b) == pytest.approx(1 / 3, abs=1e-12)
    assert rotated_iou_3d(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_identical_and_disjoint():
    a = np.array([1, 2, 0, 4, 2, 1.5, 0.3])
    assert rotated_iou_bev(a, a) == pytest.approx(1.0, abs=1e-12)
    far = a.copy()
    far[0] += 20
    assert rotated_iou_bev(a, far) == 0.0
    lifted = a.copy()
    lifted[2] += 5
    assert rotated_iou_3d(a, lifted) == 0.0 and rotated_iou_bev(a, lifted) == pytest.approx(1.0)


def test_rotation_by_pi_is_same_footprint():
    a = np.array([0, 0, 0, 3, 1, 1, 0.4])
    b = a.copy()
    b[6] += math.pi
    assert rotated_iou_bev(a, b) == pytest.approx(1.0, abs=1e-12)


def test_cross_shape():
    # a 4x1 bar and the same bar turned 90 degrees overlap in a 1x1 square
    a = np.array([0, 0, 0, 4, 1, 1, 0.0])
    b = np.array([0, 0, 0, 4, 1, 1, math.pi / 2])
    assert rotated_iou_bev(a, b) == pytest.approx(1 / 7, abs=1e-12)


def test_matches_raster_oracle_500_pairs():
    rng = np.random.default_rng(0)
    errs_bev, errs_3d, overlapping = [], [], 0
    for _ in range(500):
        a, b = random_box(rng, 1.5), random_box(rng, 1.5)
        ref = raster_iou_bev(a, b)
        overlapping += ref > 0
        errs_bev.append(abs(rotated_iou_bev(a, b) - ref))
        errs_3d.append(abs(rotated_iou_3d(a, b) - raster_iou_3d(a, b)))
    assert overlapping > 250
    assert max(errs_bev) < 1e-3 and max(errs_3d) < 1e-3


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    for fn in (rotated_iou_bev, rotated_iou_3d):
        v = fn(a, b)
        assert v == fn(b, a)
        assert 0.0 <= v <= 1.0 + 1e-12


def test_convex_clip_and_area():
    sq = bev_corners([0, 0, 0, 2, 2, 1, 0])
    assert polygon_area(sq) == pytest.approx(4.0)
    inner = bev_corners([0.5, 0.5, 0, 2, 2, 1, 0])
    assert polygon_area(convex_clip(sq, inner)) == pytest.approx(2.25)


def test_pairwise_matches_scalar():
    rng = np.random.default_rng(3)
    A = np.stack([random_box(rng, 1) for _ in range(6)])
    B = np.stack([random_box(rng, 1) for _ in range(4)])
    m = pairwise_iou(A, B, "3d")
    assert m.shape == (6, 4)
    for i in range(6):
        for j in range(4):
            assert m[i, j] == rotated_iou_3d(A[i], B[j])


def test_wrap_angle():
    a = np.array([-math.pi, math.pi, 3 * math.pi, -0.5, 7.0])
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    np.testing.assert_allclose(np.cos(w), np.cos(a), atol=1e-12)


def test_box_validation():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1), 0.0, 0)
    with pytest.raises(ValueError):
        Box3D((0, float("nan"), 0), (1, 1, 1), 0.0, 0)
    with pytest.raises(ValueError):
        DetectionSet(np.zeros((2, 7)), [0], None)


def test_detection_set_roundtrip():
    boxes = [Box3D((1, 2, 0), (4, 2, 1.5), 0.2, 0, 0.9), Box3D((5, -1, 0), (1, 1, 2), -1.0, 2, 0.4)]
    ds = DetectionSet.from_boxes(boxes, "f")
    assert ds.to_boxes() == boxes
    assert len(ds.subset(ds.scores > 0.5)) == 1
