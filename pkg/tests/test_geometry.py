"""Tests for rotated-box geometry."""
import math

import numpy as np
import pytest

from densetok.errors import ShapeError
from densetok.geometry import (
    RotatedBox,
    box_inside_image,
    box_to_corners,
    clip_polygon,
    contains,
    flip_box,
    iou_matrix,
    normalize_angle,
    polygon_area,
    rotated_iou,
    rotated_nms,
    swap_extents,
)


def _monte_carlo_iou(a, b, rng, samples=400_000):
    corners = np.vstack([box_to_corners(a), box_to_corners(b)])
    (lo_x, lo_y), (hi_x, hi_y) = corners.min(axis=0), corners.max(axis=0)
    xs = rng.uniform(lo_x, hi_x, samples)
    ys = rng.uniform(lo_y, hi_y, samples)
    in_a, in_b = contains(a, xs, ys), contains(b, xs, ys)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


# ---------------------------------------------------------------------------
# Box tests
# ---------------------------------------------------------------------------

class TestBoxes:
    def test_angle_folded_into_half_open_range(self):
        assert RotatedBox(0, 0, 2, 1, math.pi / 2).theta == pytest.approx(-math.pi / 2)
        assert RotatedBox(0, 0, 2, 1, math.pi).theta == pytest.approx(0.0)
        assert RotatedBox(0, 0, 2, 1, -0.3).theta == -0.3

    def test_normalize_angle_idempotent(self):
        for theta in np.linspace(-7, 7, 41):
            once = normalize_angle(theta)
            assert -math.pi / 2 <= once < math.pi / 2
            assert normalize_angle(once) == once

    def test_non_positive_extent_rejected(self):
        with pytest.raises(ShapeError):
            RotatedBox(0, 0, 0.0, 1.0)

    def test_swap_extents_same_rectangle(self):
        box = RotatedBox(5, 5, 6, 2, 0.4)
        assert rotated_iou(box, swap_extents(box)) == pytest.approx(1.0, abs=1e-9)

    def test_corners_counter_clockwise(self):
        corners = box_to_corners(RotatedBox(0, 0, 4, 2, 0.0))
        np.testing.assert_allclose(corners, [[-2, -1], [2, -1], [2, 1], [-2, 1]])

    def test_polygon_area(self):
        assert polygon_area(box_to_corners(RotatedBox(3, 3, 4, 2, 0.7))) == pytest.approx(8.0)
        assert polygon_area(np.zeros((2, 2))) == 0.0

    def test_flip_horizontal(self):
        box = flip_box(RotatedBox(2.0, 5.0, 4, 2, 0.3), 16, 16, horizontal=True)
        assert (box.cx, box.cy, box.theta) == (13.0, 5.0, -0.3)

    def test_flip_vertical(self):
        box = flip_box(RotatedBox(2.0, 5.0, 4, 2, 0.3), 16, 16, horizontal=False)
        assert (box.cx, box.cy, box.theta) == (2.0, 10.0, -0.3)

    def test_box_inside_image(self):
        assert box_inside_image(RotatedBox(8, 8, 4, 2), 16, 16)
        assert not box_inside_image(RotatedBox(1, 8, 4, 2), 16, 16)


# ---------------------------------------------------------------------------
# IoU tests
# ---------------------------------------------------------------------------

class TestIoU:
    def test_identical(self):
        box = RotatedBox(4, 4, 3, 2, 0.5)
        assert rotated_iou(box, box) == pytest.approx(1.0, abs=1e-12)

    def test_axis_aligned_half_overlap(self):
        a = RotatedBox(0, 0, 2, 2)
        b = RotatedBox(1, 0, 2, 2)
        assert rotated_iou(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_axis_aligned_contained(self):
        assert rotated_iou(RotatedBox(0, 0, 4, 4), RotatedBox(0, 0, 2, 2)) == pytest.approx(
            0.25, abs=1e-12)

    def test_disjoint(self):
        assert rotated_iou(RotatedBox(0, 0, 2, 2), RotatedBox(10, 0, 2, 2)) == 0.0

    def test_touching_edges(self):
        assert rotated_iou(RotatedBox(0, 0, 2, 2), RotatedBox(2, 0, 2, 2)) == 0.0

    def test_cross_shape(self):
        # 4x1 bar and the same bar turned a quarter: overlap is the 1x1 center square
        a = RotatedBox(0, 0, 4, 1, 0.0)
        b = RotatedBox(0, 0, 4, 1, math.pi / 2 - 1e-15)
        assert rotated_iou(a, b) == pytest.approx(1.0 / 7.0, abs=1e-9)

    def test_symmetric(self, rng):
        for _ in range(20):
            a = RotatedBox(*rng.uniform(0, 4, 2), *rng.uniform(1, 4, 2), rng.uniform(-1.5, 1.5))
            b = RotatedBox(*rng.uniform(0, 4, 2), *rng.uniform(1, 4, 2), rng.uniform(-1.5, 1.5))
            assert rotated_iou(a, b) == pytest.approx(rotated_iou(b, a), abs=1e-12)

    def test_rotation_about_common_point(self, rng):
        def rotated(box, phi, px, py):
            c, s = math.cos(phi), math.sin(phi)
            dx, dy = box.cx - px, box.cy - py
            return RotatedBox(px + c * dx - s * dy, py + s * dx + c * dy, box.w, box.h,
                              box.theta + phi)

        for _ in range(20):
            a = RotatedBox(*rng.uniform(0, 4, 2), *rng.uniform(1, 4, 2), rng.uniform(-1.5, 1.5))
            b = RotatedBox(*rng.uniform(0, 4, 2), *rng.uniform(1, 4, 2), rng.uniform(-1.5, 1.5))
            phi = rng.uniform(-math.pi, math.pi)
            px, py = rng.uniform(-5, 5, 2)
            expected = rotated_iou(a, b)
            assert rotated_iou(rotated(a, phi, px, py), rotated(b, phi, px, py)) == pytest.approx(
                expected, abs=1e-9)

    def test_matches_monte_carlo(self, rng):
        for _ in range(10):
            a = RotatedBox(*rng.uniform(0, 3, 2), *rng.uniform(1, 5, 2), rng.uniform(-1.5, 1.5))
            b = RotatedBox(*rng.uniform(0, 3, 2), *rng.uniform(1, 5, 2), rng.uniform(-1.5, 1.5))
            assert rotated_iou(a, b) == pytest.approx(_monte_carlo_iou(a, b, rng), abs=1e-2)

    def test_clip_polygon_inside(self):
        square = box_to_corners(RotatedBox(0, 0, 2, 2))
        big = box_to_corners(RotatedBox(0, 0, 10, 10))
        assert polygon_area(clip_polygon(square, big)) == pytest.approx(4.0)

    def test_iou_matrix_shape(self):
        boxes = [RotatedBox(0, 0, 2, 2), RotatedBox(1, 0, 2, 2)]
        m = iou_matrix(boxes, boxes[:1])
        assert m.shape == (2, 1)
        assert m[0, 0] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# NMS tests
# ---------------------------------------------------------------------------

class TestNMS:
    def test_suppresses_overlap(self):
        dets = [
            RotatedBox(0, 0, 4, 2, score=0.6),
            RotatedBox(0.2, 0, 4, 2, score=0.9),
            RotatedBox(10, 10, 4, 2, score=0.5),
        ]
        assert rotated_nms(dets, 0.3) == [1, 2]

    def test_tie_goes_to_lower_index(self):
        dets = [RotatedBox(0, 0, 4, 2, score=0.7), RotatedBox(0, 0, 4, 2, score=0.7)]
        assert rotated_nms(dets, 0.5) == [0]

    def test_empty(self):
        assert rotated_nms([], 0.5) == []

    def test_needs_scores(self):
        with pytest.raises(ValueError):
            rotated_nms([RotatedBox(0, 0, 1, 1)], 0.5)

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            rotated_nms([], 1.0)
