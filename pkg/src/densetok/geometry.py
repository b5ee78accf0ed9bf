"""Rotated-rectangle geometry: corners, convex clipping, IoU and NMS.

Angles run counter-clockwise from +x to the box's w-axis and are kept in
[-pi/2, pi/2); a rectangle is unchanged by a half turn, so any angle folds
into that range.
"""
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError

AREA_EPS = 1e-12

Point = Tuple[float, float]


def normalize_angle(theta: float) -> float:
    if -math.pi / 2 <= theta < math.pi / 2:
        return theta
    folded = (theta + math.pi / 2) % math.pi - math.pi / 2
    if folded >= math.pi / 2:
        folded -= math.pi
    return folded


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float = 0.0
    class_id: int = 0
    score: Optional[float] = None

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ShapeError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score must lie in [0, 1], got {self.score}")
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @property
    def area(self) -> float:
        return self.w * self.h

    def with_score(self, score: float) -> "RotatedBox":
        return replace(self, score=score)

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h, self.theta)


def swap_extents(box: RotatedBox) -> RotatedBox:
    """The same rectangle described with w and h exchanged and a quarter turn added."""
    return replace(box, w=box.h, h=box.w, theta=box.theta + math.pi / 2)


def box_to_corners(box: RotatedBox) -> np.ndarray:
    """(4, 2) corners, counter-clockwise, starting at the local (-w/2, -h/2) corner."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    hw, hh = box.w / 2.0, box.h / 2.0
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.cx, box.cy])


def contains(box: RotatedBox, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Boolean mask of the points (xs, ys) that fall inside `box`."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx, dy = xs - box.cx, ys - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.w / 2.0) & (np.abs(v) <= box.h / 2.0)


def polygon_area(poly: np.ndarray) -> float:
    """Unsigned shoelace area."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _cross(o: np.ndarray, a: np.ndarray, p: np.ndarray) -> float:
    return float((a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]))


def _intersect(p: np.ndarray, q: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Point where segment p->q crosses the line through a->b."""
    cp, cq = _cross(a, b, p), _cross(a, b, q)
    t = cp / (cp - cq)
    return p + t * (q - p)


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of `subject` inside the convex counter-clockwise `clipper`."""
    output = [row for row in subject]
    n = len(clipper)
    for i in range(n):
        a, b = clipper[i], clipper[(i + 1) % n]
        source, output = output, []
        if not source:
            break
        prev = source[-1]
        prev_in = _cross(a, b, prev) >= 0.0
        for cur in source:
            cur_in = _cross(a, b, cur) >= 0.0
            if cur_in:
                if not prev_in:
                    output.append(_intersect(prev, cur, a, b))
                output.append(cur)
            elif prev_in:
                output.append(_intersect(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    return np.array(output).reshape(-1, 2)


def intersection_area(a: RotatedBox, b: RotatedBox) -> float:
    reach = 0.5 * (math.hypot(a.w, a.h) + math.hypot(b.w, b.h))
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > reach:
        return 0.0
    area = polygon_area(clip_polygon(box_to_corners(a), box_to_corners(b)))
    return area if area >= AREA_EPS else 0.0


def rotated_iou(a: RotatedBox, b: RotatedBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a: Sequence[RotatedBox], boxes_b: Sequence[RotatedBox]) -> np.ndarray:
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out


def rotated_nms(dets: Sequence[RotatedBox], iou_thresh: float) -> List[int]:
    """Greedy score-descending suppression; ties go to the lower original index."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    if any(d.score is None for d in dets):
        raise ValueError("rotated_nms needs a score on every detection")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: List[int] = []
    for i in order:
        if all(rotated_iou(dets[i], dets[k]) <= iou_thresh for k in kept):
            kept.append(i)
    return kept


def flip_box(box: RotatedBox, width: int, height: int, horizontal: bool) -> RotatedBox:
    """Mirror a box with the image; pixel centers sit on integer coordinates."""
    if horizontal:
        return replace(box, cx=(width - 1) - box.cx, theta=-box.theta)
    return replace(box, cy=(height - 1) - box.cy, theta=-box.theta)


def box_inside_image(box: RotatedBox, width: int, height: int) -> bool:
    corners = box_to_corners(box)
    return bool(
        np.all(corners[:, 0] >= 0) and np.all(corners[:, 0] <= width - 1)
        and np.all(corners[:, 1] >= 0) and np.all(corners[:, 1] <= height - 1)
    )
