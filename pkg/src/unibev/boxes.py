"""Oriented 3D boxes and exact rotated-rectangle overlap.

Box arrays use the column order ``x, y, z, l, w, h, yaw`` in the ego frame;
``z`` is the geometric centre, ``l`` runs along the heading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box3D",
    "DetectionSet",
    "wrap_angle",
    "bev_corners",
    "polygon_area",
    "convex_clip",
    "rotated_iou_bev",
    "rotated_iou_3d",
    "pairwise_iou",
    "boxes_to_array",
]


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.pi - np.mod(np.pi - a, 2 * np.pi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # (l, w, h)
    yaw: float
    class_id: int
    score: float | None = None

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"box dims must be positive, got {self.dims}")
        if not all(math.isfinite(v) for v in (*self.center, *self.dims, self.yaw)):
            raise ValueError("box values must be finite")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.dims, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, a, class_id: int, score: float | None = None) -> "Box3D":
        a = [float(v) for v in a]
        return cls(tuple(a[0:3]), tuple(a[3:6]), a[6], int(class_id),
                   None if score is None else float(score))


def boxes_to_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


@dataclass
class DetectionSet:
    """Boxes of one frame; ``scores`` is None for ground truth."""

    boxes: np.ndarray  # (K, 7)
    labels: np.ndarray  # (K,)
    scores: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != len(self.boxes):
                raise ValueError("scores and boxes differ in length")
        if len(self.labels) != len(self.boxes):
            raise ValueError("labels and boxes differ in length")
        if not np.all(np.isfinite(self.boxes)):
            raise ValueError("box values must be finite")

    def __len__(self) -> int:
        return len(self.boxes)

    @classmethod
    def from_boxes(cls, boxes, frame_id: str = "") -> "DetectionSet":
        scores = None
        if boxes and boxes[0].score is not None:
            scores = [b.score for b in boxes]
        return cls(boxes_to_array(boxes), [b.class_id for b in boxes], scores, frame_id)

    def to_boxes(self) -> list[Box3D]:
        return [Box3D.from_array(b, int(c), None if self.scores is None else float(s))
                for b, c, s in zip(self.boxes, self.labels,
                                   self.scores if self.scores is not None else [None] * len(self))]

    def subset(self, keep) -> "DetectionSet":
        return DetectionSet(self.boxes[keep], self.labels[keep],
                            None if self.scores is None else self.scores[keep], self.frame_id)


def bev_corners(box) -> np.ndarray:
    """(4, 2) BEV corners, counter-clockwise."""
    x, y, _, l, w, _, yaw = np.asarray(box, dtype=np.float64)[:7]
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def convex_clip(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the CCW convex ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp, out = out, []

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    t = sp / (sp - sc)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif sp >= 0:
                t = sp / (sp - sc)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, sp = cur, sc
    return np.array(out).reshape(-1, 2)


def _ordered(a, b):
    # fixed argument order makes iou(a, b) == iou(b, a) bit-for-bit
    ta, tb = tuple(a[:7]), tuple(b[:7])
    return (a, b) if ta <= tb else (b, a)


def _bev_intersection(a: np.ndarray, b: np.ndarray) -> float:
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= ra + rb:
        return 0.0
    poly = convex_clip(bev_corners(a), bev_corners(b))
    return max(polygon_area(poly), 0.0)


def rotated_iou_bev(a, b) -> float:
    """Exact IoU of the BEV rectangles of two boxes (arrays or Box3D)."""
    a = a.as_array() if isinstance(a, Box3D) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    a, b = _ordered(a, b)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = _bev_intersection(a, b)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def rotated_iou_3d(a, b) -> float:
    """BEV polygon overlap times vertical overlap, over the union volume."""
    a = a.as_array() if isinstance(a, Box3D) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    a, b = _ordered(a, b)
    vol_a, vol_b = a[3] * a[4] * a[5], b[3] * b[4] * b[5]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    zo = min(a[2] + a[5] / 2, b[2] + b[5] / 2) - max(a[2] - a[5] / 2, b[2] - b[5] / 2)
    if zo <= 0:
        return 0.0
    inter = _bev_intersection(a, b) * zo
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray, mode: str = "bev") -> np.ndarray:
    """Dense IoU matrix; pairs whose circumcircles are apart are skipped."""
    fn = rotated_iou_bev if mode == "bev" else rotated_iou_3d
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if out.size == 0:
        return out
    ra = 0.5 * np.hypot(boxes_a[:, 3], boxes_a[:, 4])
    rb = 0.5 * np.hypot(boxes_b[:, 3], boxes_b[:, 4])
    dist = np.hypot(boxes_a[:, None, 0] - boxes_b[None, :, 0], boxes_a[:, None, 1] - boxes_b[None, :, 1])
    for i, j in zip(*np.nonzero(dist < ra[:, None] + rb[None, :])):
        out[i, j] = fn(boxes_a[i], boxes_b[j])
    return out
