"""Average precision with rotated IoU, per-class thresholds and the driving-corridor RoI."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import DetectionSet, rotated_iou_3d, rotated_iou_bev
from .geometry import CameraModel

__all__ = [
    "EvalConfig",
    "RoI",
    "VOD_CORRIDOR",
    "roi_filter",
    "match_frame",
    "average_precision",
    "interpolated_ap",
    "evaluate",
]

log = logging.getLogger(__name__)

DEFAULT_IOU = {"car": 0.5, "truck": 0.5, "pedestrian": 0.25, "cyclist": 0.25}


@dataclass(frozen=True)
class RoI:
    """Camera-frame corridor: ``x_min <= x <= x_max`` (lateral) and ``z <= z_max`` (forward)."""

    x_min: float = -4.0
    x_max: float = 4.0
    z_max: float = 25.0

    def __post_init__(self):
        if not self.x_min <= self.x_max:
            raise ValueError("RoI needs x_min <= x_max")


VOD_CORRIDOR = RoI()


@dataclass
class EvalConfig:
    class_names: tuple[str, ...]
    iou_thresholds: dict = field(default_factory=dict)
    roi: RoI | None = None
    ap_points: int = 40  # 40 (KITTI R40) or 11
    iou_mode: str = "3d"  # "3d" or "bev"

    def __post_init__(self):
        thr = {c: DEFAULT_IOU.get(c, 0.5) for c in self.class_names}
        thr.update(self.iou_thresholds)
        self.iou_thresholds = thr
        for c, t in thr.items():
            if not 0 < t <= 1:
                raise ValueError(f"IoU threshold for {c} must lie in (0, 1]")
        if self.ap_points not in (11, 40):
            raise ValueError("ap_points must be 11 or 40")
        if self.iou_mode not in ("3d", "bev"):
            raise ValueError("iou_mode must be '3d' or 'bev'")

    def with_(self, **kw) -> "EvalConfig":
        d = dict(class_names=self.class_names, iou_thresholds=dict(self.iou_thresholds),
                 roi=self.roi, ap_points=self.ap_points, iou_mode=self.iou_mode)
        d.update(kw)
        return EvalConfig(**d)


def roi_filter(boxes: DetectionSet, roi: RoI | None, camera: CameraModel) -> DetectionSet:
    """Keep boxes whose centre lies in the camera-frame corridor."""
    if roi is None or len(boxes) == 0:
        return boxes
    c = camera.ego_to_camera(boxes.boxes[:, :3])
    keep = (c[:, 0] >= roi.x_min) & (c[:, 0] <= roi.x_max) & (c[:, 2] <= roi.z_max)
    return boxes.subset(keep)


def match_frame(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray,
                iou_thr: float, iou_mode: str = "3d") -> np.ndarray:
    """Greedy matching in descending score order; returns a TP flag per detection.

    Each detection takes the unmatched GT of highest IoU, if that IoU reaches
    ``iou_thr``.
    """
    fn = rotated_iou_3d if iou_mode == "3d" else rotated_iou_bev
    order = np.argsort(-det_scores, kind="stable")
    taken = np.zeros(len(gt_boxes), bool)
    tp = np.zeros(len(det_boxes), bool)
    for i in order:
        best, best_j = -1.0, -1
        for j in range(len(gt_boxes)):
            if taken[j]:
                continue
            iou = fn(det_boxes[i], gt_boxes[j])
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thr:
            taken[best_j] = True
            tp[i] = True
    return tp


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, points: int = 40) -> float:
    """Mean of the max precision at recall >= r over the sampled recall levels.

    40 points samples r = 1/40 .. 1; 11 points samples r = 0, 0.1 .. 1.
    """
    levels = np.arange(1, 41) / 40.0 if points == 40 else np.arange(11) / 10.0
    if len(recall) == 0:
        return 0.0
    # running max from the right gives the interpolated envelope
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, levels - 1e-12, side="left")
    vals = np.where(idx < len(recall), env[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(vals.mean())


def average_precision(dets: Sequence[DetectionSet], gts: Sequence[DetectionSet], iou_thr: float,
                      class_id: int, points: int = 40, iou_mode: str = "3d") -> float | None:
    """AP of one class pooled over frames; None when the class has no GT."""
    n_gt = sum(int((g.labels == class_id).sum()) for g in gts)
    if n_gt == 0:
        return None
    scores, tps = [], []
    for d, g in zip(dets, gts):
        dm = d.labels == class_id
        if not dm.any():
            continue
        gb = g.boxes[g.labels == class_id]
        s = d.scores[dm]
        scores.append(s)
        tps.append(match_frame(d.boxes[dm], s, gb, iou_thr, iou_mode))
    if not scores:
        return 0.0
    scores = np.concatenate(scores)
    tps = np.concatenate(tps)
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(~tps)
    # one PR point per distinct score (end of each tie group)
    last = np.r_[scores[1:] != scores[:-1], True]
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    return interpolated_ap(recall, precision, points)


def evaluate(dets: Sequence[DetectionSet], gts: Sequence[DetectionSet], cfg: EvalConfig,
             cameras: Sequence[CameraModel] | None = None) -> dict:
    """Per-class AP and their mean over classes that have ground truth.

    With an RoI set, detections and ground truth are filtered identically.
    """
    if cfg.roi is not None:
        if cameras is None:
            raise ValueError("RoI evaluation needs the frame cameras")
        dets = [roi_filter(d, cfg.roi, c) for d, c in zip(dets, cameras)]
        gts = [roi_filter(g, cfg.roi, c) for g, c in zip(gts, cameras)]
    ap, excluded = {}, []
    for k, name in enumerate(cfg.class_names):
        v = average_precision(dets, gts, cfg.iou_thresholds[name], k, cfg.ap_points, cfg.iou_mode)
        if v is None:
            excluded.append(name)
            log.warning("class %s has no ground truth; excluded from mAP", name)
        else:
            ap[name] = v
    m = float(np.mean(list(ap.values()))) if ap else float("nan")
    return {"ap": ap, "map": m, "excluded": excluded}
