"""Anchor-based BEV detection: anchors, box codec, target assignment, head,
losses and rotated NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .boxes import DetectionSet, rotated_iou_bev, wrap_angle
from .geometry import BEVGridSpec
from .radar import SecondFPN

__all__ = [
    "AnchorSpec",
    "LossWeights",
    "generate_anchors",
    "encode_boxes",
    "decode_boxes",
    "direction_targets",
    "assign_targets",
    "AnchorTargets",
    "BEVEncoder",
    "AnchorHead",
    "compute_losses",
    "focal_loss",
    "nms_bev",
    "decode_and_nms",
]

DIR_OFFSET = math.pi / 4


@dataclass
class AnchorSpec:
    class_names: tuple[str, ...]
    dims: tuple[tuple[float, float, float], ...]  # (l, w, h) per class
    z_centers: tuple[float, ...]
    match_iou: tuple[float, ...]
    unmatch_iou: tuple[float, ...]
    yaws: tuple[float, ...] = (0.0, math.pi / 2)

    def __post_init__(self):
        k = len(self.class_names)
        if not (len(self.dims) == len(self.z_centers) == len(self.match_iou)
                == len(self.unmatch_iou) == k):
            raise ValueError("anchor spec entries must have one value per class")
        for lo, hi in zip(self.unmatch_iou, self.match_iou):
            if not 0 <= lo < hi <= 1:
                raise ValueError("need 0 <= unmatch_iou < match_iou <= 1")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def anchors_per_location(self) -> int:
        return self.num_classes * len(self.yaws)

    def to_dict(self) -> dict:
        return {"class_names": list(self.class_names), "dims": [list(d) for d in self.dims],
                "z_centers": list(self.z_centers), "match_iou": list(self.match_iou),
                "unmatch_iou": list(self.unmatch_iou), "yaws": list(self.yaws)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSpec":
        return cls(tuple(d["class_names"]), tuple(tuple(x) for x in d["dims"]),
                   tuple(d["z_centers"]), tuple(d["match_iou"]), tuple(d["unmatch_iou"]),
                   tuple(d.get("yaws", (0.0, math.pi / 2))))


@dataclass
class LossWeights:
    cls: float = 1.0
    reg: float = 2.0
    dir: float = 0.2
    depth: float = 0.05


def generate_anchors(grid: BEVGridSpec, spec: AnchorSpec) -> np.ndarray:
    """Dense anchors (ny * nx * classes * yaws, 7) at the centres of ``grid`` cells.

    Ordering is row-major over cells, then class, then yaw, matching the
    head's output layout.
    """
    ny, nx = grid.grid_shape
    xs, ys = grid.cell_center(np.arange(ny)[:, None], np.arange(nx)[None, :])
    xs, ys = np.broadcast_to(xs, (ny, nx)), np.broadcast_to(ys, (ny, nx))
    K, R = spec.num_classes, len(spec.yaws)
    out = np.zeros((ny, nx, K, R, 7))
    out[..., 0] = xs[:, :, None, None]
    out[..., 1] = ys[:, :, None, None]
    for k in range(K):
        out[:, :, k, :, 2] = spec.z_centers[k]
        out[:, :, k, :, 3:6] = spec.dims[k]
        out[:, :, k, :, 6] = np.asarray(spec.yaws)
    return out.reshape(-1, 7)


def anchor_classes(grid: BEVGridSpec, spec: AnchorSpec) -> np.ndarray:
    ny, nx = grid.grid_shape
    per_loc = np.repeat(np.arange(spec.num_classes), len(spec.yaws))
    return np.tile(per_loc, ny * nx)


def encode_boxes(boxes, anchors):
    """Diagonal-normalized deltas (dx, dy, dz, dl, dw, dh, dyaw); numpy or torch."""
    lib = torch if torch.is_tensor(boxes) else np
    xa, ya, za, la, wa, ha, ra = (anchors[..., i] for i in range(7))
    xg, yg, zg, lg, wg, hg, rg = (boxes[..., i] for i in range(7))
    diag = lib.sqrt(la ** 2 + wa ** 2)
    dr = rg - ra
    dr = math.pi - lib.remainder(math.pi - dr, 2 * math.pi) if lib is torch else wrap_angle(dr)
    return lib.stack([(xg - xa) / diag, (yg - ya) / diag, (zg - za) / ha,
                      lib.log(lg / la), lib.log(wg / wa), lib.log(hg / ha), dr], -1)


def decode_boxes(deltas, anchors):
    lib = torch if torch.is_tensor(deltas) else np
    xa, ya, za, la, wa, ha, ra = (anchors[..., i] for i in range(7))
    dx, dy, dz, dl, dw, dh, dr = (deltas[..., i] for i in range(7))
    diag = lib.sqrt(la ** 2 + wa ** 2)
    r = ra + dr
    r = math.pi - lib.remainder(math.pi - r, 2 * math.pi) if lib is torch else wrap_angle(r)
    return lib.stack([dx * diag + xa, dy * diag + ya, dz * ha + za,
                      lib.exp(dl) * la, lib.exp(dw) * wa, lib.exp(dh) * ha, r], -1)


def direction_targets(yaw) -> np.ndarray:
    """Which half-turn the heading lies in, relative to a pi/4 offset."""
    return (np.floor(np.mod(np.asarray(yaw) - DIR_OFFSET, 2 * np.pi) / np.pi) % 2).astype(np.int64)


def apply_direction(yaw: np.ndarray, dir_label: np.ndarray) -> np.ndarray:
    base = np.mod(yaw - DIR_OFFSET, np.pi)
    return wrap_angle(base + DIR_OFFSET + np.pi * dir_label)


def _nearest_bev(boxes: np.ndarray) -> np.ndarray:
    """Axis-aligned (x0, y0, x1, y1) of boxes after snapping yaw to 0 or pi/2."""
    yaw = np.abs(wrap_angle(boxes[:, 6]))
    swap = np.abs(np.sin(yaw)) > math.sqrt(0.5)
    l = np.where(swap, boxes[:, 4], boxes[:, 3])
    w = np.where(swap, boxes[:, 3], boxes[:, 4])
    return np.stack([boxes[:, 0] - l / 2, boxes[:, 1] - w / 2,
                     boxes[:, 0] + l / 2, boxes[:, 1] + w / 2], 1)


def _aligned_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ix = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


@dataclass
class AnchorTargets:
    labels: np.ndarray  # (A,) -1 ignore, 0 background, c + 1 for class c
    reg: np.ndarray  # (A, 7) deltas, valid where labels > 0
    direction: np.ndarray  # (A,)

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


def assign_targets(anchors: np.ndarray, anchor_cls: np.ndarray, gt: DetectionSet,
                   spec: AnchorSpec) -> AnchorTargets:
    """Per-class matching on axis-aligned BEV IoU; every GT keeps its best anchor."""
    A = len(anchors)
    labels = np.zeros(A, np.int64)
    reg = np.zeros((A, 7))
    direction = np.zeros(A, np.int64)
    if len(gt) == 0:
        return AnchorTargets(labels, reg, direction)
    a_bev = _nearest_bev(anchors)
    g_bev = _nearest_bev(gt.boxes)
    for k in range(spec.num_classes):
        a_idx = np.nonzero(anchor_cls == k)[0]
        g_idx = np.nonzero(gt.labels == k)[0]
        if g_idx.size == 0:
            continue
        iou = _aligned_iou(a_bev[a_idx], g_bev[g_idx])
        best_gt = iou.argmax(1)
        best_iou = iou.max(1)
        pos = best_iou >= spec.match_iou[k]
        ignore = (best_iou >= spec.unmatch_iou[k]) & ~pos
        # force-match: the best anchor(s) of each GT
        gt_best = iou.max(0)
        for j in range(len(g_idx)):
            if gt_best[j] > 0:
                hits = np.nonzero(iou[:, j] == gt_best[j])[0]
                pos[hits] = True
                best_gt[hits] = j
        sel_pos = a_idx[pos]
        labels[a_idx[ignore]] = -1
        labels[sel_pos] = k + 1
        matched = gt.boxes[g_idx[best_gt[pos]]]
        reg[sel_pos] = encode_boxes(matched, anchors[sel_pos])
        direction[sel_pos] = direction_targets(matched[:, 6])
    return AnchorTargets(labels, reg, direction)


class BEVEncoder(SecondFPN):
    """BEV-stage SECOND/FPN with output stride 1 relative to its input."""

    def __init__(self, in_channels: int, stage_channels=(128, 128), up_channels=(64, 64),
                 layers=(1, 1)):
        super().__init__(in_channels, stage_channels, (1, 2), layers, up_channels)


class AnchorHead(nn.Module):
    """1x1 convolutions producing class, box and direction outputs per anchor."""

    def __init__(self, in_channels: int, spec: AnchorSpec):
        super().__init__()
        self.spec = spec
        A = spec.anchors_per_location
        self.num_classes = spec.num_classes
        self.cls = nn.Conv2d(in_channels, A * self.num_classes, 1)
        self.box = nn.Conv2d(in_channels, A * 7, 1)
        self.dir = nn.Conv2d(in_channels, A * 2, 1)
        nn.init.constant_(self.cls.bias, -math.log((1 - 0.01) / 0.01))
        nn.init.normal_(self.box.weight, std=0.01)
        nn.init.zeros_(self.box.bias)

    def forward(self, feat: torch.Tensor) -> dict:
        B = feat.shape[0]

        def flat(x, k):
            return x.permute(0, 2, 3, 1).reshape(B, -1, k)

        return {"cls": flat(self.cls(feat), self.num_classes), "box": flat(self.box(feat), 7),
                "dir": flat(self.dir(feat), 2)}


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25,
               gamma: float = 2.0) -> torch.Tensor:
    """Elementwise sigmoid focal loss."""
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    a_t = alpha * targets + (1 - alpha) * (1 - targets)
    return a_t * (1 - p_t) ** gamma * ce


def _smooth_l1(x: torch.Tensor, beta: float = 1.0 / 9.0) -> torch.Tensor:
    ax = x.abs()
    return torch.where(ax < beta, 0.5 * ax ** 2 / beta, ax - 0.5 * beta)


def compute_losses(outputs: dict, targets: Sequence[AnchorTargets],
                   weights: LossWeights | None = None,
                   depth_logits: torch.Tensor | None = None,
                   depth_targets: torch.Tensor | None = None) -> dict:
    """Focal classification, smooth-L1 box regression (sin-difference on yaw)
    and direction cross-entropy, each normalized by the positive count.

    ``depth_targets`` (B, h, w) holds bin indices, -1 where there is no radar hit.
    """
    w = weights or LossWeights()
    cls_logits, box, dirl = outputs["cls"], outputs["box"], outputs["dir"]
    dev, dt = cls_logits.device, cls_logits.dtype
    labels = torch.from_numpy(np.stack([t.labels for t in targets])).to(dev)
    reg_t = torch.from_numpy(np.stack([t.reg for t in targets])).to(dev, dt)
    dir_t = torch.from_numpy(np.stack([t.direction for t in targets])).to(dev)
    pos = labels > 0
    num_pos = max(int(pos.sum()), 1)

    onehot = F.one_hot(labels.clamp(min=0), cls_logits.shape[-1] + 1)[..., 1:].to(dt)
    care = (labels >= 0).to(dt).unsqueeze(-1)
    cls_loss = (focal_loss(cls_logits, onehot) * care).sum() / num_pos

    if pos.any():
        p, t = box[pos], reg_t[pos]
        diff = torch.cat([p[:, :6] - t[:, :6],
                          (torch.sin(p[:, 6]) * torch.cos(t[:, 6])
                           - torch.cos(p[:, 6]) * torch.sin(t[:, 6])).unsqueeze(1)], 1)
        reg_loss = _smooth_l1(diff).sum() / num_pos
        dir_loss = F.cross_entropy(dirl[pos], dir_t[pos], reduction="sum") / num_pos
    else:
        reg_loss = box.sum() * 0.0
        dir_loss = dirl.sum() * 0.0

    if depth_logits is not None and depth_targets is not None and (depth_targets >= 0).any():
        dtg = depth_targets.to(dev)
        depth_loss = F.cross_entropy(depth_logits, dtg.clamp(min=0), reduction="none")
        m = (dtg >= 0).to(dt)
        depth_loss = (depth_loss * m).sum() / m.sum()
    elif depth_logits is not None:
        depth_loss = depth_logits.sum() * 0.0
    else:
        depth_loss = cls_loss.new_zeros(())

    total = w.cls * cls_loss + w.reg * reg_loss + w.dir * dir_loss + w.depth * depth_loss
    return {"cls_loss": cls_loss, "reg_loss": reg_loss, "dir_loss": dir_loss,
            "depth_aux_loss": depth_loss, "total": total}


def nms_bev(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy rotated NMS in BEV; returns kept indices by descending score."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64)
    kept: list[int] = []
    radius = 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])
    for i in order:
        ok = True
        for j in kept:
            if math.hypot(boxes[i, 0] - boxes[j, 0], boxes[i, 1] - boxes[j, 1]) >= radius[i] + radius[j]:
                continue
            if rotated_iou_bev(boxes[i], boxes[j]) >= iou_thr:
                ok = False
                break
        if ok:
            kept.append(int(i))
    return np.array(kept, dtype=np.int64)


def decode_and_nms(outputs: dict, anchors: np.ndarray, score_thr: float = 0.1,
                   nms_iou: float = 0.1, max_dets: int = 50, pre_max: int = 300,
                   frame_ids: Sequence[str] | None = None) -> list[DetectionSet]:
    """Class-agnostic rotated NMS on decoded head outputs, one set per frame."""
    if not 0 <= score_thr <= 1:
        raise ValueError("score_thr must lie in [0, 1]")
    cls = torch.sigmoid(outputs["cls"]).detach().double().cpu().numpy()
    box = outputs["box"].detach().double().cpu().numpy()
    dirs = outputs["dir"].detach().cpu().numpy().argmax(-1)
    results = []
    for b in range(cls.shape[0]):
        scores = cls[b].max(1)
        labels = cls[b].argmax(1)
        cand = np.nonzero(scores >= score_thr)[0]
        cand = cand[np.argsort(-scores[cand], kind="stable")][:pre_max]
        dec = decode_boxes(box[b, cand], anchors[cand])
        if len(cand):
            dec[:, 6] = apply_direction(dec[:, 6], dirs[b, cand])
        keep = nms_bev(dec, scores[cand], nms_iou)[:max_dets]
        fid = frame_ids[b] if frame_ids is not None else str(b)
        results.append(DetectionSet(dec[keep], labels[cand][keep], scores[cand][keep], fid))
    return results
