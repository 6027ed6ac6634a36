"""The full radar-camera detector and its input preparation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .detection import (AnchorHead, AnchorSpec, AnchorTargets, BEVEncoder, anchor_classes,
                        assign_targets, decode_and_nms, generate_anchors)
from .fusion import UFFConfig, UnifiedFeatureFusion
from .geometry import BEVGridSpec, CameraModel, DepthBinSpec
from .radar import SCHEMAS, PillarBatch, RadarBEVEncoder, norm2d, pillarize
from .rdl import ConfigError, RDLConfig, RDLViewTransform, build_radar_depth_map
from .synth import ClassSpec, Frame, default_classes

__all__ = [
    "ModelConfig",
    "UniBEVFusion",
    "Batch",
    "FramePrep",
    "prepare_frame",
    "collate",
    "anchor_spec_for",
    "IMAGE_MEAN",
    "IMAGE_STD",
]

IMAGE_MEAN = 0.45
IMAGE_STD = 0.25
RDL_ABLATIONS = ("none", "extras", "all")


def anchor_spec_for(classes: Sequence[ClassSpec], ground_z: float = -1.5) -> AnchorSpec:
    """Anchors sized to the class-mean dimensions, resting on the ground plane."""
    big = {"car": (0.6, 0.45), "truck": (0.6, 0.45)}
    thr = [big.get(c.name, (0.5, 0.35)) for c in classes]
    return AnchorSpec(
        class_names=tuple(c.name for c in classes),
        dims=tuple(tuple(c.dims_mean) for c in classes),
        z_centers=tuple(ground_z + c.dims_mean[2] / 2 for c in classes),
        match_iou=tuple(t[0] for t in thr),
        unmatch_iou=tuple(t[1] for t in thr),
    )


@dataclass
class ModelConfig:
    schema: str
    grid: BEVGridSpec
    bins: DepthBinSpec
    anchors: AnchorSpec
    encoder_widths: tuple[int, ...] = (32, 64, 128, 128)
    encoder_strides: tuple[int, ...] = (2, 2, 2, 1)
    context_channels: int = 80
    depth_hidden: int = 64
    depth_scale: float = 50.0
    pillar_channels: int = 64
    radar_stage_channels: tuple[int, int] = (64, 128)
    radar_up_channels: tuple[int, int] = (64, 64)
    uff: UFFConfig = field(default_factory=UFFConfig)
    use_uff: bool = True
    bev_stage_channels: tuple[int, int] = (128, 128)
    bev_up_channels: tuple[int, int] = (64, 64)
    rdl_ablation: str = "none"
    max_points: int = 32
    max_pillars: int = 12000
    splat_mode: str = "sorted"

    def __post_init__(self):
        if self.schema not in SCHEMAS:
            raise ConfigError(f"unknown radar schema {self.schema!r}")
        if self.rdl_ablation not in RDL_ABLATIONS:
            raise ConfigError(f"rdl_ablation must be one of {RDL_ABLATIONS}")
        ny, nx = self.grid.grid_shape
        if ny % 4 or nx % 4:
            raise ConfigError("BEV grid sides must be divisible by 4")

    @property
    def stride(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def head_grid(self) -> BEVGridSpec:
        return self.grid.coarsen(2)

    def rdl_config(self) -> RDLConfig:
        schema = SCHEMAS[self.schema]
        return RDLConfig(num_extra=schema.num_extra, bins=self.bins,
                         context_channels=self.context_channels,
                         encoder_widths=tuple(self.encoder_widths),
                         encoder_strides=tuple(self.encoder_strides),
                         depth_hidden=self.depth_hidden, depth_scale=self.depth_scale,
                         extra_scales=tuple(float(s) for s in schema.scales()))

    def to_dict(self) -> dict:
        return {
            "schema": self.schema, "grid": self.grid.to_dict(), "bins": self.bins.to_dict(),
            "anchors": self.anchors.to_dict(),
            "encoder_widths": list(self.encoder_widths), "encoder_strides": list(self.encoder_strides),
            "context_channels": self.context_channels, "depth_hidden": self.depth_hidden,
            "depth_scale": self.depth_scale, "pillar_channels": self.pillar_channels,
            "radar_stage_channels": list(self.radar_stage_channels),
            "radar_up_channels": list(self.radar_up_channels),
            "uff": {"unified_channels": self.uff.unified_channels,
                    "fused_channels": self.uff.fused_channels,
                    "num_modalities": self.uff.num_modalities,
                    "residual_layers": self.uff.residual_layers},
            "use_uff": self.use_uff,
            "bev_stage_channels": list(self.bev_stage_channels),
            "bev_up_channels": list(self.bev_up_channels),
            "rdl_ablation": self.rdl_ablation, "max_points": self.max_points,
            "max_pillars": self.max_pillars, "splat_mode": self.splat_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        grid = BEVGridSpec.from_dict(d.pop("grid"))
        bins = DepthBinSpec.from_dict(d.pop("bins"))
        anchors = AnchorSpec.from_dict(d.pop("anchors"))
        uff = UFFConfig(**d.pop("uff"))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(grid=grid, bins=bins, anchors=anchors, uff=uff, **d)

    @classmethod
    def preset(cls, name: str, classes: Sequence[ClassSpec] | None = None,
               ground_z: float = -1.5, schema: str = "vod") -> "ModelConfig":
        """Named presets: ``vod`` and ``tj4d`` at documented widths, ``toy`` for CPU runs.

        ``schema`` only applies to ``toy``; the dataset presets fix their own.
        """
        if name == "toy":
            classes = classes or default_classes(schema)
            return cls(schema=schema, grid=BEVGridSpec.toy(), bins=DepthBinSpec.toy(),
                       anchors=anchor_spec_for(classes, ground_z),
                       encoder_widths=(16, 32, 48, 48), context_channels=32, depth_hidden=32,
                       depth_scale=25.0, pillar_channels=32, radar_stage_channels=(32, 64),
                       radar_up_channels=(32, 32), uff=UFFConfig(64, 64, 2, 1),
                       bev_stage_channels=(64, 64), bev_up_channels=(32, 32),
                       max_pillars=4000)
        if name in ("vod", "tj4d"):
            classes = classes or default_classes(name)
            grid = BEVGridSpec.vod() if name == "vod" else BEVGridSpec.tj4d()
            bins = DepthBinSpec.vod() if name == "vod" else DepthBinSpec.tj4d()
            return cls(schema=name, grid=grid, bins=bins, anchors=anchor_spec_for(classes, ground_z))
        raise ConfigError(f"unknown preset {name!r}; expected vod, tj4d or toy")


@dataclass
class FramePrep:
    """Everything derived from one frame that does not depend on parameters."""

    radar_map: np.ndarray  # (N+1, h, w)
    depth_target: np.ndarray  # (h, w) bin index or -1
    pillars: PillarBatch
    targets: AnchorTargets | None


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, H, W) in [0, 1]
    radar_maps: torch.Tensor
    depth_targets: torch.Tensor
    pillars: list[PillarBatch]
    cameras: list[CameraModel]
    targets: list[AnchorTargets] | None
    frame_ids: list[str]


def prepare_frame(frame: Frame, cfg: ModelConfig, anchors: np.ndarray, anchor_cls: np.ndarray,
                  seed: int = 0, with_targets: bool = True) -> FramePrep:
    H, W = frame.camera.image_size
    fs = (H // cfg.stride, W // cfg.stride)
    rmap = build_radar_depth_map(frame.radar, frame.camera, fs, cfg.stride)
    dt = np.where(rmap.mask, cfg.bins.bin_index(rmap.depth), -1)
    pillars = pillarize(frame.radar, cfg.grid, cfg.max_points, cfg.max_pillars, seed)
    targets = assign_targets(anchors, anchor_cls, frame.gt, cfg.anchors) if with_targets else None
    return FramePrep(rmap.channels, dt.astype(np.int64), pillars, targets)


def collate(frames: Sequence[Frame], preps: Sequence[FramePrep],
            images: Sequence[np.ndarray] | None = None) -> Batch:
    """``images`` optionally overrides the frames' own pixels with (3, H, W) float arrays."""
    imgs = images if images is not None else [f.image_float() for f in frames]
    targets = [p.targets for p in preps]
    return Batch(
        images=torch.from_numpy(np.stack(imgs).astype(np.float32)),
        radar_maps=torch.from_numpy(np.stack([p.radar_map for p in preps])),
        depth_targets=torch.from_numpy(np.stack([p.depth_target for p in preps])),
        pillars=[p.pillars for p in preps],
        cameras=[f.camera for f in frames],
        targets=None if any(t is None for t in targets) else targets,
        frame_ids=[f.frame_id for f in frames],
    )


class UniBEVFusion(nn.Module):
    """Image stream (RDL), radar stream, fusion (UFF or concat) and BEV stage + head.

    The camera BEV is computed on the full grid and brought to the radar
    stream's half resolution by a stride-2 convolution before fusion.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        schema = SCHEMAS[cfg.schema]
        self.view_transform = RDLViewTransform(cfg.rdl_config(), cfg.grid, cfg.splat_mode)
        c_cam = cfg.context_channels
        self.camera_down = nn.Sequential(nn.Conv2d(c_cam, c_cam, 3, 2, 1, bias=False),
                                         norm2d(c_cam), nn.ReLU())
        self.radar = RadarBEVEncoder(schema, cfg.grid, cfg.pillar_channels,
                                     cfg.radar_stage_channels, cfg.radar_up_channels)
        if cfg.use_uff:
            self.fuser = UnifiedFeatureFusion({"camera": c_cam, "radar": self.radar.out_channels},
                                              cfg.uff)
            c_fused = self.fuser.out_channels
        else:
            c_fused = cfg.uff.fused_channels
            self.fuser = nn.Sequential(nn.Conv2d(c_cam + self.radar.out_channels, c_fused, 3, 1, 1,
                                                 bias=False), norm2d(c_fused), nn.ReLU())
        self.bev_encoder = BEVEncoder(c_fused, cfg.bev_stage_channels, cfg.bev_up_channels)
        self.head = AnchorHead(self.bev_encoder.out_channels, cfg.anchors)
        self.anchors = generate_anchors(cfg.head_grid, cfg.anchors)
        self.anchor_cls = anchor_classes(cfg.head_grid, cfg.anchors)

    def prepare(self, frame: Frame, seed: int = 0, with_targets: bool = True) -> FramePrep:
        return prepare_frame(frame, self.cfg, self.anchors, self.anchor_cls, seed, with_targets)

    def forward(self, batch: Batch) -> dict:
        images = (batch.images - IMAGE_MEAN) / IMAGE_STD
        rmap = batch.radar_maps
        if self.cfg.rdl_ablation == "extras":
            rmap = torch.cat([rmap[:, :1], torch.zeros_like(rmap[:, 1:])], 1)
        elif self.cfg.rdl_ablation == "all":
            rmap = torch.zeros_like(rmap)
        cam = self.view_transform(images, rmap, batch.cameras)
        cam_bev = self.camera_down(cam["bev"])
        radar_bev = self.radar(batch.pillars)
        weights = None
        if self.cfg.use_uff:
            fused, weights = self.fuser({"camera": cam_bev, "radar": radar_bev})
        else:
            fused = self.fuser(torch.cat([cam_bev, radar_bev], 1))
        out = self.head(self.bev_encoder(fused))
        out.update(depth_logits=cam["depth_logits"], camera_bev=cam["bev"], radar_bev=radar_bev,
                   fusion_weights=weights)
        return out

    @torch.no_grad()
    def detect(self, batch: Batch, score_thr: float = 0.1, nms_iou: float = 0.1,
               max_dets: int = 50):
        was_training = self.training
        self.eval()
        out = self(batch)
        self.train(was_training)
        return decode_and_nms(out, self.anchors, score_thr, nms_iou, max_dets,
                              frame_ids=batch.frame_ids)
