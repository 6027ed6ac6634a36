"""Camera stream with radar-augmented depth: image encoder, radar depth map,
the (N+1) -> 64 radar depth transform, depth/context prediction and lift-splat."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import (BEVGridSpec, CameraModel, DepthBinSpec, build_frustum, project_to_image,
                       splat_to_bev)
from .radar import RadarPointCloud, norm2d

__all__ = [
    "ConfigError",
    "RDLConfig",
    "RadarDepthMap",
    "ImageEncoder",
    "build_radar_depth_map",
    "RadarDepthTransform",
    "DepthContextHead",
    "lift_splat",
    "RDLViewTransform",
    "RADAR_FEATURE_CHANNELS",
]

RADAR_FEATURE_CHANNELS = 64


class ConfigError(ValueError):
    """Shape or configuration mismatch between pipeline stages."""


@dataclass
class RDLConfig:
    num_extra: int
    bins: DepthBinSpec
    context_channels: int = 80
    encoder_widths: tuple[int, ...] = (32, 64, 128, 128)
    encoder_strides: tuple[int, ...] = (2, 2, 2, 1)
    depth_feature_channels: int = RADAR_FEATURE_CHANNELS
    depth_hidden: int = 64
    depth_scale: float = 50.0  # metres mapped to 1.0 before the transform
    extra_scales: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.num_extra < 1:
            raise ConfigError("RDL needs at least one radar extra channel")
        if self.depth_feature_channels != RADAR_FEATURE_CHANNELS:
            raise ConfigError("the radar depth transform always outputs 64 channels")
        if len(self.encoder_widths) != len(self.encoder_strides):
            raise ConfigError("encoder widths and strides differ in length")
        if self.extra_scales is not None and len(self.extra_scales) != self.num_extra:
            raise ConfigError("extra_scales must have one entry per extra channel")

    @property
    def stride(self) -> int:
        return int(np.prod(self.encoder_strides))

    @property
    def radar_input_channels(self) -> int:
        return self.num_extra + 1


@dataclass
class RadarDepthMap:
    """Channel 0 is metric depth of the nearest radar hit (0 = none), then extras."""

    channels: np.ndarray  # (N+1, h, w) float32
    mask: np.ndarray  # (h, w) bool

    @property
    def depth(self) -> np.ndarray:
        return self.channels[0]


class ImageEncoder(nn.Module):
    """Strided convolutional encoder standing in for a pretrained backbone."""

    def __init__(self, widths=(32, 64, 128, 128), strides=(2, 2, 2, 1), in_channels: int = 3):
        super().__init__()
        layers = []
        cin = in_channels
        for w, s in zip(widths, strides):
            layers += [nn.Conv2d(cin, w, 3, s, 1, bias=False), norm2d(w), nn.ReLU(),
                       nn.Conv2d(w, w, 3, 1, 1, bias=False), norm2d(w), nn.ReLU()]
            cin = w
        self.net = nn.Sequential(*layers)
        self.stride = int(np.prod(strides))
        self.out_channels = widths[-1]

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        H, W = image.shape[-2:]
        if H % self.stride or W % self.stride:
            raise ConfigError(f"image size {(H, W)} not divisible by encoder stride {self.stride}")
        return self.net(image)


def build_radar_depth_map(cloud: RadarPointCloud, camera: CameraModel,
                          feature_size: tuple[int, int], stride: int) -> RadarDepthMap:
    """Rasterize visible radar points at feature resolution; nearest point wins."""
    h, w = feature_size
    n = cloud.schema.num_extra
    channels = np.zeros((n + 1, h, w), np.float32)
    mask = np.zeros((h, w), bool)
    if len(cloud) == 0:
        return RadarDepthMap(channels, mask)
    u, v, depth, visible = project_to_image(cloud.xyz, camera)
    col = np.floor(np.where(visible, u, 0) / stride).astype(np.int64)
    row = np.floor(np.where(visible, v, 0) / stride).astype(np.int64)
    visible &= (col < w) & (row < h)
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return RadarDepthMap(channels, mask)
    pix = row[idx] * w + col[idx]
    order = np.lexsort((idx, depth[idx], pix))  # by pixel, then depth, then index
    pix_sorted = pix[order]
    first = np.ones(len(order), bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    winners = idx[order[first]]
    wp = pix_sorted[first]
    r, c = wp // w, wp % w
    channels[0, r, c] = depth[winners]
    channels[1:, r, c] = cloud.extras[winners].T
    mask[r, c] = True
    return RadarDepthMap(channels, mask)


class RadarDepthTransform(nn.Module):
    """Pointwise (1x1) map from the N+1 radar depth channels to 64 features.

    Inputs are divided by fixed per-channel scales first (no offsets, so
    empty pixels stay exactly zero and yield ``relu(bias)``).
    """

    def __init__(self, in_channels: int, depth_scale: float = 50.0,
                 extra_scales: Sequence[float] | None = None,
                 out_channels: int = RADAR_FEATURE_CHANNELS):
        super().__init__()
        if out_channels != RADAR_FEATURE_CHANNELS:
            raise ConfigError("radar depth transform output must be 64 channels")
        if in_channels < 2:
            raise ConfigError("radar depth transform needs N+1 >= 2 input channels")
        self.in_channels = in_channels
        extra_scales = list(extra_scales) if extra_scales is not None else [1.0] * (in_channels - 1)
        if len(extra_scales) != in_channels - 1:
            raise ConfigError("extra_scales must have N entries")
        self.register_buffer("scales", torch.tensor([depth_scale] + extra_scales,
                                                    dtype=torch.float32).view(1, -1, 1, 1))
        self.conv = nn.Conv2d(in_channels, out_channels, 1)
        self.out_channels = out_channels

    def forward(self, radar_map: torch.Tensor) -> torch.Tensor:
        if radar_map.dim() != 4 or radar_map.shape[1] != self.in_channels:
            raise ConfigError(f"expected (B, {self.in_channels}, h, w) radar depth map, "
                              f"got {tuple(radar_map.shape)}")
        return torch.relu(self.conv(radar_map / self.scales.to(radar_map.dtype)))


class DepthContextHead(nn.Module):
    """Depth distribution from image + radar features; context from image only."""

    def __init__(self, image_channels: int, num_bins: int, context_channels: int,
                 radar_channels: int = RADAR_FEATURE_CHANNELS, hidden: int = 64):
        super().__init__()
        self.image_channels = image_channels
        self.radar_channels = radar_channels
        self.depth_net = nn.Sequential(
            nn.Conv2d(image_channels + radar_channels, hidden, 3, 1, 1, bias=False),
            norm2d(hidden), nn.ReLU(),
            nn.Conv2d(hidden, hidden, 3, 1, 1, bias=False), norm2d(hidden), nn.ReLU(),
            nn.Conv2d(hidden, num_bins, 1),
        )
        self.context_net = nn.Conv2d(image_channels, context_channels, 1)

    def logits_and_context(self, img_feat: torch.Tensor, radar_feat: torch.Tensor):
        if img_feat.shape[-2:] != radar_feat.shape[-2:]:
            raise ConfigError(f"spatial mismatch {tuple(img_feat.shape[-2:])} vs "
                              f"{tuple(radar_feat.shape[-2:])}")
        if img_feat.shape[1] != self.image_channels or radar_feat.shape[1] != self.radar_channels:
            raise ConfigError("channel mismatch in depth/context head")
        logits = self.depth_net(torch.cat([img_feat, radar_feat], dim=1))
        return logits, self.context_net(img_feat)

    def forward(self, img_feat: torch.Tensor, radar_feat: torch.Tensor):
        logits, context = self.logits_and_context(img_feat, radar_feat)
        return logits.softmax(dim=1), context


def lift_splat(context: torch.Tensor, depth_dist: torch.Tensor, geometry: np.ndarray,
               grid: BEVGridSpec, mode: str = "sorted") -> torch.Tensor:
    """Outer product of context and depth per pixel, sum-pooled into BEV.

    context (B, C, h, w), depth_dist (B, D, h, w), geometry (B, D, h, w, 3)
    ego-frame frustum points. Returns (B, C, ny, nx).
    """
    B, C = context.shape[:2]
    D = depth_dist.shape[1]
    if np.shape(geometry)[:2] != (B, D):
        raise ValueError(f"geometry {np.shape(geometry)} does not match depth bins ({B}, {D})")
    lifted = depth_dist.unsqueeze(2) * context.unsqueeze(1)  # B, D, C, h, w
    lifted = lifted.permute(0, 1, 3, 4, 2).reshape(-1, C)
    geometry = np.asarray(geometry).reshape(-1, 3)
    per_frame = lifted.shape[0] // B
    bidx = np.repeat(np.arange(B), per_frame)
    return splat_to_bev(lifted, geometry, grid, batch_index=bidx, batch_size=B, mode=mode)


class RDLViewTransform(nn.Module):
    """Image + radar cloud -> camera BEV feature (B, C_ctx, ny, nx)."""

    def __init__(self, config: RDLConfig, grid: BEVGridSpec, splat_mode: str = "sorted"):
        super().__init__()
        self.config = config
        self.grid = grid
        self.splat_mode = splat_mode
        self.image_encoder = ImageEncoder(config.encoder_widths, config.encoder_strides)
        self.radar_transform = RadarDepthTransform(config.radar_input_channels, config.depth_scale,
                                                   config.extra_scales)
        self.depth_head = DepthContextHead(self.image_encoder.out_channels, config.bins.num_bins,
                                           config.context_channels, hidden=config.depth_hidden)
        self.out_channels = config.context_channels
        self._frustums: dict = {}

    def frustum(self, camera: CameraModel, feature_size: tuple[int, int]) -> np.ndarray:
        key = (camera.intrinsics.tobytes(), camera.extrinsics.tobytes(), camera.image_size,
               tuple(feature_size))
        if key not in self._frustums:
            self._frustums[key] = build_frustum(feature_size, self.config.bins, camera,
                                                self.config.stride)
        return self._frustums[key]

    def radar_maps(self, clouds: Sequence[RadarPointCloud], cameras: Sequence[CameraModel],
                   feature_size: tuple[int, int]) -> list[RadarDepthMap]:
        return [build_radar_depth_map(c, cam, feature_size, self.config.stride)
                for c, cam in zip(clouds, cameras)]

    def forward(self, images: torch.Tensor, radar_maps: torch.Tensor,
                cameras: Sequence[CameraModel]) -> dict:
        """``radar_maps`` is the stacked (B, N+1, h, w) radar depth map tensor."""
        img_feat = self.image_encoder(images)
        radar_feat = self.radar_transform(radar_maps.to(img_feat.dtype))
        logits, context = self.depth_head.logits_and_context(img_feat, radar_feat)
        depth = logits.softmax(dim=1)
        fs = tuple(img_feat.shape[-2:])
        geometry = np.stack([self.frustum(cam, fs) for cam in cameras])
        bev = lift_splat(context, depth, geometry, self.grid, self.splat_mode)
        return {"bev": bev, "depth_logits": logits, "depth": depth, "context": context}
