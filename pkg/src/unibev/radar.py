"""Radar stream: point-cloud schema, pillarization, PillarFeatureNet, scatter
and the SECOND/FPN-style BEV encoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .geometry import BEVGridSpec, bev_cell_index

__all__ = [
    "RadarChannel",
    "RadarSchema",
    "VOD_SCHEMA",
    "TJ4D_SCHEMA",
    "SCHEMAS",
    "RadarPointCloud",
    "PillarBatch",
    "pillarize",
    "collate_pillars",
    "PillarFeatureNet",
    "scatter_pillars",
    "SecondFPN",
    "RadarBEVEncoder",
    "norm2d",
]


@dataclass(frozen=True)
class RadarChannel:
    name: str
    unit: str
    # decoration uses (value - offset) / scale
    offset: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class RadarSchema:
    name: str
    extra_channels: tuple[RadarChannel, ...]

    def __post_init__(self):
        names = [c.name for c in self.extra_channels]
        if len(names) < 1:
            raise ValueError("a radar schema needs at least one extra channel")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names in schema {self.name!r}")

    @property
    def num_extra(self) -> int:
        return len(self.extra_channels)

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.extra_channels]

    def index(self, name: str) -> int:
        return self.channel_names.index(name)

    def normalize(self, extras: np.ndarray) -> np.ndarray:
        off = np.array([c.offset for c in self.extra_channels])
        sc = np.array([c.scale for c in self.extra_channels])
        return (extras - off) / sc

    def scales(self) -> np.ndarray:
        return np.array([c.scale for c in self.extra_channels])


VOD_SCHEMA = RadarSchema("vod", (
    RadarChannel("rcs", "dBsm", 0.0, 10.0),
    RadarChannel("v_r", "m/s", 0.0, 5.0),
    RadarChannel("v_r_abs", "m/s", 0.0, 5.0),
    RadarChannel("t", "s", 0.0, 1.0),
))

TJ4D_SCHEMA = RadarSchema("tj4d", (
    RadarChannel("range", "m", 0.0, 30.0),
    RadarChannel("rcs", "dBsm", 0.0, 10.0),
    RadarChannel("alpha", "rad", 0.0, 0.5),
    RadarChannel("beta", "rad", 0.0, 0.2),
))

SCHEMAS = {"vod": VOD_SCHEMA, "tj4d": TJ4D_SCHEMA}


@dataclass
class RadarPointCloud:
    xyz: np.ndarray  # (P, 3) float32
    extras: np.ndarray  # (P, N) float32, schema order
    schema: RadarSchema

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        self.extras = np.asarray(self.extras, dtype=np.float32)
        if self.extras.ndim != 2 or len(self.extras) != len(self.xyz):
            raise ValueError(f"extras must be (P, N) with P={len(self.xyz)}, got {self.extras.shape}")
        if self.extras.shape[1] != self.schema.num_extra:
            raise ValueError(f"extras width {self.extras.shape[1]} != schema "
                             f"{self.schema.name} width {self.schema.num_extra}")
        if not (np.all(np.isfinite(self.xyz)) and np.all(np.isfinite(self.extras))):
            raise ValueError("radar point values must be finite")

    def __len__(self) -> int:
        return len(self.xyz)

    @classmethod
    def empty(cls, schema: RadarSchema) -> "RadarPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, schema.num_extra)), schema)

    def subset(self, idx) -> "RadarPointCloud":
        return RadarPointCloud(self.xyz[idx], self.extras[idx], self.schema)


@dataclass
class PillarBatch:
    pillar_features: np.ndarray  # (num_pillars, max_points, 8 + N)
    pillar_coords: np.ndarray  # (num_pillars, 2) as (iy, ix)
    point_counts: np.ndarray  # (num_pillars,)

    def __len__(self) -> int:
        return len(self.point_counts)

    @property
    def mask(self) -> np.ndarray:
        max_points = self.pillar_features.shape[1]
        return np.arange(max_points)[None, :] < self.point_counts[:, None]


def pillarize(cloud: RadarPointCloud, grid: BEVGridSpec, max_points: int = 32,
              max_pillars: int = 12000, seed: int = 0) -> PillarBatch:
    """Group in-range points into vertical pillars and decorate them.

    Per point: xyz, normalized extras, offset to the pillar's point mean (3)
    and offset to the pillar cell centre (2). Pillars over ``max_pillars``
    are dropped by descending point count, ties broken row-major; surplus
    points in a pillar are subsampled at random under ``seed``.
    """
    if max_points < 1 or max_pillars < 1:
        raise ValueError("max_points and max_pillars must be >= 1")
    n_extra = cloud.schema.num_extra
    width = 8 + n_extra
    xyz = cloud.xyz.astype(np.float64)
    iy, ix, valid = bev_cell_index(xyz, grid)
    valid &= (xyz[:, 2] >= grid.z_range[0]) & (xyz[:, 2] < grid.z_range[1])
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return PillarBatch(np.zeros((0, max_points, width), np.float32),
                           np.zeros((0, 2), np.int64), np.zeros(0, np.int64))
    rank = iy[idx] * grid.nx + ix[idx]
    order = np.argsort(rank, kind="stable")
    idx, rank = idx[order], rank[order]
    uniq, starts, counts = np.unique(rank, return_index=True, return_counts=True)

    sel = np.lexsort((uniq, -counts))[:max_pillars]
    sel.sort()  # back to row-major order
    rng = np.random.default_rng(seed)
    feats = np.zeros((len(sel), max_points, width), np.float32)
    kept_counts = np.minimum(counts[sel], max_points)
    extras = cloud.schema.normalize(cloud.extras.astype(np.float64))
    for k, s in enumerate(sel):
        members = idx[starts[s]:starts[s] + counts[s]]
        if counts[s] > max_points:
            members = np.sort(rng.choice(members, size=max_points, replace=False))
        p = xyz[members]
        cx, cy = grid.cell_center(uniq[s] // grid.nx, uniq[s] % grid.nx)
        n = len(members)
        feats[k, :n, 0:3] = p
        feats[k, :n, 3:3 + n_extra] = extras[members]
        feats[k, :n, 3 + n_extra:6 + n_extra] = p - p.mean(axis=0)
        feats[k, :n, 6 + n_extra] = p[:, 0] - cx
        feats[k, :n, 7 + n_extra] = p[:, 1] - cy
    coords = np.stack([uniq[sel] // grid.nx, uniq[sel] % grid.nx], axis=1).astype(np.int64)
    return PillarBatch(feats, coords, kept_counts.astype(np.int64))


def collate_pillars(batches: Sequence[PillarBatch]):
    """Stack per-frame pillars into tensors plus a frame index per pillar."""
    feats = torch.from_numpy(np.concatenate([b.pillar_features for b in batches]))
    coords = torch.from_numpy(np.concatenate([b.pillar_coords for b in batches]))
    counts = torch.from_numpy(np.concatenate([b.point_counts for b in batches]))
    bidx = torch.cat([torch.full((len(b),), i, dtype=torch.long) for i, b in enumerate(batches)])
    return feats, coords, counts, bidx


class PillarFeatureNet(nn.Module):
    """Shared per-point linear layer + ReLU, max-pooled over valid points."""

    def __init__(self, in_channels: int, out_channels: int = 64):
        super().__init__()
        self.linear = nn.Linear(in_channels, out_channels)
        self.out_channels = out_channels

    def forward(self, features: torch.Tensor, point_counts: torch.Tensor) -> torch.Tensor:
        x = torch.relu(self.linear(features))
        mask = torch.arange(features.shape[1], device=features.device)[None, :] < point_counts[:, None]
        x = x.masked_fill(~mask[..., None], float("-inf"))
        return x.max(dim=1).values


def scatter_pillars(features: torch.Tensor, coords, grid_shape: tuple[int, int], *,
                    batch_index=None, batch_size: int = 1) -> torch.Tensor:
    """Place pillar features on the dense BEV canvas; empty cells stay zero."""
    ny, nx = grid_shape
    coords = torch.as_tensor(coords, dtype=torch.long)
    flat = coords[:, 0] * nx + coords[:, 1]
    nb = 1
    if batch_index is not None:
        flat = flat + torch.as_tensor(batch_index, dtype=torch.long) * (ny * nx)
        nb = batch_size
    if flat.numel() != torch.unique(flat).numel():
        raise ValueError("duplicate pillar coordinates")
    if flat.numel() and (coords.min() < 0 or coords[:, 0].max() >= ny or coords[:, 1].max() >= nx):
        raise ValueError("pillar coordinates outside the grid")
    canvas = features.new_zeros(nb * ny * nx, features.shape[1])
    canvas = canvas.index_copy(0, flat, features)
    canvas = canvas.view(nb, ny, nx, -1).permute(0, 3, 1, 2).contiguous()
    return canvas if batch_index is not None else canvas[0]


def norm2d(channels: int) -> nn.GroupNorm:
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


def _conv_block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), norm2d(cout), nn.ReLU())


class SecondFPN(nn.Module):
    """Strided conv stages followed by an upsample-and-concat neck.

    Every stage output is brought to the resolution of the first stage, so
    the output stride equals ``strides[0]``.
    """

    def __init__(self, in_channels: int, stage_channels=(64, 128), strides=(2, 2),
                 layers=(1, 1), up_channels=(64, 64)):
        super().__init__()
        self.stages = nn.ModuleList()
        self.ups = nn.ModuleList()
        cin = in_channels
        for cout, s, n in zip(stage_channels, strides, layers):
            blocks = [_conv_block(cin, cout, s)] + [_conv_block(cout, cout) for _ in range(n)]
            self.stages.append(nn.Sequential(*blocks))
            cin = cout
        self.output_stride = strides[0]
        cum = np.cumprod(strides)
        for cout, c_up, f in zip(stage_channels, up_channels, cum // strides[0]):
            f = int(f)
            if f == 1:
                up = nn.Conv2d(cout, c_up, 1, bias=False)
            else:
                up = nn.ConvTranspose2d(cout, c_up, f, stride=f, bias=False)
            self.ups.append(nn.Sequential(up, norm2d(c_up), nn.ReLU()))
        self.out_channels = int(sum(up_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = []
        for stage, up in zip(self.stages, self.ups):
            x = stage(x)
            outs.append(up(x))
        return torch.cat(outs, dim=1)


class RadarBEVEncoder(nn.Module):
    """PillarFeatureNet -> scatter -> SECOND/FPN; output at half the grid resolution."""

    def __init__(self, schema: RadarSchema, grid: BEVGridSpec, pillar_channels: int = 64,
                 stage_channels=(64, 128), up_channels=(64, 64), layers=(1, 1)):
        super().__init__()
        self.grid = grid
        self.pfn = PillarFeatureNet(8 + schema.num_extra, pillar_channels)
        self.backbone = SecondFPN(pillar_channels, stage_channels, (2, 2), layers, up_channels)
        self.out_channels = self.backbone.out_channels

    def forward(self, pillars: Sequence[PillarBatch]) -> torch.Tensor:
        feats, coords, counts, bidx = collate_pillars(pillars)
        dtype = self.pfn.linear.weight.dtype
        pf = self.pfn(feats.to(dtype), counts)
        canvas = scatter_pillars(pf, coords, self.grid.grid_shape, batch_index=bidx,
                                 batch_size=len(pillars))
        return self.backbone(canvas)

    def encode_pseudo_image(self, pseudo_image: torch.Tensor) -> torch.Tensor:
        return self.backbone(pseudo_image)
