"""Camera projection, frustum construction and BEV splat pooling.

Frames used throughout the package:

* ego / radar frame: x forward, y left, z up (meters)
* camera frame: x right, y down, z forward (meters)
* image plane: u to the right, v down (pixels); pixel ``k`` spans ``[k, k+1)``

A camera's extrinsics map ego coordinates into the camera frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import torch

__all__ = [
    "CameraModel",
    "BEVGridSpec",
    "DepthBinSpec",
    "GeometryError",
    "project_to_image",
    "unproject_from_image",
    "build_frustum",
    "bev_cell_index",
    "splat_to_bev",
    "default_extrinsics",
]


class GeometryError(ValueError):
    """Raised for invalid geometric inputs or configurations."""


# rotation taking ego axes (fwd, left, up) to camera axes (right, down, fwd)
_EGO_TO_CAM_ROT = np.array(
    [[0.0, -1.0, 0.0],
     [0.0, 0.0, -1.0],
     [1.0, 0.0, 0.0]]
)


def default_extrinsics(camera_offset: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Forward-looking camera placed at ``camera_offset`` in the ego frame."""
    T = np.eye(4)
    T[:3, :3] = _EGO_TO_CAM_ROT
    T[:3, 3] = -_EGO_TO_CAM_ROT @ np.asarray(camera_offset, dtype=np.float64)
    return T


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray
    extrinsics: np.ndarray
    image_size: tuple[int, int]  # (height, width)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        T = np.asarray(self.extrinsics, dtype=np.float64)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", T)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if K.shape != (3, 3) or T.shape != (4, 4):
            raise GeometryError("intrinsics must be 3x3 and extrinsics 4x4")
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(T))):
            raise GeometryError("camera parameters must be finite")
        if K[2, 2] != 1.0 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("intrinsics need K[2,2] == 1 and positive focal lengths")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6, rtol=0):
            raise GeometryError("extrinsics rotation block is not orthonormal")
        if min(self.image_size) <= 0:
            raise GeometryError("image_size must be strictly positive")

    @classmethod
    def simple(cls, focal: float, image_size: tuple[int, int],
               principal: tuple[float, float] | None = None,
               camera_offset: Sequence[float] = (0.0, 0.0, 0.0)) -> "CameraModel":
        """Pinhole camera looking along ego +x; ``principal`` is (cx, cy)."""
        h, w = image_size
        cx, cy = principal if principal is not None else (w / 2.0, h / 2.0)
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        return cls(K, default_extrinsics(camera_offset), (h, w))

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    def ego_to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.extrinsics[:3, :3].T + self.extrinsics[:3, 3]

    def camera_to_ego(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        R, t = self.extrinsics[:3, :3], self.extrinsics[:3, 3]
        return (pts - t) @ R

    def scaled(self, scale: float, image_size: tuple[int, int] | None = None) -> "CameraModel":
        """Camera seen through an image resized by ``scale``."""
        K = self.intrinsics.copy()
        K[:2] *= scale
        if image_size is None:
            image_size = (round(self.height * scale), round(self.width * scale))
        return CameraModel(K, self.extrinsics.copy(), image_size)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.tolist(),
            "extrinsics": self.extrinsics.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(np.array(d["intrinsics"]), np.array(d["extrinsics"]), tuple(d["image_size"]))


def _check_multiple(span: float, step: float, name: str) -> int:
    n = span / step
    k = round(n)
    if k < 1 or abs(n - k) > 1e-9 * max(1.0, k):
        raise GeometryError(f"{name} range {span} is not an integer multiple of {step}")
    return int(k)


@dataclass(frozen=True)
class BEVGridSpec:
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    cell_size: tuple[float, float]  # (dx, dy)
    grid_shape: tuple[int, int] = field(init=False)  # (ny, nx)

    def __post_init__(self):
        for name, (lo, hi) in (("x", self.x_range), ("y", self.y_range), ("z", self.z_range)):
            if not hi > lo:
                raise GeometryError(f"{name}_range needs max > min")
        dx, dy = self.cell_size
        if dx <= 0 or dy <= 0:
            raise GeometryError("cell_size must be positive")
        nx = _check_multiple(self.x_range[1] - self.x_range[0], dx, "x")
        ny = _check_multiple(self.y_range[1] - self.y_range[0], dy, "y")
        object.__setattr__(self, "grid_shape", (ny, nx))

    @property
    def ny(self) -> int:
        return self.grid_shape[0]

    @property
    def nx(self) -> int:
        return self.grid_shape[1]

    def cell_center(self, iy, ix):
        x = self.x_range[0] + (np.asarray(ix) + 0.5) * self.cell_size[0]
        y = self.y_range[0] + (np.asarray(iy) + 0.5) * self.cell_size[1]
        return x, y

    def coarsen(self, factor: int) -> "BEVGridSpec":
        """Same extent with cells ``factor`` times larger."""
        return BEVGridSpec(self.x_range, self.y_range, self.z_range,
                           (self.cell_size[0] * factor, self.cell_size[1] * factor))

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "z_range": list(self.z_range), "cell_size": list(self.cell_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "BEVGridSpec":
        return cls(tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["z_range"]),
                   tuple(d["cell_size"]))

    @classmethod
    def vod(cls) -> "BEVGridSpec":
        return cls((0.0, 51.2), (-25.6, 25.6), (-3.0, 2.0), (0.16, 0.16))

    @classmethod
    def tj4d(cls) -> "BEVGridSpec":
        return cls((0.0, 69.12), (-39.68, 39.68), (-4.0, 2.0), (0.16, 0.16))

    @classmethod
    def toy(cls) -> "BEVGridSpec":
        return cls((0.0, 25.6), (-12.8, 12.8), (-3.0, 2.0), (0.4, 0.4))


@dataclass(frozen=True)
class DepthBinSpec:
    """Uniformly spaced depth hypotheses; bin ``k`` is centred on ``depths[k]``."""

    d_min: float
    d_max: float
    num_bins: int
    spacing: Literal["uniform"] = "uniform"

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise GeometryError("depth bins need 0 < d_min < d_max")
        if self.num_bins < 2:
            raise GeometryError("need at least two depth bins")
        if self.spacing != "uniform":
            raise GeometryError(f"unsupported depth spacing {self.spacing!r}")

    @property
    def step(self) -> float:
        return (self.d_max - self.d_min) / (self.num_bins - 1)

    @property
    def depths(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.num_bins)

    @property
    def edges(self) -> np.ndarray:
        return np.concatenate([[self.d_min - self.step / 2], self.depths + self.step / 2])

    def bin_index(self, depth) -> np.ndarray:
        """Bin containing each depth, or -1 outside the outer edges."""
        d = np.asarray(depth, dtype=np.float64)
        idx = np.floor((d - self.edges[0]) / self.step).astype(np.int64)
        return np.where((idx >= 0) & (idx < self.num_bins), idx, -1)

    def to_dict(self) -> dict:
        return {"d_min": self.d_min, "d_max": self.d_max, "num_bins": self.num_bins,
                "spacing": self.spacing}

    @classmethod
    def from_dict(cls, d: dict) -> "DepthBinSpec":
        return cls(float(d["d_min"]), float(d["d_max"]), int(d["num_bins"]),
                   d.get("spacing", "uniform"))

    @classmethod
    def vod(cls) -> "DepthBinSpec":
        return cls(1.0, 51.2, 64)

    @classmethod
    def tj4d(cls) -> "DepthBinSpec":
        return cls(1.0, 69.12, 64)

    @classmethod
    def toy(cls) -> "DepthBinSpec":
        return cls(2.0, 26.0, 25)


def project_to_image(points, camera: CameraModel):
    """Project ego-frame points into the image.

    Returns ``(u, v, depth, visible)``. ``u``/``v`` are meaningless where
    ``visible`` is false (points behind the camera get NaN).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise GeometryError("point coordinates must be finite")
    cam = camera.ego_to_camera(pts)
    depth = cam[:, 2]
    uvw = cam @ camera.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(depth > 0, uvw[:, 0] / depth, np.nan)
        v = np.where(depth > 0, uvw[:, 1] / depth, np.nan)
    h, w = camera.image_size
    visible = (depth > 0) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    return u, v, depth, visible


def unproject_from_image(u, v, depth, camera: CameraModel) -> np.ndarray:
    """Ego-frame points at camera-frame ``depth`` along pixel rays (u, v)."""
    u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
    pix = np.stack([u * depth, v * depth, depth], axis=-1)
    cam = pix @ np.linalg.inv(camera.intrinsics).T
    return camera.camera_to_ego(cam)


def build_frustum(feature_size: tuple[int, int], bins: DepthBinSpec, camera: CameraModel,
                  stride: int) -> np.ndarray:
    """Ego-frame frustum points with shape (num_bins, h, w, 3).

    Feature cell (i, j) looks along the ray through the centre of image
    pixel (stride*i, stride*j), so doubling the stride keeps every other ray.
    """
    h, w = feature_size
    if stride * h > camera.height or stride * w > camera.width:
        raise GeometryError(f"feature size {feature_size} x stride {stride} exceeds image "
                            f"{camera.image_size}")
    us = stride * np.arange(w) + 0.5
    vs = stride * np.arange(h) + 0.5
    d = bins.depths
    D, V, U = np.meshgrid(d, vs, us, indexing="ij")
    return unproject_from_image(U, V, D, camera)


def bev_cell_index(points, grid: BEVGridSpec):
    """Floor-binning of (x, y) onto the grid with half-open [min, max) cells.

    Returns ``(iy, ix, valid)``; indices are -1 where ``valid`` is false.
    """
    p = np.asarray(points, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    (x0, x1), (y0, y1) = grid.x_range, grid.y_range
    valid = (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    with np.errstate(invalid="ignore"):
        ix = np.floor((x - x0) / grid.cell_size[0])
        iy = np.floor((y - y0) / grid.cell_size[1])
    # x < x1 can still round up to nx
    ix = np.where(valid, np.clip(ix, 0, grid.nx - 1), -1).astype(np.int64)
    iy = np.where(valid, np.clip(iy, 0, grid.ny - 1), -1).astype(np.int64)
    return iy, ix, valid


def _splat_ranks(coords: np.ndarray, grid: BEVGridSpec, batch_index: np.ndarray | None):
    iy, ix, valid = bev_cell_index(coords, grid)
    z = coords[:, 2]
    valid &= (z >= grid.z_range[0]) & (z < grid.z_range[1])
    rank = iy * grid.nx + ix
    if batch_index is not None:
        rank = rank + np.asarray(batch_index, dtype=np.int64) * (grid.ny * grid.nx)
    return rank, valid


def splat_to_bev(features: torch.Tensor, coords, grid: BEVGridSpec, *,
                 batch_index=None, batch_size: int = 1,
                 mode: Literal["sorted", "fast"] = "sorted") -> torch.Tensor:
    """Sum-pool per-point features into BEV cells.

    ``features`` is (P, C), ``coords`` (P, 3) ego-frame points. Points outside
    the grid (x, y or z) are dropped. Output is (C, ny, nx), or
    (batch_size, C, ny, nx) when ``batch_index`` is given.

    ``mode="sorted"`` reduces in a canonical order (cell, then point values),
    which makes the result bit-identical under any permutation of the inputs.
    ``mode="fast"`` accumulates in input order.
    """
    if features.dim() != 2 or features.shape[1] < 1:
        raise GeometryError("features must be (P, C) with C >= 1")
    coords_np = coords.detach().cpu().numpy() if torch.is_tensor(coords) else np.asarray(coords)
    coords_np = coords_np.reshape(-1, 3)
    if coords_np.shape[0] != features.shape[0]:
        raise GeometryError("features and coords disagree in point count")
    C = features.shape[1]
    ny, nx = grid.grid_shape
    nb = batch_size if batch_index is not None else 1
    rank, valid = _splat_ranks(coords_np, grid, batch_index)
    keep = np.nonzero(valid)[0]
    rank = rank[keep]
    if mode == "sorted" and keep.size:
        vals = features.detach()[torch.from_numpy(keep)].cpu().numpy()
        # np.lexsort sorts by the last key first
        keys = [vals[:, c] for c in range(C - 1, -1, -1)]
        keys += [coords_np[keep, 2], coords_np[keep, 1], coords_np[keep, 0], rank]
        order = np.lexsort(keys)
        keep, rank = keep[order], rank[order]
    elif mode not in ("sorted", "fast"):
        raise GeometryError(f"unknown splat mode {mode!r}")
    out = features.new_zeros(nb * ny * nx, C)
    if keep.size:
        out = out.index_add(0, torch.from_numpy(rank), features[torch.from_numpy(keep)])
    out = out.view(nb, ny, nx, C).permute(0, 3, 1, 2).contiguous()
    return out if batch_index is not None else out[0]
