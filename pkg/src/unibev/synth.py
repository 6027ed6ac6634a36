"""Deterministic synthetic scenes: boxes on a ground plane, radar returns from
their sensor-facing surfaces, and a flat-shaded camera rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image, ImageDraw

from .boxes import DetectionSet, pairwise_iou, wrap_angle
from .geometry import BEVGridSpec, CameraModel, project_to_image
from .radar import SCHEMAS, RadarPointCloud, RadarSchema

__all__ = [
    "ClassSpec",
    "SceneConfig",
    "Frame",
    "generate_frame",
    "generate_frames",
    "box_faces",
    "points_in_box",
    "default_classes",
]


@dataclass(frozen=True)
class ClassSpec:
    name: str
    dims_mean: tuple[float, float, float]  # (l, w, h)
    dims_std: tuple[float, float, float]
    rcs_mean: float  # dBsm
    rcs_std: float
    speed_max: float  # m/s
    color: tuple[int, int, int]


def default_classes(schema: str = "vod") -> tuple[ClassSpec, ...]:
    classes = (
        ClassSpec("car", (3.9, 1.7, 1.5), (0.2, 0.08, 0.08), 8.0, 4.0, 8.0, (200, 40, 40)),
        ClassSpec("pedestrian", (0.7, 0.6, 1.75), (0.06, 0.05, 0.08), -3.0, 4.0, 1.5, (40, 180, 60)),
        ClassSpec("cyclist", (1.8, 0.6, 1.7), (0.1, 0.05, 0.08), 1.0, 4.0, 5.0, (50, 80, 210)),
    )
    if schema == "tj4d":
        classes += (ClassSpec("truck", (7.0, 2.5, 3.0), (0.4, 0.1, 0.15), 14.0, 4.0, 6.0,
                              (220, 180, 40)),)
    return classes


def _toy_camera() -> CameraModel:
    return CameraModel.simple(120.0, (128, 192))


@dataclass
class SceneConfig:
    schema: str = "vod"
    classes: tuple[ClassSpec, ...] | None = None  # None: the schema's default classes
    objects_per_frame: tuple[int, int] = (2, 6)
    points_per_object: tuple[int, int] = (4, 12)
    dropout: float = 0.1
    clutter_fraction: float = 0.1
    clutter_rcs: tuple[float, float] = (-10.0, 3.0)
    surface_noise: float = 0.05
    ground_z: float = -1.5
    place_x: tuple[float, float] = (5.0, 23.0)
    edge_margin: float = 1.0
    static_fraction: float = 0.3
    ego_velocity: tuple[float, float] = (0.0, 0.0)
    illumination: float = 1.0  # global image brightness factor; < 1 renders dim scenes
    max_retries: int = 200
    camera: CameraModel = field(default_factory=_toy_camera)
    grid: BEVGridSpec = field(default_factory=BEVGridSpec.toy)
    seed: int = 0

    def __post_init__(self):
        if self.schema not in SCHEMAS:
            raise ValueError(f"unknown radar schema {self.schema!r}")
        if self.classes is None:
            self.classes = default_classes(self.schema)
        lo, hi = self.objects_per_frame
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_frame must be a non-empty range")
        lo, hi = self.points_per_object
        if not 1 <= lo <= hi:
            raise ValueError("points_per_object must be a non-empty range")
        if not 0 < self.illumination <= 1:
            raise ValueError("illumination must lie in (0, 1]")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        for c in self.classes:
            if min(c.dims_std) < 0 or c.rcs_std < 0 or min(c.dims_mean) <= 0:
                raise ValueError(f"invalid distribution for class {c.name}")
        if not self.place_x[0] < self.place_x[1]:
            raise ValueError("place_x must be a non-empty range")

    @property
    def radar_schema(self) -> RadarSchema:
        return SCHEMAS[self.schema]

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__
             if k not in ("camera", "grid", "classes")}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d["classes"] = [asdict(c) for c in self.classes]
        d["camera"] = self.camera.to_dict()
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        classes = tuple(ClassSpec(c["name"], tuple(c["dims_mean"]), tuple(c["dims_std"]),
                                  c["rcs_mean"], c["rcs_std"], c["speed_max"], tuple(c["color"]))
                        for c in d.pop("classes"))
        camera = CameraModel.from_dict(d.pop("camera"))
        grid = BEVGridSpec.from_dict(d.pop("grid"))
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(classes=classes, camera=camera, grid=grid, **d)


@dataclass
class Frame:
    frame_id: str
    image: np.ndarray  # (H, W, 3) uint8
    radar: RadarPointCloud
    radar_owner: np.ndarray  # (P,) int32 object index, -1 for clutter
    gt: DetectionSet
    velocities: np.ndarray  # (K, 2) m/s in the ego frame
    camera: CameraModel
    meta: dict = field(default_factory=dict)

    def image_float(self) -> np.ndarray:
        """(3, H, W) float32 in [0, 1]."""
        return np.ascontiguousarray(self.image.transpose(2, 0, 1), dtype=np.float32) / np.float32(255)


def box_faces(box: np.ndarray):
    """Six faces as (centre, outward normal, axis_u, axis_v) with half-extents folded into axes."""
    x, y, z, l, w, h, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    fwd = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    ctr = np.array([x, y, z])
    half = {"fwd": l / 2, "left": w / 2, "up": h / 2}
    axes = {"fwd": fwd, "left": left, "up": up}
    faces = []
    for name, other in (("fwd", ("left", "up")), ("left", ("fwd", "up")), ("up", ("fwd", "left"))):
        for sign in (1.0, -1.0):
            n = sign * axes[name]
            faces.append((ctr + n * half[name], n, axes[other[0]] * half[other[0]],
                          axes[other[1]] * half[other[1]]))
    return faces


def points_in_box(points: np.ndarray, box: np.ndarray, margin: float = 0.0) -> np.ndarray:
    x, y, z, l, w, h, yaw = box
    d = np.asarray(points, dtype=np.float64) - np.array([x, y, z])
    c, s = math.cos(yaw), math.sin(yaw)
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    return ((np.abs(lx) <= l / 2 + margin) & (np.abs(ly) <= w / 2 + margin)
            & (np.abs(d[:, 2]) <= h / 2 + margin))


def _place_objects(cfg: SceneConfig, rng: np.random.Generator, count: int):
    cam = cfg.camera
    half_fov = math.atan2(cam.width / 2, cam.intrinsics[0, 0])
    (x0, x1), (y0, y1) = cfg.grid.x_range, cfg.grid.y_range
    boxes, labels = [], []
    for _ in range(count):
        for _attempt in range(cfg.max_retries):
            k = int(rng.integers(len(cfg.classes)))
            spec = cfg.classes[k]
            l, w, h = np.maximum(rng.normal(spec.dims_mean, spec.dims_std), 0.2)
            x = rng.uniform(*cfg.place_x)
            ymax = x * math.tan(half_fov) * 0.85
            y = rng.uniform(-ymax, ymax)
            yaw = float(wrap_angle(rng.uniform(-math.pi, math.pi)))
            box = np.array([x, y, cfg.ground_z + h / 2, l, w, h, yaw])
            r = 0.5 * math.hypot(l, w)
            m = cfg.edge_margin
            if not (x0 + m + r <= x <= x1 - m - r and y0 + m + r <= y <= y1 - m - r):
                continue
            if boxes:
                # strict: no BEV overlap, plus a small gap
                grown = box.copy()
                grown[3:5] += 0.3
                if pairwise_iou(grown[None], np.array(boxes)).max() > 0:
                    continue
            boxes.append(box)
            labels.append(k)
            break
    return np.array(boxes).reshape(-1, 7), np.array(labels, dtype=np.int64)


def _sample_surface(box: np.ndarray, n: int, rng: np.random.Generator, noise: float):
    sensor = np.zeros(3)
    faces = [f for f in box_faces(box) if np.dot(f[1], sensor - f[0]) > 0 and f[1][2] >= 0]
    areas = np.array([4 * np.linalg.norm(np.cross(a, b)) for _, _, a, b in faces])
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.stack([faces[i][0] + uv[j, 0] * faces[i][2] + uv[j, 1] * faces[i][3]
                    for j, i in enumerate(pick)])
    pts = pts + rng.normal(0, noise, size=pts.shape)
    # keep jittered points inside the box grown by 0.1 m
    x, y, z, l, w, h, yaw = box
    c, s = math.cos(yaw), math.sin(yaw)
    d = pts - box[:3]
    lx, ly = d[:, 0] * c + d[:, 1] * s, -d[:, 0] * s + d[:, 1] * c
    lx = np.clip(lx, -l / 2 - 0.09, l / 2 + 0.09)
    ly = np.clip(ly, -w / 2 - 0.09, w / 2 + 0.09)
    lz = np.clip(d[:, 2], -h / 2 - 0.09, h / 2 + 0.09)
    return box[:3] + np.stack([lx * c - ly * s, lx * s + ly * c, lz], 1)


def _radar_extras(schema: str, pts: np.ndarray, rcs: np.ndarray, vel: np.ndarray,
                  ego_vel: np.ndarray) -> np.ndarray:
    rng_ = np.linalg.norm(pts, axis=1)
    los = pts / np.maximum(rng_, 1e-9)[:, None]
    if schema == "vod":
        v_rel = np.einsum("ij,ij->i", vel - ego_vel, los)
        v_abs = np.einsum("ij,ij->i", vel, los)
        return np.stack([rcs, v_rel, v_abs, np.zeros(len(pts))], 1)
    alpha = np.arctan2(pts[:, 1], pts[:, 0])
    beta = np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1]))
    return np.stack([rng_, rcs, alpha, beta], 1)


def _render(cfg: SceneConfig, boxes: np.ndarray, labels: np.ndarray) -> np.ndarray:
    cam = cfg.camera
    H, W = cam.image_size
    img = np.zeros((H, W, 3), np.float64)
    # sky above the horizon, ground below shaded by distance
    rows = np.arange(H) + 0.5
    fy, cy = cam.intrinsics[1, 1], cam.intrinsics[1, 2]
    cam_h = cam.camera_to_ego(np.zeros((1, 3)))[0, 2] - cfg.ground_z
    with np.errstate(divide="ignore"):
        dist = np.where(rows > cy, fy * cam_h / (rows - cy), np.inf)
    ground = np.clip(0.55 - 0.012 * np.minimum(dist, 30.0), 0.15, 0.6)
    for r in range(H):
        img[r] = (ground[r],) * 3 if np.isfinite(dist[r]) else (0.70, 0.80, 0.92)
    pil = Image.fromarray(np.round(img * 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    cam_pos = cam.camera_to_ego(np.zeros((1, 3)))[0]
    light = np.array([0.3, 0.5, 0.8])
    light /= np.linalg.norm(light)
    order = np.argsort(-np.hypot(boxes[:, 0], boxes[:, 1]))
    for i in order:
        color = np.array(cfg.classes[labels[i]].color, dtype=np.float64)
        faces = [f for f in box_faces(boxes[i]) if np.dot(f[1], cam_pos - f[0]) > 0]
        faces.sort(key=lambda f: -np.linalg.norm(f[0] - cam_pos))
        for ctr, n, a, b in faces:
            quad = np.array([ctr + a + b, ctr - a + b, ctr - a - b, ctr + a - b])
            u, v, depth, _ = project_to_image(quad, cam)
            if np.any(depth <= 0.1):
                continue
            shade = 0.55 + 0.45 * max(float(np.dot(n, light)), 0.0)
            fill = tuple(int(round(c)) for c in np.clip(color * shade, 0, 255))
            draw.polygon([(float(x), float(y)) for x, y in zip(u, v)], fill=fill)
    out = np.asarray(pil, dtype=np.float64) * cfg.illumination
    return np.round(out).astype(np.uint8)


def generate_frame(cfg: SceneConfig, frame_seed: int, frame_id: str | None = None) -> Frame:
    """Fully determined by ``(cfg, frame_seed)``."""
    rng = np.random.default_rng([cfg.seed, frame_seed])
    requested = int(rng.integers(cfg.objects_per_frame[0], cfg.objects_per_frame[1] + 1))
    boxes, labels = _place_objects(cfg, rng, requested)
    K = len(boxes)
    velocities = np.zeros((K, 2))
    ego_vel = np.array([*cfg.ego_velocity, 0.0])
    pts_all, rcs_all, vel_all, owner = [], [], [], []
    for i in range(K):
        spec = cfg.classes[labels[i]]
        if rng.uniform() >= cfg.static_fraction:
            speed = rng.uniform(0.0, spec.speed_max)
            velocities[i] = speed * np.array([math.cos(boxes[i, 6]), math.sin(boxes[i, 6])])
        n = int(rng.integers(cfg.points_per_object[0], cfg.points_per_object[1] + 1))
        pts = _sample_surface(boxes[i], n, rng, cfg.surface_noise)
        keep = rng.uniform(size=n) >= cfg.dropout
        pts = pts[keep]
        pts_all.append(pts)
        rcs_all.append(rng.normal(spec.rcs_mean, spec.rcs_std, size=len(pts)))
        vel_all.append(np.tile(np.array([*velocities[i], 0.0]), (len(pts), 1)))
        owner.append(np.full(len(pts), i, np.int32))
    n_obj_pts = sum(len(p) for p in pts_all)
    n_clutter = int(round(cfg.clutter_fraction * n_obj_pts))
    (x0, x1), (y0, y1) = cfg.grid.x_range, cfg.grid.y_range
    clutter = np.stack([rng.uniform(x0, x1, n_clutter), rng.uniform(y0, y1, n_clutter),
                        np.full(n_clutter, cfg.ground_z)], 1)
    pts_all.append(clutter)
    rcs_all.append(rng.normal(cfg.clutter_rcs[0], cfg.clutter_rcs[1], size=n_clutter))
    vel_all.append(np.zeros((n_clutter, 3)))
    owner.append(np.full(n_clutter, -1, np.int32))

    # extras are derived from the stored float32 coordinates so they stay consistent
    pts = np.concatenate(pts_all).reshape(-1, 3).astype(np.float32).astype(np.float64)
    extras = _radar_extras(cfg.schema, pts, np.concatenate(rcs_all), np.concatenate(vel_all).reshape(-1, 3),
                           ego_vel)
    cloud = RadarPointCloud(pts.astype(np.float32), extras.astype(np.float32), cfg.radar_schema)
    image = _render(cfg, boxes, labels)
    fid = frame_id if frame_id is not None else f"{frame_seed:06d}"
    meta = {"requested_objects": requested, "placed_objects": K, "frame_seed": int(frame_seed)}
    return Frame(fid, image, cloud, np.concatenate(owner), DetectionSet(boxes, labels, None, fid),
                 velocities, cfg.camera, meta)


def generate_frames(cfg: SceneConfig, count: int, start: int = 0) -> list[Frame]:
    return [generate_frame(cfg, start + i) for i in range(count)]
