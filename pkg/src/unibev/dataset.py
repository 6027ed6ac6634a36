"""On-disk dataset layout and loaders.

Layout::

    <dir>/manifest.json
    <dir>/frames/<id>.img   b"UBIM", uint32 height, width, channels, then uint8 pixels (HWC)
    <dir>/frames/<id>.rad   b"UBRD", uint32 point count, uint16 schema-name length,
                            schema name (utf-8), uint32 extra width N,
                            float32 rows [x, y, z, extras...] (count x (3 + N)),
                            int32 owner id per point (-1 = clutter)
    <dir>/frames/<id>.gt    b"UBGT", uint32 box count K, float64 boxes (K x 7),
                            int32 labels (K), float64 velocities (K x 2)

All numbers are little-endian. The manifest stores schema, grid, scene
config and, per frame, its camera and metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np

from .boxes import DetectionSet
from .geometry import CameraModel
from .radar import SCHEMAS, RadarPointCloud
from .synth import Frame

__all__ = [
    "DatasetError",
    "FrameSource",
    "DirectoryDataset",
    "write_dataset",
    "read_dataset",
    "dataset_checksum",
    "FORMAT_VERSION",
]

FORMAT_VERSION = 1


class DatasetError(Exception):
    """Malformed dataset file; names the frame and the field that failed."""

    def __init__(self, frame_id: str, field: str, message: str):
        super().__init__(f"frame {frame_id!r}, field {field!r}: {message}")
        self.frame_id = frame_id
        self.field = field


class FrameSource(Protocol):
    """Anything the pipeline can iterate frames from (synthetic or real-data readers)."""

    def __len__(self) -> int: ...

    def __getitem__(self, index: int) -> Frame: ...


class _Reader:
    def __init__(self, data: bytes, frame_id: str):
        self.data, self.pos, self.frame_id = data, 0, frame_id

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetError(self.frame_id, field,
                               f"truncated: need {n} bytes at offset {self.pos}, have "
                               f"{len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, field: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), field))

    def array(self, dtype: str, shape: tuple, field: str) -> np.ndarray:
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n, field), dtype=dtype).reshape(shape).copy()

    def magic(self, expected: bytes, field: str):
        if self.take(4, field) != expected:
            raise DatasetError(self.frame_id, field, f"bad magic, expected {expected!r}")

    def done(self, field: str):
        if self.pos != len(self.data):
            raise DatasetError(self.frame_id, field, f"{len(self.data) - self.pos} trailing bytes")


def _image_bytes(img: np.ndarray) -> bytes:
    h, w, c = img.shape
    return b"UBIM" + struct.pack("<III", h, w, c) + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def _radar_bytes(cloud: RadarPointCloud, owner: np.ndarray) -> bytes:
    name = cloud.schema.name.encode()
    rows = np.concatenate([cloud.xyz, cloud.extras], axis=1).astype("<f4")
    return (b"UBRD" + struct.pack("<I", len(cloud)) + struct.pack("<H", len(name)) + name
            + struct.pack("<I", cloud.schema.num_extra) + rows.tobytes()
            + np.asarray(owner, dtype="<i4").tobytes())


def _gt_bytes(gt: DetectionSet, velocities: np.ndarray) -> bytes:
    return (b"UBGT" + struct.pack("<I", len(gt)) + gt.boxes.astype("<f8").tobytes()
            + gt.labels.astype("<i4").tobytes() + np.asarray(velocities, "<f8").reshape(-1, 2).tobytes())


def _parse_image(data: bytes, fid: str) -> np.ndarray:
    r = _Reader(data, fid)
    r.magic(b"UBIM", "image.header")
    h, w, c = r.unpack("<III", "image.shape")
    img = r.array("u1", (h, w, c), "image.pixels")
    r.done("image")
    return img


def _parse_radar(data: bytes, fid: str):
    r = _Reader(data, fid)
    r.magic(b"UBRD", "radar.header")
    (count,) = r.unpack("<I", "radar.count")
    (nlen,) = r.unpack("<H", "radar.schema")
    name = r.take(nlen, "radar.schema").decode("utf-8", errors="replace")
    if name not in SCHEMAS:
        raise DatasetError(fid, "radar.schema", f"unknown schema {name!r}")
    (n,) = r.unpack("<I", "radar.width")
    schema = SCHEMAS[name]
    if n != schema.num_extra:
        raise DatasetError(fid, "radar.width", f"{n} extras but schema {name} has {schema.num_extra}")
    rows = r.array("<f4", (count, 3 + n), "radar.points")
    owner = r.array("<i4", (count,), "radar.owner")
    r.done("radar")
    cloud = RadarPointCloud(rows[:, :3].astype(np.float32), rows[:, 3:].astype(np.float32), schema)
    return cloud, owner.astype(np.int32)


def _parse_gt(data: bytes, fid: str):
    r = _Reader(data, fid)
    r.magic(b"UBGT", "gt.header")
    (k,) = r.unpack("<I", "gt.count")
    boxes = r.array("<f8", (k, 7), "gt.boxes").astype(np.float64)
    labels = r.array("<i4", (k,), "gt.labels").astype(np.int64)
    vel = r.array("<f8", (k, 2), "gt.velocities").astype(np.float64)
    r.done("gt")
    return DetectionSet(boxes, labels, None, fid), vel


def write_dataset(frames: Sequence[Frame], directory, scene_config=None, extra: dict | None = None) -> Path:
    """Write frames plus manifest; output bytes depend only on the inputs."""
    root = Path(directory)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    entries = []
    for f in frames:
        base = root / "frames" / f.frame_id
        base.with_suffix(".img").write_bytes(_image_bytes(f.image))
        base.with_suffix(".rad").write_bytes(_radar_bytes(f.radar, f.radar_owner))
        base.with_suffix(".gt").write_bytes(_gt_bytes(f.gt, f.velocities))
        entries.append({"id": f.frame_id, "camera": f.camera.to_dict(), "meta": f.meta})
    manifest = {
        "format_version": FORMAT_VERSION,
        "schema": frames[0].radar.schema.name if frames else None,
        "num_frames": len(frames),
        "scene_config": scene_config.to_dict() if scene_config is not None else None,
        "frames": entries,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _load_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError("-", "manifest", f"missing {path}") from None
    except json.JSONDecodeError as e:
        raise DatasetError("-", "manifest", f"invalid JSON: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetError("-", "manifest.format_version",
                           f"unsupported version {manifest.get('format_version')!r}")
    return manifest


class DirectoryDataset:
    """Lazy reader over a dataset directory; satisfies :class:`FrameSource`."""

    def __init__(self, directory):
        self.root = Path(directory)
        self.manifest = _load_manifest(self.root)
        self.entries = self.manifest["frames"]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Frame]:
        for i in range(len(self)):
            yield self[i]

    def _read(self, fid: str, suffix: str, field: str) -> bytes:
        path = self.root / "frames" / f"{fid}{suffix}"
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise DatasetError(fid, field, f"missing file {path.name}") from None

    def __getitem__(self, index: int) -> Frame:
        e = self.entries[index]
        fid = e["id"]
        try:
            camera = CameraModel.from_dict(e["camera"])
        except (KeyError, ValueError, TypeError) as err:
            raise DatasetError(fid, "camera", str(err)) from None
        image = _parse_image(self._read(fid, ".img", "image"), fid)
        cloud, owner = _parse_radar(self._read(fid, ".rad", "radar"), fid)
        gt, vel = _parse_gt(self._read(fid, ".gt", "gt"), fid)
        return Frame(fid, image, cloud, owner, gt, vel, camera, dict(e.get("meta", {})))


def read_dataset(directory) -> list[Frame]:
    return list(DirectoryDataset(directory))


def dataset_checksum(directory) -> str:
    """SHA-256 over every file of the dataset in sorted path order."""
    root = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
