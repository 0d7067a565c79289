"""Posed camera frames, manifests and ray generation.

Manifest layout (JSON)::

    {
      "version": 1,
      "role": "train" | "prior" | "test",
      "feature_dim": 64,
      "near": 0.1, "far": 200.0,             # optional
      "bounds": [[xmin, ymin, zmin], [xmax, ymax, zmax]],   # optional
      "frames": [
        {"id": 0, "video_id": 0,
         "world_from_camera": [[...4 floats...] x 4],   # row-major
         "intrinsics": {"fx":..., "fy":..., "cx":..., "cy":..., "width":..., "height":...},
         "rgb": "rgb/0000.png",              # 8-bit RGB PNG
         "feature_map": "feat/0000.bin",     # see read_feature_map
         "dynamic_mask": "mask/0000_dyn.png",
         "sky_mask": "mask/0000_sky.png"}
      ]
    }

Paths are relative to the manifest's directory. Camera frame convention is
x-right, y-down, z-forward; pixel centres sit at integer (col, row).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Literal

import numpy as np
from PIL import Image

from .errors import ManifestError

FEATURE_MAGIC = b"FEAT"
MANIFEST_VERSION = 1
DEFAULT_NEAR = 0.1
DEFAULT_FAR = 200.0

Role = Literal["train", "prior", "test"]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("pose matrix must be 4x4")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class CameraFrame:
    video_id: int
    pose: Pose
    intrinsics: CameraIntrinsics
    rgb: np.ndarray
    feature_map: np.ndarray
    dynamic_mask: np.ndarray
    sky_mask: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        checks = {
            "rgb": (self.rgb, (h, w, 3)),
            "dynamic_mask": (self.dynamic_mask, (h, w)),
            "sky_mask": (self.sky_mask, (h, w)),
        }
        for name, (arr, shape) in checks.items():
            if arr.shape != shape:
                raise ManifestError(f"shape mismatch: {name} is {arr.shape}, expected {shape}", self.frame_id)
        if self.feature_map.ndim != 3 or self.feature_map.shape[:2] != (h, w):
            raise ManifestError(
                f"shape mismatch: feature_map is {self.feature_map.shape}, expected ({h}, {w}, D)",
                self.frame_id,
            )
        self.dynamic_mask = self.dynamic_mask.astype(bool)
        self.sky_mask = self.sky_mask.astype(bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width

    @property
    def feature_dim(self) -> int:
        return self.feature_map.shape[-1]


@dataclass
class DatasetManifest:
    feature_dim: int = 64
    frames: list[CameraFrame] = field(default_factory=list)
    role: Role = "train"
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR
    bounds: np.ndarray | None = None
    source: Path | None = None

    def __post_init__(self):
        if self.role not in ("train", "prior", "test"):
            raise ManifestError(f"unknown role {self.role!r}")
        if not 0 <= self.near < self.far:
            raise ManifestError("need 0 <= near < far")
        for fr in self.frames:
            if fr.feature_dim != self.feature_dim:
                raise ManifestError(
                    f"feature-dim mismatch: {fr.feature_dim} != {self.feature_dim}", fr.frame_id
                )

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest(
            self.feature_dim, [self.frames[i] for i in indices], self.role,
            self.near, self.far, self.bounds, self.source,
        )

    def camera_positions(self) -> np.ndarray:
        return np.array([f.pose.translation for f in self.frames]).reshape(-1, 3)

    def video_ids(self) -> list[int]:
        return sorted({f.video_id for f in self.frames})


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    video_id: int
    pixel: tuple[int, int]
    near: float
    far: float


# ---------------------------------------------------------------- file formats


def write_feature_map(path, fmap: np.ndarray) -> None:
    """Raw little-endian float32 with a 16-byte header: magic, H, W, D (u32 each)."""
    fmap = np.asarray(fmap, dtype="<f4")
    h, w, d = fmap.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<3I", h, w, d))
        fh.write(np.ascontiguousarray(fmap).tobytes())


def read_feature_header(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature map")
    return struct.unpack("<3I", head[4:])


def read_feature_map(path) -> np.ndarray:
    h, w, d = read_feature_header(path)
    data = np.fromfile(path, dtype="<f4", offset=16)
    if data.size != h * w * d:
        raise ValueError(f"{path}: truncated feature map")
    return data.reshape(h, w, d).astype(np.float32)


def _read_png(path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))


def _write_png(path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path)


def rgb_to_u8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- manifests


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    root = path.parent
    feature_dim = int(doc.get("feature_dim", 64))
    frames = []
    for i, rec in enumerate(doc.get("frames", [])):
        fid = int(rec.get("id", i))
        try:
            intr = CameraIntrinsics(**rec["intrinsics"])
            pose = Pose.from_matrix(rec["world_from_camera"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad camera record: {exc}", fid) from None
        files = {}
        for key in ("rgb", "feature_map", "dynamic_mask", "sky_mask"):
            if key not in rec:
                raise ManifestError(f"missing {key} entry", fid)
            p = root / rec[key]
            if not p.is_file():
                raise ManifestError(f"missing file {p}", fid)
            files[key] = p
        try:
            h, w, d = read_feature_header(files["feature_map"])
        except ValueError as exc:
            raise ManifestError(str(exc), fid) from None
        if d != feature_dim:
            raise ManifestError(f"feature-dim mismatch: {d} != {feature_dim}", fid)
        if (h, w) != (intr.height, intr.width):
            raise ManifestError(f"shape mismatch: feature map {h}x{w}", fid)
        try:
            fmap = read_feature_map(files["feature_map"])
        except ValueError as exc:
            raise ManifestError(str(exc), fid) from None
        rgb = _read_png(files["rgb"], "RGB").astype(np.float32) / 255.0
        dyn = _read_png(files["dynamic_mask"], "L") > 127
        sky = _read_png(files["sky_mask"], "L") > 127
        frames.append(CameraFrame(int(rec.get("video_id", 0)), pose, intr, rgb, fmap, dyn, sky, fid))
    bounds = doc.get("bounds")
    return DatasetManifest(
        feature_dim=feature_dim,
        frames=frames,
        role=doc.get("role", "train"),
        near=float(doc.get("near", DEFAULT_NEAR)),
        far=float(doc.get("far", DEFAULT_FAR)),
        bounds=None if bounds is None else np.asarray(bounds, dtype=np.float64),
        source=path,
    )


def write_manifest(manifest: DatasetManifest, path) -> Path:
    """Write the manifest JSON plus its image assets next to it."""
    path = Path(path)
    root = path.parent
    for sub in ("rgb", "feat", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, fr in enumerate(manifest.frames):
        stem = f"{i:05d}"
        rel = {
            "rgb": f"rgb/{stem}.png",
            "feature_map": f"feat/{stem}.bin",
            "dynamic_mask": f"mask/{stem}_dyn.png",
            "sky_mask": f"mask/{stem}_sky.png",
        }
        _write_png(root / rel["rgb"], rgb_to_u8(fr.rgb))
        write_feature_map(root / rel["feature_map"], fr.feature_map)
        _write_png(root / rel["dynamic_mask"], fr.dynamic_mask.astype(np.uint8) * 255)
        _write_png(root / rel["sky_mask"], fr.sky_mask.astype(np.uint8) * 255)
        records.append(
            {
                "id": fr.frame_id,
                "video_id": fr.video_id,
                "world_from_camera": fr.pose.matrix().tolist(),
                "intrinsics": fr.intrinsics.to_dict(),
                **rel,
            }
        )
    doc = {
        "version": MANIFEST_VERSION,
        "role": manifest.role,
        "feature_dim": manifest.feature_dim,
        "near": manifest.near,
        "far": manifest.far,
        "frames": records,
    }
    if manifest.bounds is not None:
        doc["bounds"] = np.asarray(manifest.bounds).tolist()
    path.write_text(json.dumps(doc, indent=1))
    return path


# ---------------------------------------------------------------- rays


def camera_directions(intr: CameraIntrinsics, rows, cols) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    d = np.stack(
        [(cols - intr.cx) / intr.fx, (rows - intr.cy) / intr.fy, np.ones_like(cols)], axis=-1
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def frame_rays(frame: CameraFrame, rows, cols) -> tuple[np.ndarray, np.ndarray]:
    """World-frame (origins, unit directions) for arrays of pixel indices."""
    d_cam = camera_directions(frame.intrinsics, rows, cols)
    r = frame.pose.rotation
    # elementwise rotation keeps results independent of batch shape
    d = d_cam[..., 0:1] * r[:, 0] + d_cam[..., 1:2] * r[:, 1] + d_cam[..., 2:3] * r[:, 2]
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(frame.pose.translation, d.shape).copy()
    return o, d


def pixel_to_ray(frame: CameraFrame, row: int, col: int, near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> Ray:
    h, w = frame.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside {h}x{w} image")
    o, d = frame_rays(frame, [row], [col])
    return Ray(o[0], d[0], frame.video_id, (int(row), int(col)), near, far)


@dataclass
class RayBatch:
    """Struct-of-arrays batch of supervised rays."""

    origins: np.ndarray
    directions: np.ndarray
    video_ids: np.ndarray
    frame_index: np.ndarray
    pixels: np.ndarray
    near: np.ndarray
    far: np.ndarray
    rgb: np.ndarray
    feature: np.ndarray
    is_sky: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)

    def __iter__(self) -> Iterator[tuple[Ray, np.ndarray, np.ndarray, bool]]:
        for i in range(len(self)):
            ray = Ray(
                self.origins[i], self.directions[i], int(self.video_ids[i]),
                (int(self.pixels[i, 0]), int(self.pixels[i, 1])), float(self.near[i]), float(self.far[i]),
            )
            yield ray, self.rgb[i], self.feature[i], bool(self.is_sky[i])


def gather_rays(manifest: DatasetManifest, frame_index, rows, cols) -> RayBatch:
    frame_index = np.asarray(frame_index, dtype=np.int64)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    n = len(frame_index)
    D = manifest.feature_dim
    origins = np.empty((n, 3))
    dirs = np.empty((n, 3))
    rgb = np.empty((n, 3), dtype=np.float32)
    feat = np.empty((n, D), dtype=np.float32)
    sky = np.empty(n, dtype=bool)
    vids = np.empty(n, dtype=np.int64)
    for fi in np.unique(frame_index):
        sel = np.nonzero(frame_index == fi)[0]
        fr = manifest.frames[fi]
        o, d = frame_rays(fr, rows[sel], cols[sel])
        origins[sel], dirs[sel] = o, d
        rgb[sel] = fr.rgb[rows[sel], cols[sel]]
        feat[sel] = fr.feature_map[rows[sel], cols[sel]]
        sky[sel] = fr.sky_mask[rows[sel], cols[sel]]
        vids[sel] = fr.video_id
    return RayBatch(
        origins, dirs, vids, frame_index, np.stack([rows, cols], axis=-1),
        np.full(n, manifest.near), np.full(n, manifest.far), rgb, feat, sky,
    )


class PixelPool:
    """Flat index over every non-dynamic pixel of a manifest, for uniform sampling."""

    def __init__(self, manifest: DatasetManifest, exclude: dict[int, np.ndarray] | None = None):
        self.manifest = manifest
        frames, rows, cols = [], [], []
        for i, fr in enumerate(manifest.frames):
            valid = ~fr.dynamic_mask
            if exclude and i in exclude:
                valid = valid & ~exclude[i]
            r, c = np.nonzero(valid)
            frames.append(np.full(len(r), i, dtype=np.int64))
            rows.append(r)
            cols.append(c)
        self.frame = np.concatenate(frames) if frames else np.zeros(0, dtype=np.int64)
        self.row = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        self.col = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.frame)

    def sample(self, batch_size: int, rng: np.random.Generator) -> RayBatch:
        if len(self) == 0:
            raise ManifestError("no non-dynamic pixels to sample from")
        pick = rng.integers(0, len(self), size=batch_size)
        return gather_rays(self.manifest, self.frame[pick], self.row[pick], self.col[pick])


def sample_ray_batch(manifest: DatasetManifest, batch_size: int, seed: int) -> RayBatch:
    """Uniformly sample non-dynamic pixels across all frames (sky pixels included)."""
    return PixelPool(manifest).sample(batch_size, np.random.default_rng(seed))
