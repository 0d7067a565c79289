"""Surface extraction from trained tiles and the sparse prior-voxel store.

A surface point is the first final-stage sample whose cumulative compositing
weight exceeds 0.5; its feature is the feature head evaluated at that sample.

Voxel sums are kept exactly: every float32 value is an integer multiple of
2**-149, so per-cell feature sums are held as Python integers in those units.
The stored mean is ``float32(float64(sum / count))``. Downsampling a union
of point sets therefore equals merging the per-set grids, bit for bit.

Prior file layout (little-endian)::

    magic "PSPV" | version u32 | voxel_size f32 | origin 3 x f32 | D u32 | count u64
    count x { index 3 x i32 | feature D x f32 | weight f32 }

Records are sorted by cell index (x, then y, then z).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, Ray, frame_rays
from .errors import PriorFormatError
from .field import TileField
from .render import ProposalConfig, RayBundle, render_rays

THRESHOLD = 0.5
MAGIC = b"PSPV"
VERSION = 1
_ULP_EXP = 149  # float32 values are integer multiples of 2**-149
_SCALE = 2.0**_ULP_EXP


@dataclass
class SurfacePoint:
    position: np.ndarray
    feature: np.ndarray
    video_id: int = -1
    pixel: tuple[int, int] = (-1, -1)


def surface_index(weights: torch.Tensor) -> torch.Tensor:
    """Smallest j with sum_{k<=j} w_k > 0.5, or -1 where the sum never gets there."""
    cum = torch.cumsum(weights, dim=-1)
    hit = cum > THRESHOLD
    j = torch.argmax(hit.to(torch.int8), dim=-1)
    return torch.where(hit.any(dim=-1), j, torch.full_like(j, -1))


@torch.no_grad()
def extract_surfaces(tile: TileField, rays: RayBundle, cfg: ProposalConfig, chunk: int = 4096):
    """Vectorised extraction. Returns ``(positions [R,3], features [R,D], found [R])``."""
    pos, feat, found = [], [], []
    for s in range(0, len(rays), chunk):
        out, _ = render_rays(tile, rays[s : s + chunk], cfg)
        j = surface_index(out.weights)
        ok = j >= 0
        jj = j.clamp_min(0)
        r = torch.arange(len(jj))
        pos.append(out.positions[r, jj].double())
        feat.append(out.feature[r, jj])
        found.append(ok)
    if not pos:
        return np.zeros((0, 3)), np.zeros((0, tile.feature_dim), np.float32), np.zeros(0, bool)
    return (
        torch.cat(pos).numpy(),
        torch.cat(feat).numpy().astype(np.float32),
        torch.cat(found).numpy(),
    )


def extract_surface(tile: TileField, ray: Ray, cfg: ProposalConfig) -> SurfacePoint | None:
    pos, feat, found = extract_surfaces(tile, RayBundle.from_rays([ray], tile.box.dtype), cfg)
    if not found[0]:
        return None
    return SurfacePoint(pos[0], feat[0], ray.video_id, tuple(ray.pixel))


def extract_tile(
    tile: TileField,
    manifest: DatasetManifest,
    stride: int,
    cfg: ProposalConfig,
    frames: Sequence[int] | None = None,
) -> list[SurfacePoint]:
    """Extract along every ``stride``-th non-dynamic pixel (raster order) of each frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    dtype = tile.box.dtype
    points: list[SurfacePoint] = []
    for fi in range(len(manifest.frames)) if frames is None else frames:
        frame = manifest.frames[fi]
        rows, cols = np.nonzero(~frame.dynamic_mask)
        rows, cols = rows[::stride], cols[::stride]
        if len(rows) == 0:
            continue
        o, d = frame_rays(frame, rows, cols)
        n = len(rows)
        rays = RayBundle(
            torch.as_tensor(o, dtype=dtype),
            torch.as_tensor(d, dtype=dtype),
            torch.full((n,), frame.video_id, dtype=torch.int64),
            torch.full((n,), manifest.near, dtype=dtype),
            torch.full((n,), manifest.far, dtype=dtype),
        )
        pos, feat, found = extract_surfaces(tile, rays, cfg)
        for k in np.nonzero(found)[0]:
            points.append(SurfacePoint(pos[k], feat[k], frame.video_id, (int(rows[k]), int(cols[k]))))
    return points


# ------------------------------------------------------------------ voxel store


def _to_units(values: np.ndarray) -> np.ndarray:
    """float32 array -> object array of exact integers (units of 2**-149)."""
    scaled = np.asarray(values, dtype=np.float32).astype(np.float64) * _SCALE
    return np.frompyfunc(int, 1, 1)(scaled).astype(object).reshape(np.shape(values))


def _means(sums: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if sums.size == 0:
        return np.zeros(sums.shape, dtype=np.float32)
    w = weights.astype(object).reshape(-1, 1)
    q = (sums / w).astype(np.float64)  # int / int: correctly rounded
    return (q / _SCALE).astype(np.float32)


class PriorVoxelGrid:
    """Sparse voxel map: cell index -> (mean feature, point count)."""

    def __init__(self, voxel_size: float, origin, feature_dim: int, indices=None, sums=None, weights=None):
        voxel_size = float(np.float32(voxel_size))
        if not voxel_size > 0 or not math.isfinite(voxel_size):
            raise ValueError("voxel_size must be > 0")
        self.voxel_size = voxel_size
        self.origin = np.asarray(origin, dtype=np.float32).astype(np.float64).reshape(3)
        self.feature_dim = int(feature_dim)
        if indices is None:
            indices = np.zeros((0, 3), np.int32)
            sums = np.zeros((0, self.feature_dim), dtype=object)
            weights = np.zeros(0, np.int64)
        self.indices = np.asarray(indices, dtype=np.int32).reshape(-1, 3)
        self.sums = np.asarray(sums, dtype=object).reshape(-1, self.feature_dim)
        self.weights = np.asarray(weights, dtype=np.int64).reshape(-1)
        if not (len(self.indices) == len(self.sums) == len(self.weights)):
            raise ValueError("indices, sums and weights must have equal length")
        if (self.weights <= 0).any():
            raise ValueError("cell weights must be positive")
        self.features = _means(self.sums, self.weights)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def centers(self) -> np.ndarray:
        return self.origin + (self.indices.astype(np.float64) + 0.5) * self.voxel_size

    def compatible(self, other: "PriorVoxelGrid") -> bool:
        return (
            self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
            and self.feature_dim == other.feature_dim
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PriorVoxelGrid):
            return NotImplemented
        return (
            self.compatible(other)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
        )

    def cells(self) -> dict[tuple[int, int, int], tuple[np.ndarray, int]]:
        return {tuple(int(v) for v in i): (f, int(w)) for i, f, w in zip(self.indices, self.features, self.weights)}


def _grouped(voxel_size, origin, dim, indices, sums, weights) -> PriorVoxelGrid:
    """Sum rows sharing a cell index; output sorted by (x, y, z)."""
    if len(indices) == 0:
        return PriorVoxelGrid(voxel_size, origin, dim)
    uniq, inv = np.unique(indices, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    out_sums = np.empty((len(uniq), dim), dtype=object)
    out_sums[...] = 0
    # sequential accumulation in input order; integer sums make order irrelevant anyway
    np.add.at(out_sums, inv, sums)
    out_w = np.zeros(len(uniq), np.int64)
    np.add.at(out_w, inv, weights)
    return PriorVoxelGrid(voxel_size, origin, dim, uniq, out_sums, out_w)


def cell_index(positions, voxel_size: float, origin) -> np.ndarray:
    """floor((p - origin) / voxel_size) per axis; a boundary belongs to the cell above it."""
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    v = float(np.float32(voxel_size))
    o = np.asarray(origin, dtype=np.float32).astype(np.float64)
    return np.floor((p - o) / v).astype(np.int64)


def voxel_downsample_arrays(positions, features, voxel_size: float, origin=(0.0, 0.0, 0.0)) -> PriorVoxelGrid:
    features = np.asarray(features, dtype=np.float32)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    dim = features.shape[-1] if features.ndim == 2 else 0
    if len(positions) != len(features):
        raise ValueError("positions and features differ in length")
    if not np.isfinite(positions).all():
        raise ValueError("non-finite point position")
    idx = cell_index(positions, voxel_size, origin)
    if len(idx) and (np.abs(idx) > np.iinfo(np.int32).max).any():
        raise ValueError("cell index exceeds int32 range")
    return _grouped(voxel_size, origin, dim, idx, _to_units(features), np.ones(len(idx), np.int64))


def voxel_downsample(points: Iterable[SurfacePoint], voxel_size: float, origin=(0.0, 0.0, 0.0), feature_dim: int | None = None) -> PriorVoxelGrid:
    points = list(points)
    if not points:
        if feature_dim is None:
            raise ValueError("feature_dim is required for an empty point list")
        return PriorVoxelGrid(voxel_size, origin, feature_dim)
    pos = np.stack([np.asarray(p.position, dtype=np.float64) for p in points])
    feat = np.stack([np.asarray(p.feature, dtype=np.float32) for p in points])
    return voxel_downsample_arrays(pos, feat, voxel_size, origin)


def merge(*grids: PriorVoxelGrid) -> PriorVoxelGrid:
    """Weighted-mean merge of grids sharing voxel_size, origin and feature_dim."""
    if not grids:
        raise ValueError("nothing to merge")
    g0 = grids[0]
    for g in grids[1:]:
        if not g0.compatible(g):
            raise ValueError("grids differ in voxel_size, origin or feature_dim")
    return _grouped(
        g0.voxel_size,
        g0.origin,
        g0.feature_dim,
        np.concatenate([g.indices for g in grids]),
        np.concatenate([g.sums for g in grids]),
        np.concatenate([g.weights for g in grids]),
    )


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("index", "<i4", (3,)), ("feature", "<f4", (dim,)), ("weight", "<f4")])


def save_prior(grid: PriorVoxelGrid, path) -> Path:
    path = Path(path)
    rec = np.zeros(len(grid), dtype=_record_dtype(grid.feature_dim))
    rec["index"] = grid.indices
    rec["feature"] = grid.features
    rec["weight"] = grid.weights
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        fh.write(struct.pack("<f3f", grid.voxel_size, *grid.origin))
        fh.write(struct.pack("<IQ", grid.feature_dim, len(grid)))
        fh.write(rec.tobytes())
    return path


def load_prior(path) -> PriorVoxelGrid:
    path = Path(path)
    if not path.is_file():
        raise PriorFormatError(f"prior file not found: {path}")
    raw = path.read_bytes()
    head = 4 + 4 + 16 + 12
    if len(raw) < head:
        raise PriorFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise PriorFormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise PriorFormatError(f"{path}: unsupported version {version}")
    voxel_size, ox, oy, oz = struct.unpack_from("<f3f", raw, 8)
    dim, count = struct.unpack_from("<IQ", raw, 24)
    dt = _record_dtype(dim)
    if len(raw) != head + count * dt.itemsize:
        raise PriorFormatError(f"{path}: expected {count} records, file size disagrees")
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=head)
    weights = rec["weight"].astype(np.int64)
    if (weights <= 0).any() or not np.array_equal(weights.astype(np.float32), rec["weight"]):
        raise PriorFormatError(f"{path}: invalid cell weight")
    sums = _to_units(rec["feature"]) * weights.astype(object).reshape(-1, 1) if count else None
    grid = PriorVoxelGrid(voxel_size, (ox, oy, oz), dim, rec["index"].copy() if count else None, sums, weights if count else None)
    return grid


@dataclass
class PriorCells:
    """Cells returned by :func:`query_region`, positions in the ego frame."""

    positions: np.ndarray
    features: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.positions)

    def __iter__(self):
        return iter(zip(self.positions, self.features, self.weights))


def world_to_ego(points, center, yaw: float) -> np.ndarray:
    """Translate by -center, then rotate by -yaw about +z."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(center, dtype=np.float64)
    c, s = math.cos(yaw), math.sin(yaw)
    x = c * p[:, 0] + s * p[:, 1]
    y = -s * p[:, 0] + c * p[:, 1]
    return np.stack([x, y, p[:, 2]], axis=-1)


def query_region(grid: PriorVoxelGrid, center, half_extents, yaw: float = 0.0) -> PriorCells:
    half = np.asarray(half_extents, dtype=np.float64).reshape(3)
    if not (half > 0).all():
        raise ValueError("half_extents must be > 0")
    ego = world_to_ego(grid.centers, center, yaw)
    inside = (np.abs(ego) <= half).all(axis=1)
    return PriorCells(ego[inside], grid.features[inside], grid.weights[inside].astype(np.float64))
