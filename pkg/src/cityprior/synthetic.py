"""Analytic test scenes: axis-aligned boxes and rectangles under a gradient sky.

``make_synthetic_scene`` renders ground-truth RGB, feature, sky and dynamic
masks by exact ray-primitive intersection and returns the manifest together
with a :class:`SceneOracle` that answers the same queries for arbitrary rays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import CameraFrame, CameraIntrinsics, DatasetManifest, Pose, frame_rays


@dataclass
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color: tuple[float, float, float]
    feature: tuple[float, ...] | None = None
    texture_period: float = 1.0
    texture_amplitude: float = 0.0
    dynamic: bool = False

    def __post_init__(self):
        if any(h - l <= 0 for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo}..{self.hi}")


@dataclass
class Rect:
    """Axis-aligned rectangle at ``axis`` = ``offset``; ``lo``/``hi`` bound the other two axes."""

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    color: tuple[float, float, float]
    feature: tuple[float, ...] | None = None
    texture_period: float = 1.0
    texture_amplitude: float = 0.0
    dynamic: bool = False

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        if any(h - l <= 0 for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate rectangle {self.lo}..{self.hi}")


@dataclass
class CameraSpec:
    world_from_camera: np.ndarray
    video_id: int = 0


@dataclass
class SceneSpec:
    feature_dim: int = 8
    boxes: list[Box] = field(default_factory=list)
    rects: list[Rect] = field(default_factory=list)
    sky_horizon: tuple[float, float, float] = (0.5, 0.5, 0.5)
    sky_zenith: tuple[float, float, float] = (0.5, 0.5, 0.5)
    sky_feature: tuple[float, ...] | None = None
    cameras: list[CameraSpec] = field(default_factory=list)
    width: int = 96
    height: int = 96
    focal: float = 80.0
    near: float = 0.1
    far: float = 200.0
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] | None = None
    seed: int = 0


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera matrix for a camera at ``position`` facing ``target`` (z-up world)."""
    p = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - p
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, p
    return m


def orbit_cameras(n: int, radius: float, height: float, target=(0.0, 0.0, 0.0), phase: float = 0.0, num_videos: int = 1):
    cams = []
    for k in range(n):
        a = 2 * math.pi * k / n + phase
        pos = (target[0] + radius * math.cos(a), target[1] + radius * math.sin(a), height)
        cams.append(CameraSpec(look_at(pos, target), video_id=k % num_videos))
    return cams


class SceneOracle:
    """Exact first-hit queries against the scene's primitives."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        D = spec.feature_dim
        self.prims: list[Box | Rect] = list(spec.boxes) + list(spec.rects)
        self.features = np.array(
            [
                np.asarray(p.feature, dtype=np.float64) if p.feature is not None else rng.normal(0.0, 0.5, D)
                for p in self.prims
            ]
        ).reshape(len(self.prims), D)
        self.sky_feature = (
            np.asarray(spec.sky_feature, dtype=np.float64)
            if spec.sky_feature is not None
            else rng.normal(0.0, 0.5, D)
        )

    def _intersect(self, o: np.ndarray, d: np.ndarray, prim) -> tuple[np.ndarray, np.ndarray]:
        """Entry distance (inf on miss) and the axis of the hit face."""
        n = len(o)
        with np.errstate(divide="ignore", invalid="ignore"):
            if isinstance(prim, Box):
                lo = np.asarray(prim.lo)
                hi = np.asarray(prim.hi)
                t0 = (lo - o) / d
                t1 = (hi - o) / d
                tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
                tmax = np.where(np.isnan(t0), np.inf, np.maximum(t0, t1))
                enter = tmin.max(axis=1)
                axis = tmin.argmax(axis=1)
                exit_ = tmax.min(axis=1)
                hit = (enter <= exit_) & (enter > 0)
                return np.where(hit, enter, np.inf), axis
            a = prim.axis
            t = (prim.offset - o[:, a]) / d[:, a]
            p = o + t[:, None] * d
            others = [i for i in range(3) if i != a]
            inside = np.ones(n, dtype=bool)
            for k, i in enumerate(others):
                inside &= (p[:, i] >= prim.lo[k]) & (p[:, i] <= prim.hi[k])
            hit = inside & (t > 0) & np.isfinite(t)
            return np.where(hit, t, np.inf), np.full(n, a)

    def sky_color(self, d: np.ndarray) -> np.ndarray:
        s = self.spec
        up = np.clip(d[:, 2], 0.0, 1.0)[:, None]
        return np.asarray(s.sky_horizon) * (1 - up) + np.asarray(s.sky_zenith) * up

    def query(self, origins, directions) -> dict[str, np.ndarray]:
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
        n = len(o)
        depth = np.full(n, np.inf)
        which = np.full(n, -1)
        face = np.zeros(n, dtype=np.int64)
        for i, prim in enumerate(self.prims):
            t, ax = self._intersect(o, d, prim)
            closer = t < depth
            depth[closer] = t[closer]
            which[closer] = i
            face[closer] = ax[closer]
        sky = which < 0
        rgb = self.sky_color(d)
        feat = np.broadcast_to(self.sky_feature, (n, self.spec.feature_dim)).copy()
        dynamic = np.zeros(n, dtype=bool)
        for i, prim in enumerate(self.prims):
            sel = which == i
            if not sel.any():
                continue
            p = o[sel] + depth[sel, None] * d[sel]
            rgb[sel] = self._surface_color(prim, p, face[sel])
            feat[sel] = self.features[i]
            dynamic[sel] = prim.dynamic
        return {"depth": depth, "rgb": rgb, "feature": feat, "is_sky": sky, "dynamic": dynamic, "primitive": which}

    @staticmethod
    def _surface_color(prim, p: np.ndarray, face: np.ndarray) -> np.ndarray:
        base = np.asarray(prim.color, dtype=np.float64)
        if prim.texture_amplitude == 0.0:
            return np.broadcast_to(base, (len(p), 3)).copy()
        # texture coordinates: the two axes tangent to the hit face
        u = np.where(face == 0, p[:, 1], p[:, 0])
        v = np.where(face == 2, p[:, 1], p[:, 2])
        k = 2 * math.pi / prim.texture_period
        mod = 1.0 + prim.texture_amplitude * np.sin(k * u) * np.sin(k * v)
        return np.clip(base[None] * mod[:, None], 0.0, 1.0)

    def depth(self, origin, direction) -> float:
        return float(self.query(origin, direction)["depth"][0])


def make_synthetic_scene(spec: SceneSpec, role: str = "train") -> tuple[DatasetManifest, SceneOracle]:
    oracle = SceneOracle(spec)
    w, h = spec.width, spec.height
    intr = CameraIntrinsics(spec.focal, spec.focal, (w - 1) / 2, (h - 1) / 2, w, h)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    frames = []
    for i, cam in enumerate(spec.cameras):
        pose = Pose.from_matrix(cam.world_from_camera)
        probe = CameraFrame(
            cam.video_id, pose, intr, np.zeros((h, w, 3)), np.zeros((h, w, 1)),
            np.zeros((h, w), bool), np.zeros((h, w), bool), i,
        )
        o, d = frame_rays(probe, rows.ravel(), cols.ravel())
        q = oracle.query(o, d)
        frames.append(
            CameraFrame(
                cam.video_id, pose, intr,
                q["rgb"].reshape(h, w, 3).astype(np.float32),
                q["feature"].reshape(h, w, -1).astype(np.float32),
                q["dynamic"].reshape(h, w),
                q["is_sky"].reshape(h, w),
                i,
            )
        )
    bounds = None if spec.bounds is None else np.asarray(spec.bounds, dtype=np.float64)
    manifest = DatasetManifest(spec.feature_dim, frames, role, spec.near, spec.far, bounds)
    return manifest, oracle


# ---------------------------------------------------------------- stock scenes


def box_scene(
    n_cameras: int = 20,
    size: int = 96,
    feature_dim: int = 8,
    phase: float = 0.0,
    seed: int = 0,
) -> SceneSpec:
    """Textured boxes on a ground slab, cameras on an orbit looking inwards."""
    rng = np.random.default_rng(seed)

    def feat():
        return tuple(rng.normal(0.0, 0.5, feature_dim))

    ground = Box((-5.0, -5.0, -0.3), (5.0, 5.0, 0.0), (0.45, 0.42, 0.38), feat(), 2.0, 0.25)
    boxes = [
        ground,
        Box((-2.5, -2.0, 0.0), (-0.5, 0.0, 1.6), (0.8, 0.3, 0.2), feat(), 1.5, 0.2),
        Box((0.8, -1.5, 0.0), (2.2, -0.1, 1.0), (0.2, 0.5, 0.8), feat(), 1.5, 0.2),
        Box((-0.8, 1.0, 0.0), (1.2, 2.4, 2.2), (0.3, 0.7, 0.3), feat(), 1.5, 0.2),
    ]
    return SceneSpec(
        feature_dim=feature_dim,
        boxes=boxes,
        sky_horizon=(0.75, 0.82, 0.9),
        sky_zenith=(0.35, 0.5, 0.85),
        sky_feature=feat(),
        cameras=orbit_cameras(n_cameras, 7.0, 2.5, (0.0, 0.0, 0.6), phase),
        width=size,
        height=size,
        focal=size * 0.75,
        bounds=((-8.0, -8.0, -1.0), (8.0, 8.0, 5.0)),
        seed=seed,
    )


def plane_scene(
    n_cameras: int = 20,
    size: int = 96,
    feature_dim: int = 8,
    height: float = 1.5,
    seed: int = 0,
) -> SceneSpec:
    """A single opaque textured ground rectangle; upper image rows see sky."""
    rng = np.random.default_rng(seed)
    ground = Rect(2, 0.0, (-6.0, -6.0), (6.0, 6.0), (0.5, 0.45, 0.4), tuple(rng.normal(0, 0.5, feature_dim)), 0.5, 0.5)
    return SceneSpec(
        feature_dim=feature_dim,
        rects=[ground],
        sky_horizon=(0.75, 0.82, 0.9),
        sky_zenith=(0.35, 0.5, 0.85),
        sky_feature=tuple(rng.normal(0, 0.5, feature_dim)),
        cameras=orbit_cameras(n_cameras, 3.0, height, (0.0, 0.0, height - 0.6)),
        width=size,
        height=size,
        focal=size * 0.7,
        bounds=((-6.0, -6.0, -1.0), (6.0, 6.0, 4.0)),
        seed=seed,
    )
