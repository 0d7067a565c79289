"""Tile and sub-field placement by K-Means over camera positions."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest

MAX_ITERATIONS = 100


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("pkd,pkd->pk", diff, diff)


def nearest(points, centroids) -> np.ndarray:
    """Index of the nearest centroid for every point; ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    return np.argmin(_sq_dists(points, centroids), axis=1)


def wcss(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = points - centroids[labels]
    return float(np.einsum("pd,pd->", diff, diff))


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    d2 = _sq_dists(points, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            idx = int(rng.integers(len(points)))
        else:
            idx = int(rng.choice(len(points), p=d2 / total))
        centroids.append(points[idx])
        d2 = np.minimum(d2, _sq_dists(points, points[idx][None])[:, 0])
    return np.array(centroids)


def kmeans(points, k: int, seed: int = 0, max_iter: int = MAX_ITERATIONS, history: list | None = None):
    """Lloyd's algorithm from a k-means++ start.

    Returns ``(centroids [k, 3], labels [n])``. When ``history`` is a list the
    WCSS after every update step is appended to it.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if k <= 0:
        raise ValueError("k must be >= 1")
    if k > len(points):
        raise ValueError(f"k={k} exceeds number of points {len(points)}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    labels = nearest(points, centroids)
    for _ in range(max_iter):
        new = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        centroids = new
        if history is not None:
            history.append(wcss(points, centroids, labels))
        empty = [j for j in range(k) if not (labels == j).any()]
        for j in empty:
            far = np.argmax(np.einsum("pd,pd->p", points - centroids[labels], points - centroids[labels]))
            centroids[j] = points[far]
            labels = labels.copy()
            labels[far] = j
        new_labels = nearest(points, centroids)
        if np.array_equal(new_labels, labels) and not empty:
            break
        labels = new_labels
    return centroids, labels


@dataclass
class TilePlan:
    tile_centroids: np.ndarray
    subfield_centroids_per_tile: list[np.ndarray]
    assignments: np.ndarray

    @property
    def num_tiles(self) -> int:
        return len(self.tile_centroids)

    def frames_of(self, tile: int) -> np.ndarray:
        return np.nonzero(self.assignments == tile)[0]

    def to_dict(self) -> dict:
        return {
            "tile_centroids": np.asarray(self.tile_centroids).tolist(),
            "subfield_centroids_per_tile": [np.asarray(c).tolist() for c in self.subfield_centroids_per_tile],
            "assignments": np.asarray(self.assignments).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TilePlan":
        return cls(
            np.asarray(d["tile_centroids"], dtype=np.float64).reshape(-1, 3),
            [np.asarray(c, dtype=np.float64).reshape(-1, 3) for c in d["subfield_centroids_per_tile"]],
            np.asarray(d["assignments"], dtype=np.int64),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TilePlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan_tiles(manifest: DatasetManifest, num_tiles: int, subfields_per_tile: int, seed: int = 0) -> TilePlan:
    if num_tiles < 1 or subfields_per_tile < 1:
        raise ValueError("num_tiles and subfields_per_tile must be >= 1")
    positions = manifest.camera_positions()
    tile_c, _ = kmeans(positions, num_tiles, seed)
    assign = nearest(positions, tile_c)
    sub = []
    for t in range(num_tiles):
        members = positions[assign == t]
        if len(members) == 0:
            raise ValueError(f"tile {t} has no cameras")
        c, _ = kmeans(members, subfields_per_tile, seed + 1 + t)
        sub.append(c)
    return TilePlan(tile_c, sub, assign)


def tile_bounds(manifest: DatasetManifest, plan: TilePlan, tile: int, margin: float = 50.0, z_range=(-5.0, 30.0)) -> np.ndarray:
    """Axis-aligned box of a tile: manifest bounds if given, else padded member-camera extent."""
    if manifest.bounds is not None:
        return np.asarray(manifest.bounds, dtype=np.float64)
    pos = manifest.camera_positions()[plan.frames_of(tile)]
    lo = pos.min(axis=0) - margin
    hi = pos.max(axis=0) + margin
    lo[2] = pos[:, 2].min() + z_range[0]
    hi[2] = pos[:, 2].max() + z_range[1]
    return np.stack([lo, hi])
