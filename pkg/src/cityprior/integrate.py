"""Rasterising prior voxels into dense ego-frame grids, and fusing them with online features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from .extract import PriorCells


@dataclass(frozen=True)
class GridSpec:
    """Ego-frame raster: x to columns, y to rows, z to height slabs or depth."""

    x_range: tuple[float, float] = (-50.0, 50.0)
    y_range: tuple[float, float] = (-25.0, 25.0)
    resolution: float = 0.5
    z_range: tuple[float, float] = (-5.0, 5.0)
    num_height_bins: int = 4

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError(f"empty range ({lo}, {hi})")
        if self.num_height_bins < 1:
            raise ValueError("num_height_bins must be >= 1")

    @property
    def width(self) -> int:
        return math.ceil((self.x_range[1] - self.x_range[0]) / self.resolution)

    @property
    def height(self) -> int:
        return math.ceil((self.y_range[1] - self.y_range[0]) / self.resolution)

    @property
    def depth(self) -> int:
        return math.ceil((self.z_range[1] - self.z_range[0]) / self.resolution)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "resolution": self.resolution,
            "z_range": list(self.z_range),
            "num_height_bins": self.num_height_bins,
        }


@dataclass
class BEVFeatureGrid:
    spec: GridSpec
    data: Tensor  # [H, W, C]
    weight: Tensor | None = None  # [H, W, slabs], accumulated cell weight

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


@dataclass
class VoxelFeatureGrid3D:
    spec: GridSpec
    data: Tensor  # [Z, H, W, C]
    weight: Tensor | None = None  # [Z, H, W]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def _bin(v: np.ndarray, lo: float, step: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    i = np.floor((v - lo) / step).astype(np.int64)
    return i, (i >= 0) & (i < n)


def _scatter_mean(flat_index: np.ndarray, n_bins: int, feats: np.ndarray, weights: np.ndarray):
    acc = np.zeros((n_bins, feats.shape[1]), np.float64)
    wsum = np.zeros(n_bins, np.float64)
    np.add.at(acc, flat_index, feats.astype(np.float64) * weights[:, None])
    np.add.at(wsum, flat_index, weights)
    out = np.divide(acc, wsum[:, None], out=np.zeros_like(acc), where=wsum[:, None] > 0)
    return out.astype(np.float32), wsum


def rasterize_bev(cells: PriorCells, spec: GridSpec = GridSpec(), feature_dim: int | None = None) -> BEVFeatureGrid:
    """Weighted-mean scatter into (row, col, slab); slabs stacked slab-major into channels."""
    D = cells.features.shape[1] if feature_dim is None else feature_dim
    H, W, S = spec.height, spec.width, spec.num_height_bins
    p = np.asarray(cells.positions, dtype=np.float64).reshape(-1, 3)
    col, okc = _bin(p[:, 0], spec.x_range[0], spec.resolution, W)
    row, okr = _bin(p[:, 1], spec.y_range[0], spec.resolution, H)
    slab, oks = _bin(p[:, 2], spec.z_range[0], (spec.z_range[1] - spec.z_range[0]) / S, S)
    ok = okc & okr & oks
    flat = (row[ok] * W + col[ok]) * S + slab[ok]
    feats = np.asarray(cells.features, dtype=np.float32).reshape(-1, D)[ok]
    mean, wsum = _scatter_mean(flat, H * W * S, feats, np.asarray(cells.weights, np.float64)[ok])
    data = mean.reshape(H, W, S * D)
    return BEVFeatureGrid(spec, torch.from_numpy(data), torch.from_numpy(wsum.reshape(H, W, S)))


def rasterize_3d(cells: PriorCells, spec: GridSpec = GridSpec(), feature_dim: int | None = None) -> VoxelFeatureGrid3D:
    D = cells.features.shape[1] if feature_dim is None else feature_dim
    Z, H, W = spec.depth, spec.height, spec.width
    p = np.asarray(cells.positions, dtype=np.float64).reshape(-1, 3)
    col, okc = _bin(p[:, 0], spec.x_range[0], spec.resolution, W)
    row, okr = _bin(p[:, 1], spec.y_range[0], spec.resolution, H)
    dep, okz = _bin(p[:, 2], spec.z_range[0], spec.resolution, Z)
    ok = okc & okr & okz
    flat = (dep[ok] * H + row[ok]) * W + col[ok]
    feats = np.asarray(cells.features, dtype=np.float32).reshape(-1, D)[ok]
    mean, wsum = _scatter_mean(flat, Z * H * W, feats, np.asarray(cells.weights, np.float64)[ok])
    return VoxelFeatureGrid3D(spec, torch.from_numpy(mean.reshape(Z, H, W, D)), torch.from_numpy(wsum.reshape(Z, H, W)))


class FusionHead(nn.Module):
    """Two 3x3 convolutions over ``[online, prior]`` channels, ReLU between.

    Identity initialisation routes each online channel through a +x / -x pair
    of hidden units, so ``relu(x) - relu(-x) = x`` reproduces the online input
    while every prior weight starts at zero.
    """

    def __init__(self, online_channels: int, prior_channels: int, hidden_channels: int | None = None, identity: bool = True):
        super().__init__()
        hidden = hidden_channels or 2 * online_channels
        if identity and hidden < 2 * online_channels:
            raise ValueError("identity init needs hidden_channels >= 2 * online_channels")
        self.online_channels = online_channels
        self.prior_channels = prior_channels
        self.conv1 = nn.Conv2d(online_channels + prior_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, online_channels, 3, padding=1)
        if identity:
            self.reset_identity()

    @torch.no_grad()
    def reset_identity(self) -> None:
        C = self.online_channels
        for conv in (self.conv1, self.conv2):
            conv.weight.zero_()
            conv.bias.zero_()
        eye = torch.eye(C)
        self.conv1.weight[:C, :C, 1, 1] = eye
        self.conv1.weight[C : 2 * C, :C, 1, 1] = -eye
        self.conv2.weight[:, :C, 1, 1] = eye
        self.conv2.weight[:, C : 2 * C, 1, 1] = -eye

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(torch.relu(self.conv1(x)))


def fuse(online: BEVFeatureGrid, prior: BEVFeatureGrid, head: FusionHead) -> BEVFeatureGrid:
    """Channel-concatenate ``[online, prior]`` and mix with ``head``; keeps the online shape."""
    if online.data.shape[:2] != prior.data.shape[:2]:
        raise ValueError(f"spatial shape mismatch {tuple(online.data.shape[:2])} vs {tuple(prior.data.shape[:2])}")
    if online.spec != prior.spec:
        raise ValueError("grid specs differ")
    if online.channels != head.online_channels or prior.channels != head.prior_channels:
        raise ValueError(
            f"channel mismatch: head expects {head.online_channels}+{head.prior_channels}, "
            f"got {online.channels}+{prior.channels}"
        )
    dtype = head.conv1.weight.dtype
    x = torch.cat([online.data.to(dtype), prior.data.to(dtype)], dim=-1)
    y = head(x.permute(2, 0, 1)[None])[0].permute(1, 2, 0)
    return BEVFeatureGrid(online.spec, y)
