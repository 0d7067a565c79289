"""Neural scene representation for one tile.

A tile holds several sub-fields (hash grid + trunk MLP + color/feature heads),
a direction-only sky model, a per-video appearance embedding table and two
density-only proposal fields used for importance sampling.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import kernels
from .errors import DataError

# Per-axis multipliers for the spatial hash.
HASH_PRIMES = (1, 2654435761, 805459861)

# Trunk output is shifted before softplus so a fresh field starts near-transparent.
DENSITY_BIAS = -1.0

_CORNER_OFFSETS = torch.tensor(
    [[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.int64
)


@dataclass
class HashGridConfig:
    num_levels: int = 10
    min_resolution: int = 16
    max_resolution: int = 2**14
    features_per_level: int = 4
    table_capacity: int = 2**20
    bounding_box: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (-1.0, -1.0, -1.0),
        (1.0, 1.0, 1.0),
    )

    def __post_init__(self):
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.min_resolution < 2:
            raise ValueError("min_resolution must be >= 2")
        if self.max_resolution < self.min_resolution:
            raise ValueError("max_resolution must be >= min_resolution")
        cap = self.table_capacity
        if cap < 1 or cap & (cap - 1):
            raise ValueError("table_capacity must be a power of two")
        lo, hi = self.bounding_box
        self.bounding_box = (tuple(float(v) for v in lo), tuple(float(v) for v in hi))
        if any(h <= l for l, h in zip(*self.bounding_box)):
            raise ValueError("bounding_box must have positive extent on every axis")

    @property
    def growth_factor(self) -> float:
        if self.num_levels == 1:
            return 1.0
        return math.exp(
            (math.log(self.max_resolution) - math.log(self.min_resolution)) / (self.num_levels - 1)
        )

    def resolutions(self) -> list[int]:
        b = self.growth_factor
        # small epsilon keeps the top level at max_resolution despite exp/log round-off
        return [int(math.floor(self.min_resolution * b**level + 1e-6)) for level in range(self.num_levels)]

    @property
    def output_dim(self) -> int:
        return self.num_levels * self.features_per_level

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bounding_box"] = [list(self.bounding_box[0]), list(self.bounding_box[1])]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        d = dict(d)
        if "bounding_box" in d:
            lo, hi = d["bounding_box"]
            d["bounding_box"] = (tuple(lo), tuple(hi))
        return cls(**d)


class HashGrid(nn.Module):
    """Multi-resolution hash encoding with trilinear interpolation.

    Levels whose (r+1)^3 lattice fits in ``table_capacity`` are indexed densely
    and never collide; finer levels use the XOR-of-primes spatial hash.
    """

    def __init__(self, config: HashGridConfig):
        super().__init__()
        self.config = config
        res = config.resolutions()
        sizes, dense, offsets = [], [], []
        total = 0
        for r in res:
            n_dense = (r + 1) ** 3
            is_dense = n_dense <= config.table_capacity
            size = n_dense if is_dense else config.table_capacity
            offsets.append(total)
            sizes.append(size)
            dense.append(is_dense)
            total += size
        self.level_sizes = sizes
        self.register_buffer("resolution", torch.tensor(res, dtype=torch.int64), persistent=False)
        self.register_buffer("dense", torch.tensor(dense), persistent=False)
        self.register_buffer("offset", torch.tensor(offsets, dtype=torch.int64), persistent=False)
        self.register_buffer(
            "box", torch.tensor(config.bounding_box, dtype=torch.float32), persistent=False
        )
        self.table = nn.Parameter(torch.empty(total, config.features_per_level))
        nn.init.uniform_(self.table, -1e-4, 1e-4)
        self.use_kernel = True
        self._np_meta = (
            np.asarray(res, dtype=np.int64),
            np.asarray(dense, dtype=np.bool_),
            np.asarray(offsets, dtype=np.int64),
        )

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def level_slice(self, level: int) -> slice:
        start = int(self.offset[level])
        return slice(start, start + self.level_sizes[level])

    def corner_indices(self, corners: Tensor) -> Tensor:
        """Table rows for integer lattice corners of shape [..., L, K, 3]."""
        res = self.resolution.view(-1, 1)
        stride = res + 1
        dense_idx = corners[..., 0] + stride * corners[..., 1] + stride * stride * corners[..., 2]
        hashed = (
            (corners[..., 0] * HASH_PRIMES[0])
            ^ (corners[..., 1] * HASH_PRIMES[1])
            ^ (corners[..., 2] * HASH_PRIMES[2])
        ) & (self.config.table_capacity - 1)
        idx = torch.where(self.dense.view(-1, 1), dense_idx, hashed)
        return idx + self.offset.view(-1, 1)

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        x = x.reshape(-1, 3).to(self.table.dtype)
        if self.use_kernel and not x.requires_grad and x.device.type == "cpu":
            res, dense, offset = self._np_meta
            out = kernels.HashInterp.apply(
                x.contiguous(), self.table, self.box, res, dense, offset, self.config.table_capacity
            )
            return out.reshape(*lead, self.output_dim)
        return self.reference_forward(x).reshape(*lead, self.output_dim)

    def reference_forward(self, x: Tensor) -> Tensor:
        """Pure torch path; differentiable w.r.t. both table and positions."""
        box = self.box.to(x.dtype)
        u = ((x - box[0]) / (box[1] - box[0])).clamp(0.0, 1.0)
        res = self.resolution.to(x.dtype)
        pos = u[:, None, :] * res[None, :, None]  # [P, L, 3]
        cell = pos.detach().floor().long()
        cell = torch.minimum(cell, (self.resolution - 1).view(1, -1, 1))
        frac = pos - cell.to(x.dtype)
        corners = cell[:, :, None, :] + _CORNER_OFFSETS.to(x.device)  # [P, L, 8, 3]
        idx = self.corner_indices(corners)
        offs = _CORNER_OFFSETS.to(x.device).bool()
        w = torch.where(offs, frac[:, :, None, :], 1.0 - frac[:, :, None, :]).prod(dim=-1)
        feats = self.table[idx]  # [P, L, 8, F]
        return (w[..., None] * feats).sum(dim=2).reshape(x.shape[0], -1)


def hash_encode(grid: HashGrid, x: Tensor) -> Tensor:
    return grid(x)


# Real spherical harmonics, bands 0..3.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_encode(d: Tensor, degree: int = 4) -> Tensor:
    """Real SH basis evaluated at unit directions; returns degree**2 components."""
    if not 1 <= degree <= 4:
        raise ValueError("degree must be in [1, 4]")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [torch.full_like(x, _SH_C0)]
    if degree > 1:
        out += [-_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x]
    if degree > 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            _SH_C2[0] * x * y,
            _SH_C2[1] * y * z,
            _SH_C2[2] * (2.0 * zz - xx - yy),
            _SH_C2[3] * x * z,
            _SH_C2[4] * (xx - yy),
        ]
    if degree > 3:
        out += [
            _SH_C3[0] * y * (3 * xx - yy),
            _SH_C3[1] * x * y * z,
            _SH_C3[2] * y * (4 * zz - xx - yy),
            _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            _SH_C3[4] * x * (4 * zz - xx - yy),
            _SH_C3[5] * z * (xx - yy),
            _SH_C3[6] * x * (xx - 3 * yy),
        ]
    return torch.stack(out, dim=-1)


class Mlp(nn.Module):
    """ReLU MLP with a linear output layer; output activations are applied by callers."""

    def __init__(self, in_dim: int, out_dim: int, hidden_width: int = 64, hidden_layers: int = 2):
        super().__init__()
        widths = [in_dim] + [hidden_width] * hidden_layers + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        for layer in self.layers:
            nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
            nn.init.zeros_(layer.bias)

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_features

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)

    def zero_output(self) -> None:
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)


@dataclass
class TileFieldConfig:
    feature_dim: int = 64
    main_grid: HashGridConfig = field(default_factory=HashGridConfig)
    proposal_grids: tuple[HashGridConfig, ...] = field(
        default_factory=lambda: (
            HashGridConfig(8, 16, 2**10, 1, 2**20),
            HashGridConfig(8, 16, 2**10, 1, 2**20),
        )
    )
    hidden_width: int = 64
    hidden_layers: int = 2
    proposal_hidden_width: int = 64
    geo_feat_dim: int = 15
    embed_dim: int = 16
    sh_degree: int = 4

    def with_box(self, box) -> "TileFieldConfig":
        box = (tuple(float(v) for v in box[0]), tuple(float(v) for v in box[1]))
        return dataclasses.replace(
            self,
            main_grid=dataclasses.replace(self.main_grid, bounding_box=box),
            proposal_grids=tuple(dataclasses.replace(g, bounding_box=box) for g in self.proposal_grids),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["main_grid"] = self.main_grid.to_dict()
        d["proposal_grids"] = [g.to_dict() for g in self.proposal_grids]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TileFieldConfig":
        d = dict(d)
        if "main_grid" in d:
            d["main_grid"] = HashGridConfig.from_dict(d["main_grid"])
        if "proposal_grids" in d:
            d["proposal_grids"] = tuple(HashGridConfig.from_dict(g) for g in d["proposal_grids"])
        return cls(**d)


@dataclass
class FieldSample:
    density: Tensor
    color: Tensor
    feature: Tensor


class SubField(nn.Module):
    def __init__(self, centroid: Sequence[float], cfg: TileFieldConfig):
        super().__init__()
        self.register_buffer("centroid", torch.tensor(centroid, dtype=torch.float32))
        self.hash_grid = HashGrid(cfg.main_grid)
        self.trunk = Mlp(self.hash_grid.output_dim, 1 + cfg.geo_feat_dim, cfg.hidden_width, cfg.hidden_layers)
        dir_dim = cfg.sh_degree**2
        self.color_head = Mlp(cfg.geo_feat_dim + dir_dim + cfg.embed_dim, 3, cfg.hidden_width, cfg.hidden_layers)
        self.feature_head = Mlp(cfg.geo_feat_dim, cfg.feature_dim, cfg.hidden_width, cfg.hidden_layers)

    def geometry(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.trunk(self.hash_grid(x))
        sigma = F.softplus(h[..., 0] + DENSITY_BIAS)
        return sigma, h[..., 1:]

    def forward(self, x: Tensor, dir_enc: Tensor, embedding: Tensor) -> FieldSample:
        sigma, g = self.geometry(x)
        rgb = torch.sigmoid(self.color_head(torch.cat([g, dir_enc, embedding], dim=-1)))
        feat = self.feature_head(g)
        return FieldSample(sigma, rgb, feat)


class ProposalField(nn.Module):
    """Density-only field: hash grid followed by a small MLP."""

    def __init__(self, grid: HashGridConfig, hidden_width: int, hidden_layers: int):
        super().__init__()
        self.hash_grid = HashGrid(grid)
        self.mlp = Mlp(self.hash_grid.output_dim, 1, hidden_width, hidden_layers)

    def forward(self, x: Tensor) -> Tensor:
        return F.softplus(self.mlp(self.hash_grid(x))[..., 0] + DENSITY_BIAS)


class TileField(nn.Module):
    def __init__(
        self,
        cfg: TileFieldConfig,
        centroids: Sequence[Sequence[float]],
        video_ids: Sequence[int],
        seed: int = 0,
    ):
        super().__init__()
        if len(centroids) < 1:
            raise ValueError("a tile needs at least one sub-field")
        self.cfg = cfg
        self.video_ids = [int(v) for v in video_ids]
        if len(set(self.video_ids)) != len(self.video_ids):
            raise ValueError("duplicate video ids")
        self._vid_row = {v: i for i, v in enumerate(self.video_ids)}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.subfields = nn.ModuleList(SubField(c, cfg) for c in centroids)
            self.sky = Mlp(cfg.sh_degree**2 + cfg.embed_dim, 3 + cfg.feature_dim, cfg.hidden_width, cfg.hidden_layers)
            self.video_embeddings = nn.Embedding(max(len(self.video_ids), 1), cfg.embed_dim)
            nn.init.zeros_(self.video_embeddings.weight)
            self.proposals = nn.ModuleList(
                ProposalField(g, cfg.proposal_hidden_width, cfg.hidden_layers) for g in cfg.proposal_grids
            )
        self.register_buffer("box", torch.tensor(cfg.main_grid.bounding_box, dtype=torch.float32))

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    @property
    def centroids(self) -> Tensor:
        return torch.stack([sf.centroid for sf in self.subfields])

    def video_rows(self, vids) -> Tensor:
        vids = np.asarray(torch.as_tensor(vids).reshape(-1).cpu(), dtype=np.int64)
        known = np.array(sorted(self._vid_row), dtype=np.int64)
        pos = np.clip(np.searchsorted(known, vids), 0, max(len(known) - 1, 0))
        bad = (known[pos] != vids) if len(known) else np.ones(len(vids), bool)
        if bad.any():
            raise DataError(f"unknown video id {int(vids[bad][0])}")
        rows = np.array([self._vid_row[int(v)] for v in known], dtype=np.int64)[pos]
        return torch.from_numpy(rows)

    def embed(self, vids) -> Tensor:
        return self.video_embeddings(self.video_rows(vids))

    def encode_directions(self, d: Tensor) -> Tensor:
        return sh_encode(d, self.cfg.sh_degree)

    def sky_from_encoding(self, dir_enc: Tensor, embedding: Tensor) -> tuple[Tensor, Tensor]:
        out = self.sky(torch.cat([dir_enc, embedding], dim=-1))
        return torch.sigmoid(out[..., :3]), out[..., 3:]


def _as_batch(v, ref: Tensor | None = None) -> tuple[Tensor, bool]:
    t = torch.as_tensor(v, dtype=ref.dtype if ref is not None else None)
    single = t.dim() == 1
    return (t[None] if single else t), single


def query_subfield(sf: SubField, x, d, vid, tile: TileField) -> FieldSample:
    """Evaluate one sub-field at positions ``x`` seen along directions ``d`` from video ``vid``."""
    dtype = sf.hash_grid.table.dtype
    x, single = _as_batch(torch.as_tensor(x, dtype=dtype))
    d, _ = _as_batch(torch.as_tensor(d, dtype=dtype))
    d = d.expand_as(x)
    vids = torch.as_tensor(vid).reshape(-1).expand(x.shape[0])
    out = sf(x, tile.encode_directions(d), tile.embed(vids))
    if single:
        return FieldSample(out.density[0], out.color[0], out.feature[0])
    return out


def query_sky(tile: TileField, d, vid) -> tuple[Tensor, Tensor]:
    dtype = tile.sky.layers[0].weight.dtype
    d, single = _as_batch(torch.as_tensor(d, dtype=dtype))
    vids = torch.as_tensor(vid).reshape(-1).expand(d.shape[0])
    rgb, feat = tile.sky_from_encoding(tile.encode_directions(d), tile.embed(vids))
    if single:
        return rgb[0], feat[0]
    return rgb, feat


def parameters(tile: nn.Module) -> dict[str, Tensor]:
    """Flat name -> parameter mapping of every learnable value."""
    return dict(tile.named_parameters())


def accumulate_gradients(loss: Tensor, tile: nn.Module) -> dict[str, Tensor]:
    """Backpropagate ``loss`` and return name -> gradient (zeros where unused)."""
    params = parameters(tile)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }
