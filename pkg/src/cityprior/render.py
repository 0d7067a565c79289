"""Ray sampling, proposal resampling, sub-field routing and compositing.

Sample ``i`` of a ray covers the interval ``[t_i, t_{i+1})`` with
``t_{N+1} = far``; opacity is ``1 - exp(-sigma_i * (t_{i+1} - t_i))``.
Resampling draws from the piecewise-constant distribution that puts mass
``w_i`` on that same interval, so proposal weights, final weights and the
losses built on them all refer to one partition of the ray.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .dataset import CameraFrame, Ray, RayBatch, frame_rays
from .field import TileField

EPS = 1e-10


@dataclass
class ProposalConfig:
    stage_samples: tuple[int, ...] = (128, 64)
    final_samples: int = 32
    histogram_padding: float = 0.01

    def __post_init__(self):
        self.stage_samples = tuple(int(n) for n in self.stage_samples)
        if any(n < 2 for n in self.stage_samples) or self.final_samples < 2:
            raise ValueError("all sample counts must be >= 2")


@dataclass
class RayBundle:
    origins: Tensor
    directions: Tensor
    video_ids: Tensor
    near: Tensor
    far: Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]

    @classmethod
    def from_batch(cls, batch: RayBatch, dtype=torch.float32) -> "RayBundle":
        return cls(
            torch.as_tensor(batch.origins, dtype=dtype),
            torch.as_tensor(batch.directions, dtype=dtype),
            torch.as_tensor(batch.video_ids, dtype=torch.int64),
            torch.as_tensor(batch.near, dtype=dtype),
            torch.as_tensor(batch.far, dtype=dtype),
        )

    @classmethod
    def from_rays(cls, rays: list[Ray], dtype=torch.float32) -> "RayBundle":
        return cls(
            torch.as_tensor(np.array([r.origin for r in rays]), dtype=dtype),
            torch.as_tensor(np.array([r.direction for r in rays]), dtype=dtype),
            torch.as_tensor([r.video_id for r in rays], dtype=torch.int64),
            torch.as_tensor([r.near for r in rays], dtype=dtype),
            torch.as_tensor([r.far for r in rays], dtype=dtype),
        )

    def __getitem__(self, sl) -> "RayBundle":
        return RayBundle(self.origins[sl], self.directions[sl], self.video_ids[sl], self.near[sl], self.far[sl])


def clip_to_box(rays: RayBundle, box: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Intersect each ray's [near, far] with an axis-aligned box.

    Returns ``(near, far, valid)``; rays that miss keep a tiny dummy interval
    and ``valid = False`` so callers can zero their densities.
    """
    box = box.to(rays.origins.dtype)
    with torch.no_grad():
        inv = 1.0 / rays.directions
        t0 = (box[0] - rays.origins) * inv
        t1 = (box[1] - rays.origins) * inv
        tmin = torch.minimum(t0, t1).nan_to_num(nan=-torch.inf).amax(dim=-1)
        tmax = torch.maximum(t0, t1).nan_to_num(nan=torch.inf).amin(dim=-1)
        near = torch.maximum(rays.near, tmin)
        far = torch.minimum(rays.far, tmax)
        valid = far > near
        far = torch.where(valid, far, near + 1e-4)
    return near, far, valid


def sample_uniform(near, far, n: int, stratified: bool = False, generator: torch.Generator | None = None) -> Tensor:
    """``n`` sorted depths per ray: bin midpoints, or one uniform draw per bin."""
    if n < 2:
        raise ValueError("n must be >= 2")
    near = torch.as_tensor(near, dtype=torch.get_default_dtype() if not torch.is_tensor(near) else near.dtype)
    far = torch.as_tensor(far, dtype=near.dtype)
    single = near.dim() == 0
    near, far = near.reshape(-1, 1), far.reshape(-1, 1)
    i = torch.arange(n, dtype=near.dtype)
    if stratified:
        u = torch.rand(near.shape[0], n, generator=generator, dtype=near.dtype)
    else:
        u = torch.full((near.shape[0], n), 0.5, dtype=near.dtype)
    t = near + (far - near) * (i + u) / n
    return t[0] if single else t


def intervals(depths: Tensor, far: Tensor) -> Tensor:
    """Per-sample interval lengths; the last sample extends to ``far``."""
    far = torch.as_tensor(far, dtype=depths.dtype).reshape(*depths.shape[:-1], 1)
    return torch.diff(torch.cat([depths, far], dim=-1), dim=-1)


def composite_weights(sigma: Tensor, deltas: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Opacities, transmittances and compositing weights ``T_i * alpha_i``."""
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    excl = torch.cat([torch.zeros_like(tau[..., :1]), torch.cumsum(tau[..., :-1], dim=-1)], dim=-1)
    trans = torch.exp(-excl)
    return alpha, trans, trans * alpha


def resample_from_weights(
    depths: Tensor,
    weights: Tensor,
    n: int,
    far,
    near=None,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    padding: float = 0.0,
) -> Tensor:
    """Inverse-CDF sampling from mass ``w_i`` spread uniformly over ``[t_i, t_{i+1})``.

    Rays whose weights are all zero fall back to :func:`sample_uniform` over
    ``[near, far]`` (``near`` defaults to the first depth).
    """
    depths = depths.detach()
    weights = weights.detach().clamp_min(0.0)
    single = depths.dim() == 1
    if single:
        depths, weights = depths[None], weights[None]
    R, N = depths.shape
    far = torch.as_tensor(far, dtype=depths.dtype).reshape(-1, 1).expand(R, 1)
    near = depths[:, :1] if near is None else torch.as_tensor(near, dtype=depths.dtype).reshape(-1, 1).expand(R, 1)
    edges = torch.cat([depths, far], dim=-1)
    total = weights.sum(dim=-1, keepdim=True)
    empty = total <= EPS
    if padding > 0:
        weights = weights + padding * total / N
        total = weights.sum(dim=-1, keepdim=True)
    pdf = weights / total.clamp_min(EPS)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, dim=-1)], dim=-1)
    cdf = cdf / cdf[:, -1:].clamp_min(EPS)
    i = torch.arange(n, dtype=depths.dtype)
    if stratified:
        u = (i + torch.rand(R, n, generator=generator, dtype=depths.dtype)) / n
    else:
        u = ((i + 0.5) / n).expand(R, n)
    u = u.contiguous()
    idx = (torch.searchsorted(cdf, u, right=True) - 1).clamp(0, N - 1)
    c0 = torch.gather(cdf, 1, idx)
    p = torch.gather(pdf, 1, idx)
    lo = torch.gather(edges, 1, idx)
    hi = torch.gather(edges, 1, idx + 1)
    frac = torch.where(p > 0, (u - c0) / p.clamp_min(EPS), torch.zeros_like(u)).clamp(0.0, 1.0)
    t = lo + frac * (hi - lo)
    t, _ = torch.sort(t, dim=-1)
    if empty.any():
        fallback = sample_uniform(near[:, 0], far[:, 0], n, stratified, generator)
        t = torch.where(empty, fallback, t)
    return t[0] if single else t


def assign_subfield(centroids, x) -> Tensor:
    """Nearest sub-field centroid per point (squared L2, ties to the lowest index)."""
    centroids = torch.as_tensor(centroids)
    x = torch.as_tensor(x, dtype=centroids.dtype)
    single = x.dim() == 1
    x = x.reshape(-1, 3)
    diff = x[:, None, :] - centroids[None, :, :]
    idx = torch.argmin((diff * diff).sum(dim=-1), dim=-1)
    return idx[0] if single else idx


@dataclass
class RaySampleBatch:
    depths: Tensor
    positions: Tensor
    assignment: Tensor
    density: Tensor
    color: Tensor
    feature: Tensor
    alpha: Tensor
    transmittance: Tensor
    weights: Tensor
    rgb: Tensor
    features: Tensor
    opacity: Tensor
    depth: Tensor
    sky_rgb: Tensor
    sky_feature: Tensor
    near: Tensor
    far: Tensor

    @property
    def residual_transmittance(self) -> Tensor:
        return torch.prod(1.0 - self.alpha, dim=-1)


@dataclass
class ProposalStage:
    depths: Tensor
    weights: Tensor
    near: Tensor
    far: Tensor


def _query_routed(tile: TileField, x: Tensor, dir_enc: Tensor, emb: Tensor, reference: bool):
    P = x.shape[0]
    if reference:
        out = tile.subfields[0](x, dir_enc, emb)
        return out.density, out.color, out.feature, torch.zeros(P, dtype=torch.int64)
    idx = assign_subfield(tile.centroids.to(x.dtype), x)
    sigma = x.new_zeros(P)
    rgb = x.new_zeros(P, 3)
    feat = x.new_zeros(P, tile.feature_dim)
    for j, sf in enumerate(tile.subfields):
        sel = torch.nonzero(idx == j, as_tuple=True)[0]
        if sel.numel() == 0:
            continue
        out = sf(x[sel], dir_enc[sel], emb[sel])
        sigma = sigma.index_copy(0, sel, out.density)
        rgb = rgb.index_copy(0, sel, out.color)
        feat = feat.index_copy(0, sel, out.feature)
    return sigma, rgb, feat, idx


def composite(
    tile: TileField,
    rays: RayBundle,
    depths: Tensor,
    valid: Tensor | None = None,
    reference: bool = False,
) -> RaySampleBatch:
    """Query every sample from its nearest sub-field and alpha-composite over the sky.

    ``reference=True`` bypasses routing and evaluates sub-field 0 directly; it
    exists to check that single-sub-field routing reduces to the plain path.
    """
    if depths.dim() == 1:
        depths = depths[None].expand(len(rays), -1)
    if bool((torch.diff(depths, dim=-1) < 0).any()):
        raise ValueError("sample depths must be sorted ascending")
    R, N = depths.shape
    dtype = tile.box.dtype
    depths = depths.to(dtype)
    o = rays.origins.to(dtype)
    d = rays.directions.to(dtype)
    x = o[:, None, :] + depths[..., None] * d[:, None, :]
    dir_enc = tile.encode_directions(d)
    emb = tile.embed(rays.video_ids)
    flat = lambda t: t[:, None, :].expand(R, N, t.shape[-1]).reshape(R * N, -1)
    sigma, rgb, feat, idx = _query_routed(tile, x.reshape(-1, 3), flat(dir_enc), flat(emb), reference)
    sigma = sigma.reshape(R, N)
    if valid is not None:
        sigma = sigma * valid[:, None].to(dtype)
    rgb = rgb.reshape(R, N, 3)
    feat = feat.reshape(R, N, -1)
    far = rays.far.to(dtype)
    alpha, trans, w = composite_weights(sigma, intervals(depths, far))
    opacity = w.sum(dim=-1)
    sky_rgb, sky_feat = tile.sky_from_encoding(dir_enc, emb)
    rest = (1.0 - opacity)[:, None]
    rgb_map = (w[..., None] * rgb).sum(dim=1) + rest * sky_rgb
    feat_map = (w[..., None] * feat).sum(dim=1) + rest * sky_feat
    depth_map = (w * depths).sum(dim=-1) / opacity.clamp_min(1e-6)
    return RaySampleBatch(
        depths, x, idx.reshape(R, N), sigma, rgb, feat, alpha, trans, w,
        rgb_map, feat_map, opacity, depth_map, sky_rgb, sky_feat, rays.near.to(dtype), far,
    )


def proposal_weights(prop, rays: RayBundle, depths: Tensor, far: Tensor, valid: Tensor | None) -> Tensor:
    dtype = depths.dtype
    x = rays.origins.to(dtype)[:, None, :] + depths[..., None] * rays.directions.to(dtype)[:, None, :]
    sigma = prop(x.reshape(-1, 3)).reshape(depths.shape)
    if valid is not None:
        sigma = sigma * valid[:, None].to(dtype)
    return composite_weights(sigma, intervals(depths, far))[2]


def render_rays(
    tile: TileField,
    rays: RayBundle,
    cfg: ProposalConfig,
    stratified: bool = False,
    generator: torch.Generator | None = None,
    schedule: list[Tensor] | None = None,
) -> tuple[RaySampleBatch, list[ProposalStage]]:
    """Proposal stages followed by the full-field composite.

    Sample positions are detached at every resampling boundary, so gradients
    reach the proposal fields only through their own weights. ``schedule``
    (one depth tensor per stage plus the final one) replaces sampling with
    fixed depths; finite-difference checks use it to hold the stop-gradient
    values constant.
    """
    if len(cfg.stage_samples) != len(tile.proposals):
        raise ValueError("one proposal field per proposal stage is required")
    near, far, valid = clip_to_box(rays, tile.box)
    dtype = tile.box.dtype
    near, far = near.to(dtype), far.to(dtype)
    clipped = RayBundle(rays.origins, rays.directions, rays.video_ids, near, far)
    if schedule is not None and len(schedule) != len(tile.proposals) + 1:
        raise ValueError("schedule needs one depth tensor per stage plus the final stage")
    stages = []
    if schedule is not None:
        depths = schedule[0].to(dtype)
    else:
        depths = sample_uniform(near, far, cfg.stage_samples[0], stratified, generator)
    for k, prop in enumerate(tile.proposals):
        w = proposal_weights(prop, clipped, depths, far, valid)
        stages.append(ProposalStage(depths, w, near, far))
        if schedule is not None:
            depths = schedule[k + 1].to(dtype)
            continue
        n_next = cfg.stage_samples[k + 1] if k + 1 < len(cfg.stage_samples) else cfg.final_samples
        depths = resample_from_weights(
            depths, w, n_next, far, near, stratified, generator, cfg.histogram_padding
        )
    final = composite(tile, clipped, depths, valid)
    return final, stages


def render_ray(tile: TileField, ray: Ray, cfg: ProposalConfig, seed: int | None = None):
    """Render one ray; ``seed`` switches on stratified sampling with a fixed generator."""
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(seed)
    return render_rays(tile, RayBundle.from_rays([ray], tile.box.dtype), cfg, seed is not None, gen)


@dataclass
class RenderedImage:
    rgb: np.ndarray
    features: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray


@torch.no_grad()
def render_image(
    tile: TileField,
    frame: CameraFrame,
    cfg: ProposalConfig,
    near: float = 0.1,
    far: float = 200.0,
    chunk: int = 4096,
) -> RenderedImage:
    h, w = frame.shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    o, d = frame_rays(frame, rows.ravel(), cols.ravel())
    dtype = tile.box.dtype
    rays = RayBundle(
        torch.as_tensor(o, dtype=dtype),
        torch.as_tensor(d, dtype=dtype),
        torch.full((h * w,), frame.video_id, dtype=torch.int64),
        torch.full((h * w,), near, dtype=dtype),
        torch.full((h * w,), far, dtype=dtype),
    )
    parts = []
    for s in range(0, h * w, chunk):
        out, _ = render_rays(tile, rays[s : s + chunk], cfg)
        parts.append((out.rgb, out.features, out.opacity, out.depth))
    rgb, feat, acc, depth = (torch.cat(p).numpy() for p in zip(*parts))
    return RenderedImage(rgb.reshape(h, w, 3), feat.reshape(h, w, -1), acc.reshape(h, w), depth.reshape(h, w))
