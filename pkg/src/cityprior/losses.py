"""Photometric, semantic, sky, interlevel and distortion losses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
from torch import Tensor

from .render import ProposalStage, RaySampleBatch

SKY_EPS = 1e-6
INTERLEVEL_EPS = 1e-7


@dataclass
class LossWeights:
    feat: float = 0.5
    sky: float = 0.001
    inter: float = 1.0
    dist: float = 0.002

    def __post_init__(self):
        if min(self.feat, self.sky, self.inter, self.dist) < 0:
            raise ValueError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def rgb_loss(pred: Tensor, target: Tensor) -> Tensor:
    return torch.mean((pred - target) ** 2)


def feat_loss(pred: Tensor, target: Tensor) -> Tensor:
    return torch.mean((pred - target) ** 2)


def sky_loss(opacity: Tensor, is_sky: Tensor) -> Tensor:
    """BCE pushing opacity to 0 on sky pixels and to 1 elsewhere."""
    o = opacity.clamp(SKY_EPS, 1.0 - SKY_EPS)
    target = 1.0 - is_sky.to(o.dtype)
    return -torch.mean(target * torch.log(o) + (1.0 - target) * torch.log(1.0 - o))


def _edges(depths: Tensor, far: Tensor) -> Tensor:
    return torch.cat([depths, far.reshape(-1, 1).to(depths.dtype)], dim=-1)


def interlevel_bounds(query_edges: Tensor, source_edges: Tensor, source_weights: Tensor) -> Tensor:
    """Sum of source weights over source intervals overlapping each query interval."""
    a = query_edges[:, :-1].contiguous()
    b = query_edges[:, 1:].contiguous()
    # source interval i = [e_i, e_{i+1}) overlaps [a, b) iff e_{i+1} > a and e_i < b
    lo = torch.searchsorted(source_edges[:, 1:].contiguous(), a, right=True)
    hi = torch.searchsorted(source_edges[:, :-1].contiguous(), b, right=False)
    cum = torch.cat([torch.zeros_like(source_weights[:, :1]), torch.cumsum(source_weights, dim=-1)], dim=-1)
    bound = torch.gather(cum, 1, hi) - torch.gather(cum, 1, lo)
    return torch.where(hi > lo, bound, torch.zeros_like(bound))


def interlevel_loss(final: RaySampleBatch, stages: list[ProposalStage], target_weights: Tensor | None = None) -> Tensor:
    """Each final weight must be covered by the proposal mass overlapping it.

    For every final interval the bound is the summed weight of the proposal
    intervals that overlap it, and any excess of the final weight over that
    bound costs ``excess^2 / (w_final + eps)``. Final-stage quantities are
    detached: only proposal parameters receive gradient. ``target_weights``
    overrides the (detached) final weights.
    """
    f_edges = _edges(final.depths, final.far).detach()
    f_w = (final.weights if target_weights is None else target_weights).detach()
    total = f_w.new_zeros(())
    for st in stages:
        p_edges = _edges(st.depths, st.far).detach()
        bound = interlevel_bounds(f_edges, p_edges, st.weights)
        total = total + torch.mean(torch.sum(torch.clamp(f_w - bound, min=0.0) ** 2 / (f_w + INTERLEVEL_EPS), dim=-1))
    return total


def distortion_loss(depths: Tensor, weights: Tensor, near: Tensor, far: Tensor) -> Tensor:
    """Pairwise |s_i - s_j| weight spread plus the (1/3) w^2 interval self-term.

    ``s`` are sample depths normalised to [0, 1] over [near, far]; the last
    interval runs to s = 1.
    """
    near = near.reshape(-1, 1).to(depths.dtype)
    far = far.reshape(-1, 1).to(depths.dtype)
    s = (depths - near) / (far - near)
    s_next = torch.cat([s[:, 1:], torch.ones_like(s[:, :1])], dim=-1)
    w_before = torch.cumsum(weights, dim=-1) - weights
    ws_before = torch.cumsum(weights * s, dim=-1) - weights * s
    pair = 2.0 * torch.sum(weights * (s * w_before - ws_before), dim=-1)
    self_term = torch.sum(weights**2 * (s_next - s), dim=-1) / 3.0
    return torch.mean(pair + self_term)


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    total = (
        terms["rgb"]
        + weights.feat * terms["feat"]
        + weights.sky * terms["sky"]
        + weights.inter * terms["inter"]
        + weights.dist * terms["dist"]
    )
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
