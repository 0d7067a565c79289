"""Built-in gradient and oracle checks, run by ``cityprior selfcheck``.

Each check is small enough to finish in a few seconds on one core. The test
suite runs the full-size versions of the same properties.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

from .dataset import RayBatch
from .extract import merge, voxel_downsample_arrays
from .field import HashGridConfig, TileField, TileFieldConfig, sh_encode
from .integrate import BEVFeatureGrid, FusionHead, GridSpec, fuse
from .losses import LossWeights, distortion_loss, interlevel_bounds
from .render import ProposalConfig, assign_subfield, composite_weights
from .train import compute_terms, freeze, total_loss

TINY_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def tiny_config(feature_dim: int = 4) -> TileFieldConfig:
    """2 hash levels, 16-entry tables; small enough for exhaustive finite differences."""
    main = HashGridConfig(2, 2, 4, 2, 16, TINY_BOX)
    prop = HashGridConfig(2, 2, 4, 1, 16, TINY_BOX)
    return TileFieldConfig(
        feature_dim=feature_dim,
        main_grid=main,
        proposal_grids=(prop, prop),
        hidden_width=8,
        hidden_layers=2,
        proposal_hidden_width=8,
        geo_feat_dim=7,
        embed_dim=4,
        sh_degree=2,
    )


def tiny_tile(seed: int = 0, subfields: int = 2) -> TileField:
    """Float64 tile with every parameter randomised away from its (degenerate) init."""
    cfg = tiny_config()
    cents = [[-0.3, 0.0, 0.0], [0.4, 0.1, 0.0], [0.0, 0.5, 0.2]][:subfields]
    tile = TileField(cfg, cents, [0, 1], seed=seed).double()
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in tile.named_parameters():
            scale = 0.5 if name.endswith("table") or "embed" in name else 0.3
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return tile


def tiny_batch(n_rays: int = 4, feature_dim: int = 4, seed: int = 0) -> RayBatch:
    rng = np.random.default_rng(seed)
    origins = rng.uniform(-0.2, 0.2, (n_rays, 3)) + np.array([0.0, 0.0, -2.0])
    target = rng.uniform(-0.5, 0.5, (n_rays, 3))
    d = target - origins
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch(
        origins, d, np.arange(n_rays) % 2, np.zeros(n_rays, np.int64), np.zeros((n_rays, 2), np.int64),
        np.full(n_rays, 0.1), np.full(n_rays, 6.0),
        rng.uniform(0, 1, (n_rays, 3)).astype(np.float32),
        rng.normal(0, 0.5, (n_rays, feature_dim)).astype(np.float32),
        np.arange(n_rays) % 3 == 0,
    )


TINY_PROPOSAL = ProposalConfig((8, 8), 8, 0.01)


def param_class(name: str) -> str:
    if name.startswith("proposals."):
        return "proposal fields"
    if name.startswith("sky."):
        return "sky mlp"
    if name.startswith("video_embeddings"):
        return "video embeddings"
    for part, label in (("hash_grid", "hash tables"), ("trunk", "trunk"), ("color_head", "color head"), ("feature_head", "feature head")):
        if f".{part}." in name:
            return label
    return "other"


def gradient_check(
    tile: TileField,
    batch: RayBatch,
    proposal: ProposalConfig = TINY_PROPOSAL,
    weights: LossWeights = LossWeights(),
    h: float = 1e-4,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> dict[str, tuple[float, int]]:
    """Central differences of the total loss vs autograd, worst error per parameter class.

    Error per entry is ``|a - n| / max(|a|, |n|)``, or 0 when both are below
    1e-6 in magnitude and differ by less than 1e-8.
    """
    frozen = freeze(tile, batch, proposal)

    def loss() -> torch.Tensor:
        return total_loss(compute_terms(tile, batch, proposal, stratified=False, frozen=frozen), weights)[0]

    params = dict(tile.named_parameters())
    grads = torch.autograd.grad(loss(), list(params.values()), allow_unused=True)
    rng = np.random.default_rng(seed)
    worst: dict[str, tuple[float, int]] = {}
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            flat, gflat = p.view(-1), g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_per_tensor is not None and len(idx) > max_per_tensor:
                idx = rng.choice(idx, max_per_tensor, replace=False)
            cls = param_class(name)
            err, count = worst.get(cls, (0.0, 0))
            for i in idx:
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss())
                flat[i] = old - h
                down = float(loss())
                flat[i] = old
                num = (up - down) / (2 * h)
                ana = float(gflat[i])
                if max(abs(num), abs(ana)) < 1e-6:
                    e = 0.0 if abs(num - ana) < 1e-8 else math.inf
                else:
                    e = abs(num - ana) / max(abs(num), abs(ana))
                err = max(err, e)
                count += 1
            worst[cls] = (err, count)
    return worst


# ---------------------------------------------------------------- checks


def check_gradients() -> tuple[bool, str]:
    torch.manual_seed(0)
    worst = gradient_check(tiny_tile(), tiny_batch(), max_per_tensor=6)
    bad = {k: v for k, v in worst.items() if v[0] >= 1e-3}
    detail = ", ".join(f"{k}={v[0]:.1e}" for k, v in sorted(worst.items()))
    return not bad, detail


def check_conservation() -> tuple[bool, str]:
    g = torch.Generator().manual_seed(0)
    sigma = torch.rand(1000, 32, generator=g, dtype=torch.float64) * 5
    deltas = torch.rand(1000, 32, generator=g, dtype=torch.float64) * 0.2
    alpha, _, w = composite_weights(sigma, deltas)
    err = float((w.sum(-1) + torch.prod(1 - alpha, -1) - 1).abs().max())
    return err < 1e-6, f"max |sum w + T_end - 1| = {err:.1e}"


def check_transmittance() -> tuple[bool, str]:
    sigma, L, n = 1.7, 2.3, 16
    depths = torch.linspace(0.0, L, n + 1, dtype=torch.float64)[:-1]
    deltas = torch.diff(torch.cat([depths, torch.tensor([L], dtype=torch.float64)]))
    _, _, w = composite_weights(torch.full((n,), sigma, dtype=torch.float64), deltas)
    err = abs(float(w.sum()) - (1 - math.exp(-sigma * L)))
    return err < 1e-6, f"|O - (1 - exp(-sigma L))| = {err:.1e}"


def check_voxel_mean() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    p = rng.uniform(-2, 2, (2000, 3))
    f = rng.normal(size=(2000, 4)).astype(np.float32)
    g = voxel_downsample_arrays(p, f, 0.5)
    ok_merge = merge(voxel_downsample_arrays(p[:700], f[:700], 0.5), voxel_downsample_arrays(p[700:], f[700:], 0.5)) == g
    # brute force with exact fractions
    from fractions import Fraction

    cells: dict = {}
    for pi, fi in zip(p, f):
        key = tuple(int(v) for v in np.floor(pi / np.float64(np.float32(0.5))))
        cells.setdefault(key, []).append(fi)
    ok_mean = len(cells) == len(g)
    for idx, feat, w in zip(g.indices, g.features, g.weights):
        members = cells[tuple(int(v) for v in idx)]
        exp = [np.float32(float(sum(Fraction(float(m[c])) for m in members) / len(members))) for c in range(4)]
        ok_mean &= w == len(members) and np.array_equal(np.array(exp, np.float32), feat)
    return bool(ok_merge and ok_mean), f"{len(g)} cells, merge identity {'holds' if ok_merge else 'FAILS'}"


def check_losses() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    R, N, M = 8, 10, 6
    f_edges = torch.tensor(np.sort(rng.uniform(0, 1, (R, N + 1)), axis=1))
    p_edges = torch.tensor(np.sort(rng.uniform(0, 1, (R, M + 1)), axis=1))
    w = torch.tensor(rng.uniform(0, 1, (R, N)))
    fast = interlevel_bounds(p_edges, f_edges, w)
    slow = torch.zeros(R, M, dtype=torch.float64)
    for r in range(R):
        for a in range(M):
            for i in range(N):
                if f_edges[r, i + 1] > p_edges[r, a] and f_edges[r, i] < p_edges[r, a + 1]:
                    slow[r, a] += w[r, i]
    e1 = float((fast - slow).abs().max())
    s = torch.tensor(np.sort(rng.uniform(0, 1, (R, N)), axis=1))
    ww = torch.tensor(rng.uniform(0, 0.2, (R, N)))
    eff = distortion_loss(s, ww, torch.zeros(R), torch.ones(R))
    s_next = torch.cat([s[:, 1:], torch.ones(R, 1, dtype=s.dtype)], 1)
    direct = (ww[:, :, None] * ww[:, None, :] * (s[:, :, None] - s[:, None, :]).abs()).sum((1, 2))
    direct = (direct + (ww**2 * (s_next - s)).sum(1) / 3).mean()
    e2 = abs(float(eff - direct))
    return max(e1, e2) < 1e-6, f"interlevel {e1:.1e}, distortion {e2:.1e}"


def check_fusion_identity() -> tuple[bool, str]:
    spec = GridSpec((-2.0, 2.0), (-1.0, 1.0), 0.25)
    g = torch.Generator().manual_seed(0)
    online = BEVFeatureGrid(spec, torch.randn(spec.height, spec.width, 5, generator=g))
    prior = BEVFeatureGrid(spec, torch.zeros(spec.height, spec.width, 3))
    with torch.no_grad():
        out = fuse(online, prior, FusionHead(5, 3))
    err = float((out.data - online.data).abs().max())
    return err < 1e-6, f"max |fuse - online| = {err:.1e}"


def check_sh() -> tuple[bool, str]:
    d = torch.randn(100, 3, dtype=torch.float64)
    d = d / d.norm(dim=-1, keepdim=True)
    err = float(((sh_encode(d, 4) ** 2).sum(-1) - 16 / (4 * math.pi)).abs().max())
    return err < 1e-9, f"addition theorem error {err:.1e}"


def check_routing() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    c = rng.normal(size=(7, 3))
    x = rng.normal(size=(100, 3))
    got = assign_subfield(torch.tensor(c), torch.tensor(x)).numpy()
    exp = [min(range(7), key=lambda j: (float(np.sum((xi - c[j]) ** 2)), j)) for xi in x]
    return bool(np.array_equal(got, exp)), "nearest-centroid scan"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "gradient finite differences": check_gradients,
    "compositing conservation": check_conservation,
    "analytic transmittance": check_transmittance,
    "voxel mean and merge": check_voxel_mean,
    "interlevel / distortion oracles": check_losses,
    "fusion identity": check_fusion_identity,
    "spherical harmonics": check_sh,
    "sub-field routing": check_routing,
}


def run_selfcheck() -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't abort the remaining checks
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, ok, detail))
    return out
