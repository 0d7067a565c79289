"""Per-tile optimisation loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .checkpoint import save_checkpoint
from .dataset import DatasetManifest, PixelPool, RayBatch, gather_rays
from .errors import NumericalError
from .field import TileField
from .losses import LossWeights, distortion_loss, feat_loss, interlevel_loss, rgb_loss, sky_loss, total_loss
from .render import ProposalConfig, RayBundle, render_rays

log = logging.getLogger(__name__)

LOSS_TERMS = ("rgb", "feat", "sky", "inter", "dist")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1024
    lr: float = 0.01
    decay: float = 0.33
    milestones: tuple[float, ...] = (0.25, 0.5, 0.75)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-15
    weight_decay: float = 1e-5
    grad_clip: float = 10.0
    seed: int = 0
    holdout_pixels: int = 1024
    eval_every: int = 250
    checkpoint_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    passed = sum(1 for m in cfg.milestones if step >= int(round(m * cfg.iterations)))
    return cfg.lr * cfg.decay**passed


def adamw_step(
    params: list[Tensor],
    grads: list[Tensor],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-15,
    weight_decay: float = 1e-5,
) -> dict:
    """One AdamW update (decoupled weight decay), applied to ``params`` in place."""
    b1, b2 = betas
    if not state:
        state.update(step=0, m=[torch.zeros_like(p) for p in params], v=[torch.zeros_like(p) for p in params])
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if weight_decay:
                p.mul_(1.0 - lr * weight_decay)
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


class AdamW:
    """Parameter groups, each with its own AdamW state."""

    def __init__(self, groups: dict[str, list[Tensor]], betas=(0.9, 0.999), eps=1e-15, weight_decay=1e-5):
        self.groups = groups
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.state: dict[str, dict] = {name: {} for name in groups}

    def step(self, grads: dict[str, list[Tensor]], lr: float) -> None:
        for name, params in self.groups.items():
            adamw_step(params, grads[name], self.state[name], lr, self.betas, self.eps, self.weight_decay)


def param_groups(tile: TileField) -> dict[str, list[Tensor]]:
    """Hash tables and embeddings in one group, network weights in the other."""
    enc, net = [], []
    for name, p in tile.named_parameters():
        (enc if name.endswith("table") or name.startswith("video_embeddings") else net).append(p)
    return {"encodings": enc, "networks": net}


def clip_by_global_norm(grads: list[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float(torch.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g.mul_(scale)
    return norm


def compute_terms(
    tile: TileField,
    batch: RayBatch,
    proposal: ProposalConfig,
    mask: np.ndarray | None = None,
    stratified: bool = True,
    generator: torch.Generator | None = None,
    frozen: dict | None = None,
) -> dict[str, Tensor]:
    """Render ``batch`` and return the five loss terms.

    Rays with ``mask == False`` (dynamic pixels) are dropped before rendering,
    so they contribute nothing to any term. ``frozen`` (from :func:`freeze`)
    pins every stop-gradient value, which turns the loss into a smooth
    function of the parameters for finite-difference checks.
    """
    if mask is not None:
        keep = np.nonzero(np.asarray(mask, dtype=bool))[0]
        batch = _select(batch, keep)
    dtype = tile.box.dtype
    rays = RayBundle.from_batch(batch, dtype)
    schedule = frozen["schedule"] if frozen else None
    final, stages = render_rays(tile, rays, proposal, stratified, generator, schedule)
    rgb_t = torch.as_tensor(batch.rgb, dtype=dtype)
    feat_t = torch.as_tensor(batch.feature, dtype=dtype)
    sky_t = torch.as_tensor(batch.is_sky)
    return {
        "rgb": rgb_loss(final.rgb, rgb_t),
        "feat": feat_loss(final.features, feat_t),
        "sky": sky_loss(final.opacity, sky_t),
        "inter": interlevel_loss(final, stages, frozen["final_weights"] if frozen else None),
        "dist": distortion_loss(final.depths, final.weights, final.near, final.far),
    }


@torch.no_grad()
def freeze(tile: TileField, batch: RayBatch, proposal: ProposalConfig) -> dict:
    """Stop-gradient values of a deterministic render: sample depths and final weights."""
    rays = RayBundle.from_batch(batch, tile.box.dtype)
    final, stages = render_rays(tile, rays, proposal)
    return {"schedule": [s.depths for s in stages] + [final.depths], "final_weights": final.weights}


def _select(batch: RayBatch, idx: np.ndarray) -> RayBatch:
    return RayBatch(**{f.name: getattr(batch, f.name)[idx] for f in dataclasses.fields(RayBatch)})


def check_finite(terms: dict[str, Tensor]) -> None:
    for name, v in terms.items():
        if not torch.isfinite(v).all():
            raise NumericalError(f"non-finite {name} loss ({float(v.detach())})", term=name)


def holdout_mask(manifest: DatasetManifest, count: int, seed: int) -> tuple[dict[int, np.ndarray], RayBatch | None]:
    """Fixed random non-dynamic pixels kept out of training for PSNR."""
    pool = PixelPool(manifest)
    if count <= 0 or len(pool) <= count:
        return {}, None
    rng = np.random.default_rng([seed, 0x5EED])
    pick = np.sort(rng.choice(len(pool), size=count, replace=False))
    excl: dict[int, np.ndarray] = {}
    for f, r, c in zip(pool.frame[pick], pool.row[pick], pool.col[pick]):
        m = excl.setdefault(int(f), np.zeros(manifest.frames[f].shape, dtype=bool))
        m[r, c] = True
    return excl, gather_rays(manifest, pool.frame[pick], pool.row[pick], pool.col[pick])


@torch.no_grad()
def evaluate_psnr(tile: TileField, batch: RayBatch, proposal: ProposalConfig, chunk: int = 4096) -> tuple[float, float]:
    """PSNR (dB) and feature MSE of deterministic renders against ``batch`` targets."""
    dtype = tile.box.dtype
    rays = RayBundle.from_batch(batch, dtype)
    se_rgb = 0.0
    se_feat = 0.0
    for s in range(0, len(rays), chunk):
        out, _ = render_rays(tile, rays[s : s + chunk], proposal)
        se_rgb += float(((out.rgb - torch.as_tensor(batch.rgb[s : s + chunk], dtype=dtype)) ** 2).sum())
        se_feat += float(((out.features - torch.as_tensor(batch.feature[s : s + chunk], dtype=dtype)) ** 2).sum())
    mse = se_rgb / (len(rays) * 3)
    fmse = se_feat / (len(rays) * batch.feature.shape[1])
    return -10.0 * math.log10(max(mse, 1e-12)), fmse


def train_tile(
    tile: TileField,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    checkpoint_dir=None,
    metrics_path=None,
    meta: dict | None = None,
) -> tuple[TileField, list[dict]]:
    """Optimise ``tile`` on the non-dynamic pixels of ``manifest``."""
    if cfg.iterations == 0:
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(tile, Path(checkpoint_dir) / "final.ckpt", {**(meta or {}), "step": 0})
        return tile, []
    excl, holdout = holdout_mask(manifest, cfg.holdout_pixels, cfg.seed)
    pool = PixelPool(manifest, excl)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    groups = param_groups(tile)
    opt = AdamW(groups, cfg.betas, cfg.eps, cfg.weight_decay)
    rows: list[dict] = []
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, ["step", "lr", "total", *LOSS_TERMS, "grad_norm", "psnr", "feat_mse"])
        writer.writeheader()
    try:
        for step in range(cfg.iterations):
            lr = lr_at(step, cfg)
            batch = pool.sample(cfg.batch_size, rng)
            terms = compute_terms(tile, batch, cfg.proposal, generator=gen)
            check_finite(terms)
            loss, parts = total_loss(terms, cfg.loss_weights)
            flat = [p for ps in groups.values() for p in ps]
            grads = torch.autograd.grad(loss, flat, allow_unused=True)
            grads = [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, flat)]
            gnorm = clip_by_global_norm(grads, cfg.grad_clip)
            if not math.isfinite(gnorm):
                raise NumericalError(f"non-finite gradient norm at step {step}", term="grad")
            it = iter(grads)
            opt.step({name: [next(it) for _ in ps] for name, ps in groups.items()}, lr)
            row = {"step": step + 1, "lr": lr, **parts, "grad_norm": gnorm, "psnr": "", "feat_mse": ""}
            last = step + 1 == cfg.iterations
            if holdout is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
                row["psnr"], row["feat_mse"] = evaluate_psnr(tile, holdout, cfg.proposal)
                log.info("step %d loss %.5f psnr %.2f", step + 1, parts["total"], row["psnr"])
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
            if ckpt_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and not last:
                save_checkpoint(tile, ckpt_dir / f"step_{step + 1:06d}.ckpt", {**(meta or {}), "step": step + 1})
        if ckpt_dir is not None:
            save_checkpoint(tile, ckpt_dir / "final.ckpt", {**(meta or {}), "step": cfg.iterations})
    finally:
        if fh is not None:
            fh.close()
    return tile, rows
