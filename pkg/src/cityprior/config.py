"""Pipeline configuration: one JSON document with preset inheritance.

A config file may name a ``preset`` ("desk" or "paper") and override any
subset of its keys; nested sections are merged key by key. ``desk`` is the
CPU-friendly default, ``paper`` carries the full-scale values for reference.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import CityPriorError
from .field import HashGridConfig, TileFieldConfig
from .integrate import GridSpec
from .losses import LossWeights
from .render import ProposalConfig
from .train import TrainConfig

ENV_VAR = "CITYPRIOR_CONFIG"


class ConfigError(CityPriorError):
    pass


_DESK: dict[str, Any] = {
    "seed": 0,
    "threads": 1,
    "paths": {"manifest": None, "plan": "plan.json", "checkpoints": "checkpoints", "priors": "priors"},
    "partition": {"num_tiles": 1, "subfields_per_tile": 1, "margin": 50.0},
    "field": {
        "feature_dim": 8,
        "main_grid": {"num_levels": 8, "min_resolution": 16, "max_resolution": 512, "features_per_level": 2, "table_capacity": 2**17},
        "proposal_grids": [
            {"num_levels": 5, "min_resolution": 16, "max_resolution": 128, "features_per_level": 1, "table_capacity": 2**16},
            {"num_levels": 5, "min_resolution": 16, "max_resolution": 256, "features_per_level": 1, "table_capacity": 2**16},
        ],
        "hidden_width": 64,
        "hidden_layers": 2,
        "proposal_hidden_width": 64,
        "geo_feat_dim": 15,
        "embed_dim": 16,
        "sh_degree": 4,
    },
    "proposal": {"stage_samples": [64, 32], "final_samples": 32, "histogram_padding": 0.01},
    "train": {
        "iterations": 2000,
        "batch_size": 1024,
        "lr": 0.01,
        "decay": 0.33,
        "milestones": [0.25, 0.5, 0.75],
        "betas": [0.9, 0.999],
        "eps": 1e-15,
        "weight_decay": 1e-5,
        "grad_clip": 10.0,
        "holdout_pixels": 1024,
        "eval_every": 250,
        "checkpoint_every": 0,
    },
    "loss_weights": {"feat": 0.5, "sky": 0.001, "inter": 1.0, "dist": 0.002},
    "extract": {"stride": 4, "voxel_size": 0.2, "origin": [0.0, 0.0, 0.0]},
    "rasterize": {"x_range": [-50.0, 50.0], "y_range": [-25.0, 25.0], "resolution": 0.5, "z_range": [-5.0, 5.0], "num_height_bins": 4},
}

_PAPER_OVERRIDES: dict[str, Any] = {
    "partition": {"num_tiles": 8, "subfields_per_tile": 8},
    "field": {
        "feature_dim": 64,
        "main_grid": {"num_levels": 10, "min_resolution": 16, "max_resolution": 2**14, "features_per_level": 4, "table_capacity": 2**20},
        "proposal_grids": [
            {"num_levels": 8, "min_resolution": 16, "max_resolution": 2**10, "features_per_level": 1, "table_capacity": 2**20},
            {"num_levels": 8, "min_resolution": 16, "max_resolution": 2**10, "features_per_level": 1, "table_capacity": 2**20},
        ],
    },
    "proposal": {"stage_samples": [128, 64], "final_samples": 32},
    "train": {"iterations": 100_000, "batch_size": 2**16, "eval_every": 5000, "checkpoint_every": 10_000},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS: dict[str, dict] = {"desk": _DESK, "paper": _merge(_DESK, _PAPER_OVERRIDES)}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (known: {', '.join(sorted(PRESETS))})")
    return copy.deepcopy(PRESETS[name])


def resolve(doc: dict, default_preset: str = "desk") -> dict:
    """Apply preset inheritance: ``{"preset": "desk", ...overrides}``."""
    doc = dict(doc)
    base = preset(doc.pop("preset", default_preset))
    unknown = set(doc) - set(base)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return _merge(base, doc)


@dataclass
class PipelineConfig:
    raw: dict = field(default_factory=lambda: preset("desk"))

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def threads(self) -> int:
        return int(self.raw.get("threads", 1))

    @property
    def paths(self) -> dict:
        return self.raw["paths"]

    @property
    def partition(self) -> dict:
        return self.raw["partition"]

    @property
    def extract(self) -> dict:
        return self.raw["extract"]

    def field_config(self, box=None) -> TileFieldConfig:
        f = dict(self.raw["field"])
        f["main_grid"] = HashGridConfig.from_dict(f["main_grid"])
        f["proposal_grids"] = tuple(HashGridConfig.from_dict(g) for g in f["proposal_grids"])
        cfg = TileFieldConfig(**f)
        return cfg.with_box(box) if box is not None else cfg

    def proposal(self) -> ProposalConfig:
        p = self.raw["proposal"]
        return ProposalConfig(tuple(p["stage_samples"]), int(p["final_samples"]), float(p.get("histogram_padding", 0.0)))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.raw["loss_weights"])

    def train_config(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t["milestones"] = tuple(t["milestones"])
        t["betas"] = tuple(t["betas"])
        return TrainConfig(**t, seed=self.seed, loss_weights=self.loss_weights(), proposal=self.proposal())

    def grid_spec(self) -> GridSpec:
        r = self.raw["rasterize"]
        return GridSpec(tuple(r["x_range"]), tuple(r["y_range"]), float(r["resolution"]), tuple(r["z_range"]), int(r["num_height_bins"]))

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def validate(self) -> "PipelineConfig":
        try:
            self.field_config()
            self.train_config()
            self.grid_spec()
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        return self


def load_config(path=None, overrides: dict | None = None, default_preset: str | None = None) -> PipelineConfig:
    """Load ``path`` (or ``$CITYPRIOR_CONFIG``, or the desk preset) and apply ``overrides``."""
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
    raw = resolve(doc, default_preset or "desk")
    if overrides:
        raw = _merge(raw, overrides)
    return PipelineConfig(raw).validate()
