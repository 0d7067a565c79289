"""Command-line entry point: ``cityprior <subcommand> ...``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .config import ENV_VAR, ConfigError, PipelineConfig, load_config
from .errors import CityPriorError, DataError, NumericalError

log = logging.getLogger("cityprior")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def set_threads(n: int) -> None:
    """``n == 1`` is the deterministic mode."""
    n = max(1, int(n))
    torch.set_num_threads(n)
    kernels.set_workers(n)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing {what}: {p}")
    return p


def _parse_pose(values) -> tuple[np.ndarray, float]:
    x, y, z, yaw = (float(v) for v in values)
    return np.array([x, y, z]), yaw


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: PipelineConfig) -> int:
    from .dataset import write_manifest
    from .synthetic import box_scene, make_synthetic_scene, plane_scene

    spec = box_scene(phase=args.phase, seed=cfg.seed) if args.scene == "box" else plane_scene(seed=cfg.seed)
    if args.scene == "box" and args.cameras:
        spec = box_scene(n_cameras=args.cameras, phase=args.phase, seed=cfg.seed)
    manifest, _ = make_synthetic_scene(spec, role=args.role)
    path = write_manifest(manifest, Path(args.out) / "manifest.json")
    print(path)
    return EXIT_OK


def cmd_partition(args, cfg: PipelineConfig) -> int:
    from .dataset import load_manifest
    from .partition import plan_tiles

    manifest = load_manifest(_require(args.manifest, "manifest"))
    num_tiles = args.num_tiles or cfg.partition["num_tiles"]
    subfields = args.subfields or cfg.partition["subfields_per_tile"]
    try:
        plan = plan_tiles(manifest, num_tiles, subfields, cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    plan.save(args.out)
    print(f"{plan.num_tiles} tile(s) -> {args.out}")
    return EXIT_OK


def _tile_inputs(args, cfg: PipelineConfig):
    from .dataset import load_manifest
    from .partition import TilePlan, tile_bounds

    manifest = load_manifest(_require(args.manifest, "manifest"))
    plan = TilePlan.load(_require(args.plan, "tile plan"))
    if not 0 <= args.tile < plan.num_tiles:
        raise DataError(f"tile {args.tile} not in plan ({plan.num_tiles} tiles)")
    if len(plan.assignments) != len(manifest.frames):
        raise DataError("tile plan does not match the manifest frame count")
    frames = plan.frames_of(args.tile)
    box = tile_bounds(manifest, plan, args.tile, cfg.partition.get("margin", 50.0))
    return manifest, plan, frames, box


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .field import TileField
    from .train import train_tile

    manifest, plan, frames, box = _tile_inputs(args, cfg)
    sub = manifest.subset(frames)
    fcfg = cfg.field_config(box)
    if fcfg.feature_dim != manifest.feature_dim:
        fcfg = dataclasses.replace(fcfg, feature_dim=manifest.feature_dim)
    tile = TileField(fcfg, plan.subfield_centroids_per_tile[args.tile].tolist(), sub.video_ids(), seed=cfg.seed + args.tile)
    tcfg = cfg.train_config()
    out = Path(args.checkpoint_dir)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.csv"
    out.mkdir(parents=True, exist_ok=True)
    _, rows = train_tile(tile, sub, tcfg, out, metrics, meta={"tile": args.tile})
    last = rows[-1] if rows else {}
    print(json.dumps({"checkpoint": str(out / "final.ckpt"), "steps": len(rows), "psnr": last.get("psnr", "")}))
    return EXIT_OK


def cmd_render(args, cfg: PipelineConfig) -> int:
    from PIL import Image

    from .checkpoint import load_checkpoint
    from .dataset import load_manifest, rgb_to_u8, write_feature_map
    from .render import render_image

    tile, _ = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_require(args.manifest, "manifest"))
    if not 0 <= args.frame < len(manifest.frames):
        raise DataError(f"frame index {args.frame} out of range")
    img = render_image(tile, manifest.frames[args.frame], cfg.proposal(), manifest.near, manifest.far)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb_to_u8(img.rgb)).save(out / "rgb.png")
    Image.fromarray(rgb_to_u8(img.opacity)).save(out / "opacity.png")
    d = img.depth
    finite = d[img.opacity > 0.5]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    norm = np.clip((d - lo) / max(hi - lo, 1e-6), 0.0, 1.0)
    # simple blue-to-yellow ramp, transparent pixels black
    ramp = np.stack([norm, norm, 1.0 - norm], axis=-1) * (img.opacity[..., None] > 0.5)
    Image.fromarray(rgb_to_u8(ramp)).save(out / "depth.png")
    write_feature_map(out / "features.bin", img.features.astype(np.float32))
    print(out)
    return EXIT_OK


def cmd_extract(args, cfg: PipelineConfig) -> int:
    from .checkpoint import load_checkpoint
    from .dataset import load_manifest
    from .extract import extract_tile, save_prior, voxel_downsample
    from .partition import TilePlan

    tile, meta = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    manifest = load_manifest(_require(args.manifest, "manifest"))
    frames = None
    if args.plan:
        plan = TilePlan.load(_require(args.plan, "tile plan"))
        frames = plan.frames_of(int(meta.get("tile", 0))).tolist()
    ex = cfg.extract
    stride = args.stride or ex["stride"]
    voxel = args.voxel_size or ex["voxel_size"]

    points = extract_tile(tile, manifest, stride, cfg.proposal(), frames)
    grid = voxel_downsample(points, voxel, ex.get("origin", (0.0, 0.0, 0.0)), feature_dim=tile.feature_dim)
    save_prior(grid, args.out)
    print(f"{len(points)} surface points -> {len(grid)} voxels -> {args.out}")
    return EXIT_OK


def _load_priors(paths):
    from .extract import load_prior, merge

    grids = [load_prior(_require(p, "prior file")) for p in paths]
    try:
        return merge(*grids)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_query(args, cfg: PipelineConfig) -> int:
    from .extract import query_region

    grid = _load_priors(args.prior)
    center, yaw = _parse_pose(args.pose)
    cells = query_region(grid, center, args.half_extents, yaw)
    if args.format == "bin":
        # records: x y z weight f0..f{D-1}, float32 little-endian
        rec = np.concatenate([cells.positions, cells.weights[:, None], cells.features.astype(np.float64)], axis=1)
        data = rec.astype("<f4").tobytes()
        if args.out:
            Path(args.out).write_bytes(data)
        else:
            sys.stdout.buffer.write(data)
        return EXIT_OK
    lines = [f"# {len(cells)} cells: x y z weight f0..f{grid.feature_dim - 1} (ego frame)"]
    for p, f, w in cells:
        lines.append(" ".join([f"{v:.6g}" for v in p] + [f"{w:g}"] + [f"{v:.6g}" for v in f]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_rasterize(args, cfg: PipelineConfig) -> int:
    from dataclasses import replace

    from .dataset import write_feature_map
    from .extract import query_region
    from .integrate import rasterize_3d, rasterize_bev

    grid = _load_priors(args.prior)
    center, yaw = _parse_pose(args.pose)
    spec = cfg.grid_spec()
    if args.resolution:
        spec = replace(spec, resolution=args.resolution)
    if args.range:
        spec = replace(spec, x_range=(-args.range[0] / 2, args.range[0] / 2), y_range=(-args.range[1] / 2, args.range[1] / 2))
    if args.height_bins:
        spec = replace(spec, num_height_bins=args.height_bins)
    half = (
        max(abs(v) for v in spec.x_range),
        max(abs(v) for v in spec.y_range),
        max(abs(v) for v in spec.z_range),
    )
    # the bounding circle of the raster covers any yaw
    r = float(np.hypot(half[0], half[1]))
    cells = query_region(grid, center, (r, r, half[2]), yaw)
    if args.mode == "3d":
        out = rasterize_3d(cells, spec, grid.feature_dim)
        data = out.data.numpy()
        data = data.reshape(data.shape[0] * data.shape[1], data.shape[2], data.shape[3])
    else:
        data = rasterize_bev(cells, spec, grid.feature_dim).data.numpy()
    write_feature_map(args.out, np.ascontiguousarray(data, dtype=np.float32))
    print(f"{args.mode} grid {data.shape} -> {args.out}")
    return EXIT_OK


def cmd_selfcheck(args, cfg: PipelineConfig) -> int:
    from .selfcheck import run_selfcheck

    results = run_selfcheck()
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_bench(args, cfg: PipelineConfig) -> int:
    from .bench import run_benchmarks, to_csv

    reports = run_benchmarks(args.only, args.repeats, args.threads or cfg.threads, args.scale)
    text = to_csv(reports)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_config(args, cfg: PipelineConfig) -> int:
    print(cfg.to_json())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cityprior", description=__doc__.splitlines()[0])
    p.add_argument("--config", help=f"JSON config (default: ${ENV_VAR}, else the desk preset)")
    p.add_argument("--preset", choices=["desk", "paper"], help="base preset when no config file sets one")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="worker threads; 1 forces deterministic mode")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic test scene")
    s.add_argument("--scene", choices=["box", "plane"], default="box")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--role", choices=["train", "prior", "test"], default="train")
    s.add_argument("--phase", type=float, default=0.0, help="camera orbit phase (radians)")
    s.add_argument("--cameras", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("partition", help="K-Means tiles and sub-field centroids")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="tile plan JSON")
    s.add_argument("--num-tiles", type=int)
    s.add_argument("--subfields", type=int)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("train", help="optimise one tile")
    s.add_argument("--manifest", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--tile", type=int, default=0)
    s.add_argument("--checkpoint-dir", required=True)
    s.add_argument("--metrics", help="per-step loss CSV (default: <checkpoint-dir>/metrics.csv)")
    s.add_argument("--iterations", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one manifest frame from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("extract", help="surface extraction and voxel downsampling")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--plan", help="restrict to the checkpoint tile's frames")
    s.add_argument("--stride", type=int)
    s.add_argument("--voxel-size", type=float)
    s.add_argument("--out", required=True, help="prior file")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("query", help="cells of one or more prior files around an ego pose")
    s.add_argument("--prior", required=True, nargs="+")
    s.add_argument("--pose", required=True, nargs=4, metavar=("X", "Y", "Z", "YAW"))
    s.add_argument("--half-extents", nargs=3, type=float, default=[50.0, 25.0, 5.0])
    s.add_argument("--format", choices=["text", "bin"], default="text")
    s.add_argument("--out")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("rasterize", help="BEV or 3D feature grid around an ego pose")
    s.add_argument("--prior", required=True, nargs="+")
    s.add_argument("--pose", required=True, nargs=4, metavar=("X", "Y", "Z", "YAW"))
    s.add_argument("--range", nargs=2, type=float, metavar=("X_EXTENT", "Y_EXTENT"))
    s.add_argument("--resolution", type=float)
    s.add_argument("--height-bins", type=int)
    s.add_argument("--mode", choices=["bev", "3d"], default="bev")
    s.add_argument("--out", required=True, help="feature grid in the FEAT binary format")
    s.set_defaults(func=cmd_rasterize)

    s = sub.add_parser("selfcheck", help="run the built-in gradient and oracle checks")
    s.set_defaults(func=cmd_selfcheck)

    s = sub.add_parser("bench", help="kernel microbenchmarks (CSV)")
    s.add_argument("--only", nargs="*", choices=["hash_encode", "composite", "voxel_scatter"])
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--scale", type=float, default=1.0, help="input-size multiplier")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("config", help="print the resolved configuration")
    s.set_defaults(func=cmd_config)
    return p


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.threads is not None:
        o["threads"] = args.threads
    train = {}
    for key in ("iterations", "batch_size", "lr", "eval_every", "checkpoint_every"):
        v = getattr(args, key, None)
        if v is not None:
            train[key] = v
    if train:
        o["train"] = train
    return o


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args), default_preset=args.preset)
        set_threads(cfg.threads)
        return args.func(args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure in term {exc.term!r}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CityPriorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
