"""Microbenchmarks for the hot kernels: hash encoding, compositing, voxel scatter."""

from __future__ import annotations

import csv
import io
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from . import kernels
from .extract import voxel_downsample_arrays
from .field import HashGrid, HashGridConfig
from .render import composite_weights

MIN_REPEATS = 10


@dataclass
class BenchReport:
    kernel: str
    size: str
    unit: str
    throughput: float
    median_s: float
    repeats: int
    threads: int
    machine: str


def machine_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()} py{platform.python_version()} torch{torch.__version__}"


def _median_time(fn: Callable[[], object], repeats: int) -> float:
    fn()  # warm-up (numba compilation, allocator)
    times = []
    for _ in range(max(repeats, MIN_REPEATS)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_hash_encode(n_points: int = 10**6, repeats: int = MIN_REPEATS, threads: int = 1) -> BenchReport:
    grid = HashGrid(HashGridConfig(8, 16, 512, 2, 2**17))
    x = torch.rand(n_points, 3) * 2 - 1
    torch.set_num_threads(threads)
    kernels.set_workers(threads)
    with torch.no_grad():
        t = _median_time(lambda: grid(x), repeats)
    return BenchReport("hash_encode", f"{n_points} points", "points/s", n_points / t, t, max(repeats, MIN_REPEATS), threads, machine_descriptor())


def _composite_inputs(n_rays: int, n_samples: int, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    sigma = torch.rand(n_rays, n_samples, generator=g) * 2.0
    deltas = torch.rand(n_rays, n_samples, generator=g) * 0.1
    colors = torch.rand(n_rays, n_samples, 3, generator=g)
    return sigma, deltas, colors


def _composite(sigma, deltas, colors):
    _, _, w = composite_weights(sigma, deltas)
    return (w[..., None] * colors).sum(dim=1)


def bench_composite(n_rays: int = 10**4, n_samples: int = 96, repeats: int = MIN_REPEATS, threads: int = 1) -> BenchReport:
    inputs = _composite_inputs(n_rays, n_samples)
    torch.set_num_threads(threads)
    t = _median_time(lambda: _composite(*inputs), repeats)
    return BenchReport("composite", f"{n_rays} rays x {n_samples} samples", "rays/s", n_rays / t, t, max(repeats, MIN_REPEATS), threads, machine_descriptor())


def bench_voxel_scatter(n_points: int = 10**4, feature_dim: int = 8, repeats: int = MIN_REPEATS) -> BenchReport:
    rng = np.random.default_rng(0)
    pos = rng.uniform(-10, 10, (n_points, 3))
    feat = rng.normal(size=(n_points, feature_dim)).astype(np.float32)
    t = _median_time(lambda: voxel_downsample_arrays(pos, feat, 0.5), repeats)
    return BenchReport("voxel_scatter", f"{n_points} points D={feature_dim}", "points/s", n_points / t, t, max(repeats, MIN_REPEATS), 1, machine_descriptor())


def composite_speedup(threads: int, n_rays: int = 10**4, n_samples: int = 96, repeats: int = MIN_REPEATS) -> float:
    """Single-thread median time over ``threads``-thread median time."""
    prev = torch.get_num_threads()
    try:
        serial = bench_composite(n_rays, n_samples, repeats, 1).median_s
        parallel = bench_composite(n_rays, n_samples, repeats, threads).median_s
    finally:
        torch.set_num_threads(prev)
    return serial / parallel


BENCHMARKS: dict[str, Callable[..., BenchReport]] = {
    "hash_encode": bench_hash_encode,
    "composite": bench_composite,
    "voxel_scatter": bench_voxel_scatter,
}


def run_benchmarks(selection=None, repeats: int = MIN_REPEATS, threads: int = 1, scale: float = 1.0) -> list[BenchReport]:
    """Run the selected kernels (all by default); ``scale`` shrinks input sizes for smoke runs."""
    names = list(BENCHMARKS) if not selection else list(selection)
    unknown = [n for n in names if n not in BENCHMARKS]
    if unknown:
        raise ValueError(f"unknown benchmark(s): {', '.join(unknown)}")
    prev_threads, prev_workers = torch.get_num_threads(), kernels.get_workers()
    out = []
    try:
        for name in names:
            if name == "hash_encode":
                out.append(bench_hash_encode(max(1, int(10**6 * scale)), repeats, threads))
            elif name == "composite":
                out.append(bench_composite(max(1, int(10**4 * scale)), 96, repeats, threads))
            else:
                out.append(bench_voxel_scatter(max(1, int(10**4 * scale)), 8, repeats))
    finally:
        torch.set_num_threads(prev_threads)
        kernels.set_workers(prev_workers)
    return out


def to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    fields = list(BenchReport.__dataclass_fields__)
    w = csv.DictWriter(buf, fields)
    w.writeheader()
    for r in reports:
        w.writerow(asdict(r))
    return buf.getvalue()
