import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from cityprior import kernels
from cityprior.config import load_config
from cityprior.field import TileField
from cityprior.synthetic import box_scene, make_synthetic_scene, plane_scene
from cityprior.train import train_tile

# Iteration budgets for the trained-scene fixtures (desk preset otherwise).
BOX_ITERATIONS = 2000
PLANE_ITERATIONS = 4000


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.fixture(autouse=True)
def _deterministic():
    torch.set_num_threads(1)
    kernels.set_workers(1)
    yield


@pytest.fixture(scope="session")
def box():
    return make_synthetic_scene(box_scene())


@pytest.fixture(scope="session")
def plane():
    return make_synthetic_scene(plane_scene())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _train(scene, iterations):
    manifest, oracle = scene
    cfg = load_config(overrides={"train": {"iterations": iterations}})
    torch.set_num_threads(1)
    kernels.set_workers(1)
    tile = TileField(cfg.field_config(manifest.bounds), [manifest.camera_positions().mean(0)], manifest.video_ids(), seed=0)
    t0 = time.perf_counter()
    tile, rows = train_tile(tile, manifest, cfg.train_config())
    return SimpleNamespace(tile=tile, rows=rows, seconds=time.perf_counter() - t0, manifest=manifest, oracle=oracle, cfg=cfg)


@pytest.fixture(scope="session")
def trained_box(box):
    return _train(box, BOX_ITERATIONS)


@pytest.fixture(scope="session")
def trained_plane(plane):
    return _train(plane, PLANE_ITERATIONS)


# ----------------------------------------------------------------- acceptance report

_RESULTS: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        _RESULTS[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, detail = _RESULTS[n]
        terminalreporter.write_line(f"[{status}] criterion {n:2d}: {title}" + (f"  ({detail})" if detail else ""))
