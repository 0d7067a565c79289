import math

import numpy as np
import pytest
import torch
from analytic import plane_tile
from hypothesis import given, settings
from hypothesis import strategies as st

from cityprior.dataset import CameraFrame, CameraIntrinsics, Pose, Ray
from cityprior.render import (
    ProposalConfig,
    RayBundle,
    assign_subfield,
    clip_to_box,
    composite,
    composite_weights,
    intervals,
    render_image,
    render_ray,
    render_rays,
    resample_from_weights,
    sample_uniform,
)
from cityprior.selfcheck import tiny_tile
from cityprior.synthetic import look_at

F64 = torch.float64


def bundle(o, d, near=0.0, far=5.0, vid=0):
    o = torch.as_tensor(np.atleast_2d(o), dtype=F64)
    d = torch.as_tensor(np.atleast_2d(d), dtype=F64)
    d = d / d.norm(dim=-1, keepdim=True)
    n = len(o)
    return RayBundle(o, d, torch.full((n,), vid), torch.full((n,), near, dtype=F64), torch.full((n,), far, dtype=F64))


# ----------------------------------------------------------------- sampling


def test_uniform_midpoints():
    assert torch.allclose(sample_uniform(0.0, 1.0, 2), torch.tensor([0.25, 0.75]))
    with pytest.raises(ValueError):
        sample_uniform(0.0, 1.0, 1)


def test_stratified_reproducible():
    a = sample_uniform(torch.zeros(3), torch.ones(3), 16, True, torch.Generator().manual_seed(4))
    b = sample_uniform(torch.zeros(3), torch.ones(3), 16, True, torch.Generator().manual_seed(4))
    assert torch.equal(a, b)
    assert bool((torch.diff(a, dim=-1) >= 0).all())


def test_stratified_ks():
    t = sample_uniform(torch.tensor(0.0, dtype=F64), torch.tensor(1.0, dtype=F64), 1000, True, torch.Generator().manual_seed(0))
    x = np.sort(t.numpy())
    n = len(x)
    ks = max(np.max(np.arange(1, n + 1) / n - x), np.max(x - np.arange(n) / n))
    # 1% critical value of the one-sample KS statistic
    assert ks < 1.63 / math.sqrt(n)


def test_resample_concentrated():
    d = torch.linspace(0, 0.9, 10, dtype=F64)[None]
    w = torch.zeros(1, 10, dtype=F64)
    w[0, 4] = 1.0
    t = resample_from_weights(d, w, 64, 1.0)
    assert bool(((t >= 0.4) & (t <= 0.5)).all())


def test_resample_uniform_reduces():
    near, far = torch.tensor([0.0], dtype=F64), torch.tensor([1.0], dtype=F64)
    d = torch.linspace(0, 0.9, 10, dtype=F64)[None]  # equal-width intervals covering [0, 1]
    t = resample_from_weights(d, torch.full((1, 10), 0.1, dtype=F64), 20, far, near)
    assert torch.allclose(t, sample_uniform(near, far, 20), atol=1e-12)
    # all-zero weights fall back to uniform over [near, far]
    t = resample_from_weights(d, torch.zeros(1, 10, dtype=F64), 20, far, near)
    assert torch.allclose(t, sample_uniform(near, far, 20), atol=1e-12)


def test_resample_multinomial(rng):
    n = 10**5
    edges = np.sort(rng.uniform(0, 1, 7))
    edges[0], edges[-1] = 0.0, 1.0
    w = rng.uniform(0.05, 1, 6)
    d = torch.tensor(edges[:-1])[None]
    t = resample_from_weights(d, torch.tensor(w)[None], n, 1.0, stratified=True, generator=torch.Generator().manual_seed(1))
    counts = np.histogram(t.numpy(), bins=edges)[0]
    p = w / w.sum()
    sd = np.sqrt(n * p * (1 - p))
    assert (np.abs(counts - n * p) < 4 * sd).all()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 5), min_size=3, max_size=12), st.integers(2, 40))
def test_resample_sorted_in_range(ws, n):
    k = len(ws)
    d = torch.linspace(1, 3, k, dtype=F64)[None]
    t = resample_from_weights(d, torch.tensor(ws, dtype=F64)[None], n, 4.0, near=1.0, padding=0.01)
    assert t.shape == (1, n)
    assert bool((torch.diff(t) >= 0).all()) and float(t.min()) >= 1.0 and float(t.max()) <= 4.0


# ----------------------------------------------------------------- routing


def test_assign_examples(rng):
    c = torch.tensor(rng.normal(size=(7, 3)))
    assert int(assign_subfield(c[:1], torch.tensor([5.0, 5, 5], dtype=F64))) == 0
    for j in range(7):
        assert int(assign_subfield(c, c[j])) == j
    x = rng.normal(size=(100, 3))
    brute = [int(np.argmin([np.sum((xi - cj) ** 2) for cj in c.numpy()])) for xi in x]
    assert assign_subfield(c, torch.tensor(x)).tolist() == brute


# ----------------------------------------------------------------- compositing


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_conservation(n, seed):
    g = torch.Generator().manual_seed(seed)
    sigma = torch.rand(8, n, generator=g, dtype=F64) * 10
    deltas = torch.rand(8, n, generator=g, dtype=F64)
    alpha, trans, w = composite_weights(sigma, deltas)
    assert torch.allclose(w.sum(-1) + torch.prod(1 - alpha, -1), torch.ones(8, dtype=F64), atol=1e-12)
    assert bool((trans[:, 0] == 1).all())


def test_constant_density_closed_form():
    L = 3.7
    d = torch.linspace(0, L, 41, dtype=F64)[:-1]
    _, _, w = composite_weights(torch.ones(40, dtype=F64), intervals(d, torch.tensor(L, dtype=F64)))
    assert abs(float(w.sum()) - (1 - math.exp(-L))) < 1e-12


def test_empty_space_is_sky():
    t = tiny_tile()
    with torch.no_grad():
        for sf in t.subfields:
            sf.trunk.layers[-1].weight.zero_()
            sf.trunk.layers[-1].bias.fill_(-1e4)  # softplus -> 0
    r = bundle([[0, 0, -2.0]], [[0.1, 0.0, 1.0]], 0.1, 5.0)
    out = composite(t, r, torch.linspace(0.5, 3, 8, dtype=F64))
    assert float(out.opacity[0].detach()) == 0.0
    assert torch.equal(out.rgb, out.sky_rgb) and torch.equal(out.features, out.sky_feature)


def test_opaque_first_sample():
    t = tiny_tile()
    with torch.no_grad():
        for sf in t.subfields:
            sf.trunk.layers[-1].bias.fill_(1e6)
    r = bundle([[0, 0, -2.0]], [[0.1, 0.0, 1.0]], 0.1, 5.0)
    out = composite(t, r, torch.linspace(1.5, 3, 8, dtype=F64))
    assert float(out.opacity[0].detach()) == 1.0
    assert torch.allclose(out.rgb[0], out.color[0, 0])
    assert torch.allclose(out.features[0], out.feature[0, 0])


def test_unsorted_rejected():
    t = tiny_tile()
    with pytest.raises(ValueError, match="sorted"):
        composite(t, bundle([[0, 0, -2.0]], [[0, 0, 1.0]]), torch.tensor([0.5, 0.3, 0.9], dtype=F64))


def test_single_subfield_bit_identical(rng):
    t = tiny_tile(subfields=1)
    o = rng.uniform(-0.3, 0.3, (32, 3)) + [0, 0, -2]
    d = rng.normal(size=(32, 3)) * 0.2 + [0, 0, 1]
    r = bundle(o, d, 0.1, 5.0)
    r.video_ids = torch.tensor(rng.integers(0, 2, 32))
    depths = sample_uniform(r.near, r.far, 16)
    a = composite(t, r, depths)
    b = composite(t, r, depths, reference=True)
    for name in ("rgb", "features", "opacity", "depth", "weights"):
        assert torch.equal(getattr(a, name), getattr(b, name)), name


def test_subfield_locality(rng):
    t = tiny_tile(subfields=3)
    o = rng.uniform(-0.5, 0.5, (64, 3)) + [0, 0, -2]
    d = rng.normal(size=(64, 3)) * 0.3 + [0, 0, 1]
    r = bundle(o, d, 0.1, 5.0)
    depths = sample_uniform(r.near, r.far, 8)
    with torch.no_grad():
        before = composite(t, r, depths)
        for p in t.subfields[1].parameters():
            p.add_(0.5)
        after = composite(t, r, depths)
    touched = (before.assignment == 1).any(dim=1)
    changed = (before.rgb != after.rgb).any(dim=1)
    assert bool(touched.any()) and bool((~touched).any())
    assert not bool((changed & ~touched).any())


def test_clip_to_box():
    box = torch.tensor([[-1.0, -1, -1], [1, 1, 1]], dtype=F64)
    r = bundle([[0, 0, -3.0], [0, 5, -3.0]], [[0, 0, 1.0], [0, 0, 1.0]], 0.1, 10.0)
    near, far, valid = clip_to_box(r, box)
    assert valid.tolist() == [True, False]
    assert float(near[0]) == pytest.approx(2.0) and float(far[0]) == pytest.approx(4.0)


def test_samples_inside_clipped_range(rng):
    t = tiny_tile()
    o = rng.uniform(-0.3, 0.3, (16, 3)) + [0, 0, -2]
    d = rng.normal(size=(16, 3)) * 0.3 + [0, 0, 1]
    r = bundle(o, d, 0.1, 6.0)
    cfg = ProposalConfig((8, 8), 8)
    final, stages = render_rays(t, r, cfg, True, torch.Generator().manual_seed(0))
    near, far, _ = clip_to_box(r, t.box)
    for depths in [s.depths for s in stages] + [final.depths]:
        assert bool((depths >= near[:, None] - 1e-12).all()) and bool((depths <= far[:, None] + 1e-12).all())


def test_render_ray_deterministic():
    t = tiny_tile()
    ray = Ray(np.array([0.0, 0.0, -2.0]), np.array([0.0, 0.6, 0.8]), 1, (0, 0), 0.1, 6.0)
    cfg = ProposalConfig((4, 4), 4)
    a, sa = render_ray(t, ray, cfg, seed=7)
    b, sb = render_ray(t, ray, cfg, seed=7)
    assert torch.equal(a.rgb, b.rgb) and torch.equal(a.depths, b.depths)
    assert len(sa) == 2 and torch.equal(sa[1].weights, sb[1].weights)


def test_zero_proposal_density_gives_uniform():
    t = tiny_tile()
    with torch.no_grad():
        for p in t.proposals:
            p.mlp.layers[-1].weight.zero_()
            p.mlp.layers[-1].bias.fill_(-1e4)
    r = bundle([[0, 0, -2.0]], [[0, 0, 1.0]], 0.1, 6.0)
    cfg = ProposalConfig((8, 8), 16)
    final, _ = render_rays(t, r, cfg)
    near, far, _ = clip_to_box(r, t.box)
    assert torch.allclose(final.depths, sample_uniform(near, far, 16), atol=1e-12)


def test_schedule_length_checked():
    t = tiny_tile()
    with pytest.raises(ValueError):
        render_rays(t, bundle([[0, 0, -2.0]], [[0, 0, 1.0]]), ProposalConfig((8, 8), 8), schedule=[torch.zeros(1, 8)])


# ----------------------------------------------------------------- analytic plane tile


def _camera_frame(pos, target, size=24, focal=20.0):
    m = look_at(pos, target)
    intr = CameraIntrinsics(focal, focal, (size - 1) / 2, (size - 1) / 2, size, size)
    z = np.zeros((size, size), bool)
    return CameraFrame(0, Pose(m[:3, :3], m[:3, 3]), intr, np.zeros((size, size, 3), np.float32),
                       np.zeros((size, size, 3), np.float32), z, z)


def test_render_image_all_sky():
    t = plane_tile(height=-0.99)
    frame = _camera_frame([0, 0, 2.0], [0, 5, 3.0])  # looking upward
    img = render_image(t, frame, ProposalConfig((16, 16), 16), 0.1, 50.0)
    assert np.abs(img.opacity).max() < 1e-6
    assert np.allclose(img.rgb, 0.5, atol=1e-6)


def test_render_image_plane_depth_map():
    t = plane_tile()
    frame = _camera_frame([0, -3, 2.0], [0, 0, 0.0])
    cfg = ProposalConfig((64, 32), 32)
    img = render_image(t, frame, cfg, 0.1, 50.0)
    rows, cols = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
    from cityprior.dataset import frame_rays

    o, d = frame_rays(frame, rows.ravel(), cols.ravel())
    truth = (-o[:, 2] / d[:, 2]).reshape(24, 24)
    near, far, _ = clip_to_box(bundle(o, d, 0.1, 50.0), t.box)
    spacing = ((far - near) / cfg.final_samples).numpy().reshape(24, 24)
    hit = (o + truth.reshape(-1, 1) * d).reshape(24, 24, 3)
    inside = (np.abs(hit[..., 0]) < 6) & (np.abs(hit[..., 1]) < 6) & (truth > 0)
    assert inside.sum() > 200 and (~inside).sum() > 0
    assert (img.opacity[inside] > 0.99).all() and (img.opacity[~inside] < 1e-6).all()
    assert (np.abs(img.depth - truth)[inside] <= spacing[inside]).all()
    again = render_image(t, frame, cfg, 0.1, 50.0)
    assert np.array_equal(img.depth, again.depth) and np.array_equal(img.rgb, again.rgb)
