import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cityprior.errors import DataError
from cityprior.field import (
    HashGrid,
    HashGridConfig,
    TileField,
    TileFieldConfig,
    accumulate_gradients,
    parameters,
    query_sky,
    query_subfield,
    sh_encode,
)
from cityprior.selfcheck import tiny_config

BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


def grid(levels=3, lo=2, hi=8, f=2, cap=2**12, dtype=torch.float64):
    g = HashGrid(HashGridConfig(levels, lo, hi, f, cap, BOX)).to(dtype)
    with torch.no_grad():
        g.table.normal_()
    return g


def test_config_validation():
    with pytest.raises(ValueError):
        HashGridConfig(table_capacity=1000)
    with pytest.raises(ValueError):
        HashGridConfig(2, 16, 8)
    with pytest.raises(ValueError):
        HashGridConfig(bounding_box=((0, 0, 0), (1, 0, 1)))


def test_resolutions_geometric():
    c = HashGridConfig(10, 16, 2**14, 4, 2**20)
    r = c.resolutions()
    assert r[0] == 16 and r[-1] == 2**14
    b = math.exp((math.log(2**14) - math.log(16)) / 9)
    assert c.growth_factor == pytest.approx(b)


def test_lattice_corner_and_cell_center():
    g = grid()
    res = g.config.resolutions()
    for lv, r in enumerate(res):
        # interior corner in lattice units -> world coordinates
        corner = torch.tensor([1, 0, r - 2])
        x = (corner.double() / r) * 2 - 1
        out = g.reference_forward(x[None])[0]
        F = g.config.features_per_level
        row = g.corner_indices(corner.view(1, 1, 1, 3).expand(1, len(res), 1, 3))[0, lv, 0]
        assert torch.allclose(out[lv * F : (lv + 1) * F], g.table[row], atol=1e-12)
        # cell centre -> mean of the 8 corners
        cx = ((corner.double() + 0.5) / r) * 2 - 1
        corners = corner + torch.tensor([[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)])
        rows = g.corner_indices(corners.view(1, 1, 8, 3).expand(1, len(res), 8, 3))[0, lv]
        mean = g.table[rows].mean(0)
        assert torch.allclose(g.reference_forward(cx[None])[0, lv * F : (lv + 1) * F], mean, atol=1e-12)


def test_dense_level_oracle(rng):
    g = grid(levels=2, lo=3, hi=5, f=3, cap=2**10)
    assert bool(g.dense.all())
    x = rng.uniform(-1, 1, (200, 3))
    out = g.reference_forward(torch.tensor(x))
    for lv, r in enumerate(g.config.resolutions()):
        tab = g.table[g.level_slice(lv)].detach().numpy().reshape(r + 1, r + 1, r + 1, 3, order="F")
        for p, o in zip(x, out):
            u = (p + 1) / 2 * r
            c = np.minimum(np.floor(u).astype(int), r - 1)
            f = u - c
            acc = np.zeros(3)
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = (f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1]) * (f[2] if dz else 1 - f[2])
                        acc += w * tab[c[0] + dx, c[1] + dy, c[2] + dz]
            assert np.allclose(o[lv * 3 : lv * 3 + 3].detach().numpy(), acc, atol=1e-12)


@pytest.mark.parametrize("dtype,atol", [(torch.float64, 1e-12), (torch.float32, 1e-4)])
def test_kernel_matches_reference(rng, dtype, atol):
    # float32 tolerance: position rounding ~ resolution * eps32 * |table|
    g = grid(levels=6, lo=4, hi=200, cap=2**10, dtype=dtype)
    assert not bool(g.dense.all())  # exercise hashed levels
    x = torch.tensor(rng.uniform(-1.2, 1.2, (5000, 3)), dtype=dtype)
    a = g(x)
    b = g.reference_forward(x)
    assert torch.allclose(a, b, atol=atol)
    # table gradients agree too
    w = torch.randn_like(a)
    ga = torch.autograd.grad((g(x) * w).sum(), g.table)[0]
    gb = torch.autograd.grad((g.reference_forward(x) * w).sum(), g.table)[0]
    assert torch.allclose(ga, gb, atol=100 * atol)


def tile(seed=0, subfields=1, vids=(0, 1)):
    return TileField(tiny_config(), [[0.0, 0.0, 0.0], [0.5, 0.0, 0.0]][:subfields], vids, seed=seed).double()


def test_zero_heads():
    t = tile()
    sf = t.subfields[0]
    for head in (sf.color_head, sf.feature_head):
        head.zero_output()
    out = query_subfield(sf, [0.1, 0.2, 0.3], [0.0, 0.0, 1.0], 0, t)
    assert torch.allclose(out.color, torch.full((3,), 0.5, dtype=torch.float64))
    assert torch.equal(out.feature, torch.zeros(4, dtype=torch.float64))


def test_feature_and_density_invariances(rng):
    t = tile()
    with torch.no_grad():
        t.video_embeddings.weight.normal_()
    x = rng.uniform(-1, 1, (16, 3))
    d1 = rng.normal(size=(16, 3))
    d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
    d2 = -d1
    sf = t.subfields[0]
    a = query_subfield(sf, x, d1, 0, t)
    b = query_subfield(sf, x, d2, 0, t)
    c = query_subfield(sf, x, d1, 1, t)
    assert torch.equal(a.feature, b.feature)
    assert torch.equal(a.density, c.density) and torch.equal(a.feature, c.feature)
    assert not torch.equal(a.color, c.color)


def test_unknown_video_id():
    with pytest.raises(DataError, match="unknown video id"):
        query_sky(tile(), [0.0, 0.0, 1.0], 7)


def test_sky_zero_and_pure():
    t = tile()
    d = torch.tensor([0.6, 0.0, 0.8], dtype=torch.float64)
    a, b = query_sky(t, d, 1), query_sky(t, d, 1)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
    t.sky.zero_output()
    rgb, _ = query_sky(t, d, 0)
    assert torch.allclose(rgb, torch.full((3,), 0.5, dtype=torch.float64))


def test_sky_straight_line_oracle(rng):
    t = tile()
    with torch.no_grad():
        t.video_embeddings.weight.normal_()
        for p in t.sky.parameters():
            p.normal_(0, 0.5)
    layers = [(l.weight.detach().numpy(), l.bias.detach().numpy()) for l in t.sky.layers]
    for theta in np.linspace(0.1, 3.0, 5):
        for phi in np.linspace(0, 6, 5):
            d = np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
            for vid in (0, 1):
                h = np.concatenate([sh_encode(torch.tensor(d), 2).numpy(), t.video_embeddings.weight[vid].detach().numpy()])
                for i, (W, b) in enumerate(layers):
                    h = W @ h + b
                    if i < len(layers) - 1:
                        h = np.maximum(h, 0)
                rgb, feat = query_sky(t, d, vid)
                assert np.allclose(rgb.detach().numpy(), 1 / (1 + np.exp(-h[:3])), atol=1e-12)
                assert np.allclose(feat.detach().numpy(), h[3:], atol=1e-12)


def test_sh_examples():
    d = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    assert float(sh_encode(d, 1)[0]) == pytest.approx(1 / (2 * math.sqrt(math.pi)))
    y = sh_encode(d, 2)
    assert y.shape == (4,)
    assert float(y[1]) == 0.0 and float(y[3]) == 0.0
    with pytest.raises(ValueError):
        sh_encode(d, 5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, math.pi), st.floats(0, 2 * math.pi), st.integers(1, 4))
def test_sh_addition_theorem(theta, phi, degree):
    d = torch.tensor([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)], dtype=torch.float64)
    assert float((sh_encode(d, degree) ** 2).sum()) == pytest.approx(degree**2 / (4 * math.pi), abs=1e-9)


def test_gradients_zero_loss_and_separation():
    t = tile()
    x = torch.tensor([[0.1, 0.2, 0.3]], dtype=torch.float64)
    out = query_subfield(t.subfields[0], x, [0.0, 0.0, 1.0], 0, t)
    g = accumulate_gradients(0 * out.feature.sum(), t)
    assert set(g) == set(parameters(t))
    assert all(bool((v == 0).all()) for v in g.values())
    out = query_subfield(t.subfields[0], x, [0.0, 0.0, 1.0], 0, t)
    g = accumulate_gradients(out.feature.sum(), t)
    assert all(bool((v == 0).all()) for k, v in g.items() if ".color_head." in k)


def test_single_parameter_probe():
    t = tile()
    with torch.no_grad():
        for p in t.parameters():
            p.add_(0.3 * torch.randn_like(p))
    x = torch.tensor([[0.1, -0.2, 0.3], [0.4, 0.5, -0.6]], dtype=torch.float64)

    def f():
        out = query_subfield(t.subfields[0], x, [0.0, 0.6, 0.8], 1, t)
        return (out.color.sum() + out.feature.pow(2).sum() + out.density.sum())

    g = accumulate_gradients(f(), t)
    p = t.subfields[0].trunk.layers[0].weight
    h = 1e-4
    with torch.no_grad():
        old = float(p[3, 1])
        p[3, 1] = old + h
        up = float(f())
        p[3, 1] = old - h
        down = float(f())
        p[3, 1] = old
    num = (up - down) / (2 * h)
    ana = float(g["subfields.0.trunk.layers.0.weight"][3, 1])
    assert abs(num - ana) / max(abs(num), abs(ana), 1e-12) < 1e-3


def test_tile_seed_determinism():
    a, b = tile(seed=5), tile(seed=5)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    c = tile(seed=6)
    assert not torch.equal(a.subfields[0].hash_grid.table, c.subfields[0].hash_grid.table)


def test_config_dict_roundtrip():
    c = TileFieldConfig(feature_dim=8).with_box(((-2, -2, -2), (2, 3, 4)))
    assert TileFieldConfig.from_dict(c.to_dict()) == c
