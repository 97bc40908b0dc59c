import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from advaug.warp import (affine_to_flow, identity_flow, residual_to_flow,
                         spatial_gradient, warp, warp_labels)

from oracles import bilinear_sample, identity_flow_list, spatial_gradient_loops


def test_identity_flow_2x2_endpoints():
    f = identity_flow(2, 2)
    assert f.tolist() == [[[-1.0, -1.0], [1.0, -1.0]], [[-1.0, 1.0], [1.0, 1.0]]]


def test_identity_flow_single_pixel_center():
    assert identity_flow(1, 1).tolist() == [[[0.0, 0.0]]]


def test_identity_flow_3x3_center_zero():
    f = identity_flow(3, 3)
    assert f[1, 1].tolist() == [0.0, 0.0]


def test_identity_flow_matches_loop_oracle():
    f = identity_flow(5, 7, dtype=torch.float64)
    oracle = identity_flow_list(5, 7)
    for i in range(5):
        for j in range(7):
            assert f[i, j, 0].item() == pytest.approx(oracle[i][j][0], abs=1e-15)
            assert f[i, j, 1].item() == pytest.approx(oracle[i][j][1], abs=1e-15)


def test_identity_flow_rejects_bad_dims():
    with pytest.raises(ValueError):
        identity_flow(0, 4)
    with pytest.raises(ValueError):
        identity_flow(4, -1)


def test_affine_identity_is_identity_flow_bitwise():
    ident = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    for h, w in [(2, 2), (3, 5), (8, 8), (1, 1)]:
        assert torch.equal(affine_to_flow(ident, h, w), identity_flow(h, w))


def test_affine_halving_scales_coordinates():
    half = torch.tensor([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0]])
    assert torch.equal(affine_to_flow(half, 2, 2), 0.5 * identity_flow(2, 2))


def test_affine_translation_adds_offset():
    shift = torch.tensor([[1.0, 0.0, 0.1], [0.0, 1.0, 0.0]])
    f = affine_to_flow(shift, 2, 2)
    base = identity_flow(2, 2)
    assert torch.allclose(f[..., 0], base[..., 0] + 0.1)
    assert torch.equal(f[..., 1], base[..., 1])


@settings(max_examples=50)
@given(st.floats(0.0, 1.0))
def test_affine_to_flow_linearity(alpha):
    g = torch.Generator().manual_seed(7)
    a1 = torch.randn(2, 3, generator=g, dtype=torch.float64)
    a2 = torch.randn(2, 3, generator=g, dtype=torch.float64)
    mixed = affine_to_flow(alpha * a1 + (1 - alpha) * a2, 5, 4)
    parts = alpha * affine_to_flow(a1, 5, 4) + (1 - alpha) * affine_to_flow(a2, 5, 4)
    assert torch.allclose(mixed, parts, atol=1e-12, rtol=0)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 1000))
@settings(max_examples=40)
def test_warp_identity_bit_exact(h, w, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(2, 3, h, w, generator=g)
    assert torch.equal(warp(x, identity_flow(h, w)), x)


def test_warp_constant_center_flow_averages_four_pixels():
    x = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
    flow = torch.zeros(2, 2, 2)
    out = warp(x, flow)
    assert torch.allclose(out, torch.full((1, 2, 2), 1.5))
    # independent scalar oracle
    assert bilinear_sample([[0.0, 1.0], [2.0, 3.0]], 0.0, 0.0, 2, 2) == 1.5


def test_warp_fully_out_of_range_is_zero():
    x = torch.randn(1, 2, 4, 4)
    flow = torch.full((4, 4, 2), -5.0)
    assert torch.equal(warp(x, flow), torch.zeros_like(x))


def test_warp_matches_scalar_oracle_random_flows():
    g = torch.Generator().manual_seed(11)
    for padding in ("zeros", "border"):
        img = torch.randn(3, 5, generator=g, dtype=torch.float64)
        flow = identity_flow(3, 5, dtype=torch.float64) + \
            0.8 * torch.rand(3, 5, 2, generator=g, dtype=torch.float64) - 0.4
        out = warp(img.unsqueeze(0), flow, padding=padding)[0]
        rows = img.tolist()
        for i in range(3):
            for j in range(5):
                want = bilinear_sample(rows, flow[i, j, 0].item(), flow[i, j, 1].item(),
                                       3, 5, padding=padding)
                assert out[i, j].item() == pytest.approx(want, abs=1e-12)


def test_warp_agrees_with_grid_sample():
    g = torch.Generator().manual_seed(5)
    x = torch.randn(2, 3, 8, 8, generator=g, dtype=torch.float64)
    flow = identity_flow(8, 8, dtype=torch.float64) + \
        0.5 * torch.rand(2, 8, 8, 2, generator=g, dtype=torch.float64) - 0.25
    for padding in ("zeros", "border"):
        mine = warp(x, flow, padding=padding)
        ref = F.grid_sample(x, flow, mode="bilinear", padding_mode=padding, align_corners=True)
        assert torch.allclose(mine, ref, atol=1e-12)


def test_warp_composition_matches_analytic_affine():
    # warping a coordinate-indicator image by A equals applying A analytically
    h = w = 9
    base = identity_flow(h, w, dtype=torch.float64)
    indicator = torch.stack([base[..., 0], base[..., 1]])  # 2 channels: x and y coords
    mat = torch.tensor([[0.8, 0.1, 0.05], [-0.1, 0.9, -0.02]], dtype=torch.float64)
    flow = affine_to_flow(mat, h, w)
    warped = warp(indicator, flow, padding="border")
    inside = (flow.abs().amax(dim=-1) <= 1.0)
    for c in range(2):
        diff = (warped[c] - flow[..., c]).abs()
        assert diff[inside].max().item() < 1e-6


def test_warp_rejects_shape_mismatch_and_nan():
    x = torch.randn(1, 1, 4, 4)
    with pytest.raises(ValueError):
        warp(x, identity_flow(5, 4))
    bad = identity_flow(4, 4)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        warp(x, bad)
    with pytest.raises(ValueError):
        warp(x, identity_flow(4, 4), mode="cubic")


def test_warp_nearest_snaps_to_closest_pixel():
    x = torch.arange(4.0).reshape(1, 1, 2, 2)
    flow = identity_flow(2, 2) + 0.2  # closer to the original pixel than its neighbor
    out = warp(x, flow, mode="nearest", padding="border")
    assert torch.equal(out, x)


def test_warp_labels_nearest_and_border():
    labels = torch.tensor([[0, 1], [2, 3]])
    assert torch.equal(warp_labels(labels, identity_flow(2, 2)), labels)
    shifted = warp_labels(labels, torch.full((2, 2, 2), -3.0))
    assert torch.equal(shifted, torch.zeros_like(labels))  # border clamps to corner 0
    assert shifted.dtype == labels.dtype


def test_warp_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    flow = (identity_flow(8, 8, dtype=torch.float64)
            + 0.4 * torch.rand(8, 8, 2, generator=g, dtype=torch.float64) - 0.2)
    flow.requires_grad_(True)
    weights = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
    (warp(x, flow) * weights).sum().backward()
    h = 1e-5
    # image gradient: output is globally linear in the image
    for c in [0, 9, 37, 63]:
        xp = x.detach().clone().reshape(-1)
        xm = xp.clone()
        xp[c] += h
        xm[c] -= h
        fd = ((warp(xp.reshape(x.shape), flow.detach()) * weights).sum()
              - (warp(xm.reshape(x.shape), flow.detach()) * weights).sum()) / (2 * h)
        assert x.grad.reshape(-1)[c].item() == pytest.approx(fd.item(), rel=1e-4, abs=1e-8)
    # flow gradient: skip coordinates on bilinear kinks
    px = (flow.detach()[..., 0] + 1) * 3.5
    py = (flow.detach()[..., 1] + 1) * 3.5
    smooth = ((px - px.round()).abs() > 1e-3) & ((py - py.round()).abs() > 1e-3)
    flat_ok = smooth.unsqueeze(-1).expand(8, 8, 2).reshape(-1)
    checked = 0
    for c in range(0, 128, 7):
        if not flat_ok[c]:
            continue
        fp = flow.detach().clone().reshape(-1)
        fm = fp.clone()
        fp[c] += h
        fm[c] -= h
        fd = ((warp(x.detach(), fp.reshape(flow.shape)) * weights).sum()
              - (warp(x.detach(), fm.reshape(flow.shape)) * weights).sum()) / (2 * h)
        assert flow.grad.reshape(-1)[c].item() == pytest.approx(fd.item(), rel=1e-4, abs=1e-8)
        checked += 1
    assert checked > 5


def test_spatial_gradient_constant_field_is_zero():
    f = torch.full((4, 6, 2), 0.37)
    assert torch.equal(spatial_gradient(f), torch.zeros(4, 6, 2, 2))


def test_spatial_gradient_linear_ramp():
    h, w, c = 5, 6, 2.0
    f = torch.zeros(h, w, 2, dtype=torch.float64)
    f[..., 0] = c * identity_flow(h, w, dtype=torch.float64)[..., 0]
    g = spatial_gradient(f)
    expected = 2 * c / (w - 1)
    assert torch.allclose(g[:, :-1, 0, 0], torch.full((h, w - 1), expected, dtype=torch.float64))
    assert torch.equal(g[:, -1, 0, 0], torch.zeros(h, dtype=torch.float64))
    assert torch.equal(g[..., 0, 1], torch.zeros(h, w, dtype=torch.float64))  # no y variation


def test_spatial_gradient_random_matches_loop_oracle():
    g = torch.Generator().manual_seed(2)
    f = torch.randn(4, 4, 2, generator=g, dtype=torch.float64)
    got = spatial_gradient(f)
    want = spatial_gradient_loops(f.tolist())
    for i in range(4):
        for j in range(4):
            for c in range(2):
                for a in range(2):
                    assert got[i, j, c, a].item() == pytest.approx(want[i][j][c][a], abs=1e-12)


def test_spatial_gradient_of_identity_flow():
    h, w = 6, 9
    g = spatial_gradient(identity_flow(h, w, dtype=torch.float64))
    assert torch.allclose(g[:, :-1, 0, 0], torch.full((h, w - 1), 2 / (w - 1), dtype=torch.float64))
    assert torch.allclose(g[:-1, :, 1, 1], torch.full((h - 1, w), 2 / (h - 1), dtype=torch.float64))
    assert torch.equal(g[..., 0, 1], torch.zeros(h, w, dtype=torch.float64))
    assert torch.equal(g[..., 1, 0], torch.zeros(h, w, dtype=torch.float64))


def test_spatial_gradient_rejects_small_fields():
    with pytest.raises(ValueError):
        spatial_gradient(torch.zeros(1, 5, 2))
    with pytest.raises(ValueError):
        spatial_gradient(torch.zeros(5, 1, 2))


def test_residual_to_flow_adds_identity():
    r = 0.05 * torch.ones(3, 3, 2)
    assert torch.allclose(residual_to_flow(r), identity_flow(3, 3) + 0.05)
