import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rtsgg.damp import (
    DampExtractor,
    DetectionBatch,
    GatherVariant,
    gather_count,
    gather_gaussian,
    gaussian_window,
    pyramid_tensors,
    roi_align_baseline,
    roi_align_level,
)
from rtsgg.pyramid import LEVELS, FeaturePyramid, simulate_detections
from rtsgg.scene_synth import SynthConfig, generate_scene, render_pyramid

CHANNELS = (3, 4, 5)


def random_pyramid(seed=0, size=64, channels=CHANNELS):
    rng = np.random.default_rng(seed)
    levels = {lv: rng.standard_normal((-(-size // s), -(-size // s), c))
              for (lv, s), c in zip((("P3", 8), ("P4", 16), ("P5", 32)), channels)}
    return FeaturePyramid(levels, (size, size))


def scene_batch(seed=1, n=4, size=64, channels=CHANNELS, pyr=None):
    cfg = SynthConfig(objects_per_scene=(n, n), image_size=(size, size), channels=channels)
    scene = generate_scene(seed, cfg)
    pyr = pyr or random_pyramid(seed, size, channels)
    dets = simulate_detections(scene, pyr, 0.0, 0.0, seed)
    return pyr, dets


def test_radius_zero_returns_cell():
    grid = torch.randn(5, 6, 3, dtype=torch.float64)
    out = gather_gaussian(grid, torch.tensor([[2, 4]]), radius=0)
    torch.testing.assert_close(out[0], grid[2, 4], rtol=0, atol=0)


def test_constant_map_is_fixed_point():
    grid = torch.full((6, 6, 4), 2.5, dtype=torch.float64)
    out = gather_gaussian(grid, torch.tensor([[3, 3], [0, 0]]), radius=1)
    torch.testing.assert_close(out, torch.full((2, 4), 2.5, dtype=torch.float64))


def test_center_weight_against_direct_sum():
    z = sum(math.exp(-(dr * dr + dc * dc)) for dr in (-1, 0, 1) for dc in (-1, 0, 1))
    offsets, weights = gaussian_window(1)
    center = weights[(offsets == 0).all(1)].item()
    assert center == pytest.approx(1 / z, abs=1e-15)
    assert center == pytest.approx(0.33192, abs=1e-5)


@given(st.integers(0, 5))
def test_window_weights_normalised(radius):
    offsets, w = gaussian_window(radius)
    assert abs(w.sum().item() - 1) < 1e-12
    assert (w > 0).all()
    assert w[(offsets == 0).all(1)].item() == w.max().item()


@settings(max_examples=40)
@given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 3))
def test_boundary_clamping_keeps_convexity(r, c, radius):
    grid = torch.ones(5, 5, 2, dtype=torch.float64)
    out = gather_gaussian(grid, torch.tensor([[r, c]]), radius)
    torch.testing.assert_close(out, torch.ones(1, 2, dtype=torch.float64))


def test_out_of_bounds_anchor_rejected():
    with pytest.raises(ValueError):
        gather_gaussian(torch.zeros(3, 3, 1), torch.tensor([[3, 0]]))


def _identity_extractor(variant, c):
    ext = DampExtractor(variant, (c, c, c), c).double()
    with torch.no_grad():
        for lv in LEVELS:
            ext.proj[lv].weight.copy_(torch.eye(c))
            ext.proj[lv].bias.zero_()
    return ext


def test_da_one_hot_returns_anchor_vector():
    c = 4
    pyr, dets = scene_batch(2, 3, channels=(c, c, c))
    det = dets[0]
    levels = {lv: np.zeros_like(g) for lv, g in pyr.levels.items()}
    r, cc = det.grid_index
    levels[det.source_level][r, cc, 1] = 1.0
    pyr = FeaturePyramid(levels, pyr.image_size)
    ext = _identity_extractor("da", c)
    out = ext(pyramid_tensors(pyr, torch.float64), DetectionBatch([det], pyr))
    torch.testing.assert_close(out[0], torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64))


def test_damp_equals_dam_on_constant_levels():
    pyr, dets = scene_batch(3, 5)
    const = FeaturePyramid({lv: np.full_like(g, 0.7) for lv, g in pyr.levels.items()}, pyr.image_size)
    torch.manual_seed(0)
    damp = DampExtractor("damp", CHANNELS, 8).double()
    dam = DampExtractor("dam", CHANNELS, 8).double()
    dam.load_state_dict(damp.state_dict())
    grids = pyramid_tensors(const, torch.float64)
    batch = DetectionBatch(dets, const)
    assert torch.allclose(damp(grids, batch), dam(grids, batch), atol=1e-10, rtol=0)


def reference_damp(levels, dets, ext, image_size):
    """Loop-level evaluation of the three-level Gaussian gather and fusion."""
    w_img, h_img = image_size
    outs = []
    for d in dets:
        cx, cy = (d.box[0] + d.box[2]) / 2, (d.box[1] + d.box[3]) / 2
        parts = []
        for lv in LEVELS:
            grid = levels[lv]
            h, w, _ = grid.shape
            r = min(max(math.floor(cy * h), 0), h - 1)
            c = min(max(math.floor(cx * w), 0), w - 1)
            acc, z = 0.0, 0.0
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    wt = math.exp(-(dr * dr + dc * dc))
                    acc = acc + wt * grid[min(max(r + dr, 0), h - 1), min(max(c + dc, 0), w - 1)]
                    z += wt
            g = acc / z
            W = ext.proj[lv].weight.detach().numpy()
            b = ext.proj[lv].bias.detach().numpy()
            parts.append(W @ g + b)
        cat = np.concatenate(parts)
        ln = (cat - cat.mean()) / np.sqrt(cat.var() + ext.norm.eps)
        ln = ln * ext.norm.weight.detach().numpy() + ext.norm.bias.detach().numpy()
        outs.append(ext.fuse.weight.detach().numpy() @ ln + ext.fuse.bias.detach().numpy())
    return np.stack(outs)


def test_damp_matches_reference_script():
    pyr, dets = scene_batch(4, 5)
    torch.manual_seed(1)
    ext = DampExtractor("damp", CHANNELS, 8).double()
    with torch.no_grad():
        ext.norm.weight.normal_()
        ext.norm.bias.normal_()
    got = ext(pyramid_tensors(pyr, torch.float64), DetectionBatch(dets, pyr)).detach().numpy()
    np.testing.assert_allclose(got, reference_damp(pyr.levels, dets, ext, pyr.image_size), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("variant", list(GatherVariant))
def test_permutation_equivariance(variant):
    pyr, dets = scene_batch(5, 5)
    torch.manual_seed(2)
    ext = DampExtractor(variant, CHANNELS, 6).double()
    grids = pyramid_tensors(pyr, torch.float64)
    perm = [3, 0, 4, 2, 1]
    a = ext(grids, DetectionBatch(dets, pyr))
    b = ext(grids, DetectionBatch([dets[i] for i in perm], pyr))
    torch.testing.assert_close(a[perm], b, rtol=1e-12, atol=1e-12)


def test_channel_mismatch_is_config_error():
    pyr, dets = scene_batch(1, 2)
    ext = DampExtractor("damp", (3, 4, 6), 8).double()
    with pytest.raises(ValueError):
        ext(pyramid_tensors(pyr, torch.float64), DetectionBatch(dets, pyr))


def test_roi_one_cell_constant():
    grid = torch.full((4, 4, 2), 3.0, dtype=torch.float64)
    out = roi_align_level(grid, torch.tensor([[0.25, 0.25, 0.5, 0.5]], dtype=torch.float64))
    torch.testing.assert_close(out, torch.full((1, 2), 3.0, dtype=torch.float64))


def test_roi_sample_on_grid_node():
    grid = torch.randn(4, 4, 3, dtype=torch.float64)
    # single sample at x = 0.375*4 - 0.5 = 1, y = 0.625*4 - 0.5 = 2
    out = roi_align_level(grid, torch.tensor([[0.3, 0.55, 0.45, 0.7]], dtype=torch.float64), samples=1)
    torch.testing.assert_close(out[0], grid[2, 1], rtol=1e-12, atol=1e-12)


def test_roi_bilinear_hand_weights():
    r, c = torch.meshgrid(torch.arange(4.0), torch.arange(4.0), indexing="ij")
    grid = (r * c).double()[..., None]
    # sample at (y, x) = (1.1, 1.1): corners 1, 2, 2, 4 with weights .81, .09, .09, .01
    out = roi_align_level(grid, torch.tensor([[0.3, 0.3, 0.5, 0.5]], dtype=torch.float64), samples=1)
    expected = 0.81 * 1 + 0.09 * 2 + 0.09 * 2 + 0.01 * 4
    assert out.item() == pytest.approx(expected, abs=1e-12)


def test_roi_ramp_average():
    r, c = torch.meshgrid(torch.arange(4.0), torch.arange(4.0), indexing="ij")
    grid = (4 * r + c).double()[..., None]
    box = (0.2, 0.3, 0.7, 0.6)
    out = roi_align_level(grid, torch.tensor([box], dtype=torch.float64))
    # a linear map is reproduced by bilinear sampling; the mean sample sits at the box centre
    cx, cy = (box[0] + box[2]) / 2 * 4 - 0.5, (box[1] + box[3]) / 2 * 4 - 0.5
    assert out.item() == pytest.approx(4 * cy + cx, abs=1e-12)


def test_roi_baseline_concatenates_levels():
    pyr, dets = scene_batch(1, 3)
    grids = pyramid_tensors(pyr, torch.float64)
    boxes = torch.tensor([d.box for d in dets], dtype=torch.float64)
    assert roi_align_baseline(grids, boxes).shape == (3, sum(CHANNELS))
    with pytest.raises(ValueError):
        roi_align_baseline(grids, torch.tensor([[0.5, 0.5, 0.5, 0.6]], dtype=torch.float64))


def test_gather_counts():
    assert gather_count("damp", 10) == 270
    assert gather_count(GatherVariant.RoiAlign, 10) == 1470
    assert gather_count("da", 1) == 1
    assert gather_count("dap", 2) == 18 and gather_count("dam", 2) == 6
    assert all(gather_count(v, 0) == 0 for v in GatherVariant)
    assert round(147 / 27, 2) == 5.44


@given(st.integers(1, 10**6))
def test_gather_ratio_exact(n):
    assert Fraction(gather_count("roialign", n), gather_count("damp", n)) == Fraction(49, 9)


def test_extractor_on_rendered_pyramid():
    cfg = SynthConfig()
    scene = generate_scene(0, cfg)
    pyr = render_pyramid(scene, cfg, 0)
    dets = simulate_detections(scene, pyr)
    ext = DampExtractor("damp", cfg.channels, 16)
    out = ext(pyramid_tensors(pyr), DetectionBatch(dets, pyr))
    assert out.shape == (len(dets), 16) and torch.isfinite(out).all()
    assert ext.gathers(len(dets)) == 27 * len(dets)
