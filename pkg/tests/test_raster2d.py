import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridgs.gradcheck import check_raster2d, random_layer
from hybridgs.raster2d import WEIGHT_FLOOR, rasterize2d_backward, rasterize2d_forward
from hybridgs.raster3d import BackwardCacheError
from hybridgs.scene import Gaussian2DLayer, logit

from .oracles import render2d_naive


def single(center, opacity, color, scales=(1.5, 1.5), angle=0.0):
    return Gaussian2DLayer(0, [center], [np.log(scales)], [angle], [color], [logit(opacity)])


def shuffled(layer, perm):
    return Gaussian2DLayer(layer.image_index, *(getattr(layer, n)[perm] for n in Gaussian2DLayer.PARAM_NAMES))


def test_empty_layer_is_zero():
    out = rasterize2d_forward(Gaussian2DLayer.empty(), 9, 7)
    assert out.color.shape == (7, 9, 3) and out.mask.shape == (7, 9)
    assert not out.color.any() and not out.mask.any()


def test_single_gaussian_at_pixel_center():
    out = rasterize2d_forward(single([2.5, 4.5], 0.5, [0, 1, 0]), 8, 8)
    assert np.allclose(out.raw_color[4, 2], [0, 0.5, 0], atol=1e-15)
    assert np.isclose(out.raw_mask[4, 2], 0.5, atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_forward_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 20, 16)
    out = rasterize2d_forward(layer, 16, 16)
    color, mask = render2d_naive(layer, 16, 16)
    assert np.max(np.abs(out.raw_color - color)) <= 1e-6
    assert np.max(np.abs(out.raw_mask - mask)) <= 1e-6
    assert np.max(np.abs(out.mask - np.clip(mask, 0, 1))) <= 1e-6


def test_unfloored_render_matches_oracle_tightly():
    rng = np.random.default_rng(50)
    layer = random_layer(rng, 12, 10)
    out = rasterize2d_forward(layer, 10, 10, weight_floor=0.0)
    color, mask = render2d_naive(layer, 10, 10)
    assert np.allclose(out.raw_color, color, atol=1e-13, rtol=0)
    assert np.allclose(out.raw_mask, mask, atol=1e-13, rtol=0)


def test_clamped_views():
    layer = single([4.0, 4.0], 0.9, [1.0, 1.0, 1.0], scales=(3, 3))
    layer = shuffled(layer, [0, 0, 0])  # three coincident copies push the sums past 1
    out = rasterize2d_forward(layer, 8, 8)
    assert out.raw_mask.max() > 1
    assert out.mask.max() == 1.0 and out.color.max() == 1.0
    assert np.all(out.mask >= 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_permutation_invariance_is_exact(seed):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 25, 16)
    perm = rng.permutation(len(layer))
    a = rasterize2d_forward(layer, 16, 16)
    b = rasterize2d_forward(shuffled(layer, perm), 16, 16)
    assert np.array_equal(a.raw_color, b.raw_color) and np.array_equal(a.raw_mask, b.raw_mask)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 3.0))
def test_mask_monotone_in_opacity(seed, bump):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, 10, 12)
    k = int(rng.integers(len(layer)))
    up = layer.copy()
    up.opacity_logits[k] += bump
    a = rasterize2d_forward(layer, 12, 12, weight_floor=0.0).raw_mask
    b = rasterize2d_forward(up, 12, 12, weight_floor=0.0).raw_mask
    assert np.all(b >= a)


def test_rotation_half_turn_and_quarter_turn_with_swapped_scales():
    rng = np.random.default_rng(3)
    layer = random_layer(rng, 8, 16)
    base = rasterize2d_forward(layer, 16, 16, weight_floor=0.0)
    half = layer.copy()
    half.rotation_angles += np.pi
    quarter = layer.copy()
    quarter.rotation_angles += np.pi / 2
    quarter.log_scales = quarter.log_scales[:, ::-1].copy()
    for other in (half, quarter):
        out = rasterize2d_forward(other, 16, 16, weight_floor=0.0)
        assert np.max(np.abs(out.raw_color - base.raw_color)) <= 1e-6
        assert np.max(np.abs(out.raw_mask - base.raw_mask)) <= 1e-6


def test_rotation_full_turn():
    rng = np.random.default_rng(4)
    layer = random_layer(rng, 8, 16)
    turned = layer.copy()
    turned.rotation_angles += 2 * np.pi
    a = rasterize2d_forward(layer, 16, 16, weight_floor=0.0)
    b = rasterize2d_forward(turned, 16, 16, weight_floor=0.0)
    # cos/sin of theta + 2 pi differ from those of theta in the last ulp
    assert np.max(np.abs(a.raw_color - b.raw_color)) <= 1e-12


def test_culling_floor_is_negligible():
    rng = np.random.default_rng(5)
    layer = random_layer(rng, 40, 16)
    a = rasterize2d_forward(layer, 16, 16)
    b = rasterize2d_forward(layer, 16, 16, weight_floor=0.0)
    assert a.weight_floor == WEIGHT_FLOOR
    assert np.max(np.abs(a.raw_mask - b.raw_mask)) <= 40 * WEIGHT_FLOOR


def test_zero_upstream_gives_zero_gradients():
    layer = random_layer(np.random.default_rng(6), 6, 8)
    grads = rasterize2d_backward(rasterize2d_forward(layer, 8, 8), np.zeros((8, 8, 3)), np.zeros((8, 8)))
    assert all(not np.any(v) for v in grads.values())


def test_backward_without_cache_raises():
    out = rasterize2d_forward(random_layer(np.random.default_rng(7), 3, 8), 8, 8, cache=False)
    with pytest.raises(BackwardCacheError):
        rasterize2d_backward(out, np.ones((8, 8, 3)))


def test_saturated_pixels_pass_no_gradient():
    layer = shuffled(single([4.0, 4.0], 0.9, [1.0, 0.5, 0.2], scales=(2, 2)), [0, 0])
    out = rasterize2d_forward(layer, 8, 8)
    sat = out.raw_mask > 1
    assert sat.any()
    only_sat = np.where(sat, 1.0, 0.0)
    grads = rasterize2d_backward(out, None, only_sat)
    assert all(not np.any(v) for v in grads.values())


def _fd(layer, loss, h=1e-4):
    out = {}
    for name in Gaussian2DLayer.PARAM_NAMES:
        arr = getattr(layer, name)
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            lp = loss()
            arr[i] = old - h
            lm = loss()
            arr[i] = old
            g[i] = (lp - lm) / (2 * h)
        out[name] = g
    return out


def test_single_gaussian_mask_sum_gradient():
    layer = single([3.7, 4.2], 0.4, [0.3, 0.6, 0.9], scales=(1.3, 2.1), angle=0.7)

    def loss():
        return float(rasterize2d_forward(layer, 8, 8, cache=False, weight_floor=0.0).mask.sum())

    grads = rasterize2d_backward(rasterize2d_forward(layer, 8, 8, weight_floor=0.0), None, np.ones((8, 8)))
    fd = _fd(layer, loss)
    for name in Gaussian2DLayer.PARAM_NAMES:
        err = np.max(np.abs(grads[name] - fd[name])) / max(np.max(np.abs(fd[name])), 1e-8)
        assert err < 1e-4, name


@pytest.mark.parametrize("seed", range(3))
def test_random_layer_gradients_per_group(seed):
    errors = check_raster2d(np.random.default_rng(seed))
    assert max(errors.values()) < 1e-4, errors
