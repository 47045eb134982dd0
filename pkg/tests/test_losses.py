import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridgs.gradcheck import check_compose
from hybridgs.losses import (
    compose, compose_backward, gaussian_window, masked_loss_3d, photometric_loss, ssim, ssim_map_backward,
)

from .oracles import ssim_loop

unit = st.floats(0, 1, allow_nan=False)


def img(shape=(12, 12, 3)):
    return arrays(np.float64, shape, elements=unit)


# composition


@settings(max_examples=40)
@given(img((5, 6, 3)), img((5, 6, 3)))
def test_compose_endpoints_are_bit_exact(i_s, i_t):
    assert np.array_equal(compose(i_s, i_t, np.zeros((5, 6))), i_s)
    assert np.array_equal(compose(i_s, i_t, np.ones((5, 6))), i_t)


@settings(max_examples=40)
@given(img((4, 4, 3)), img((4, 4, 3)))
def test_compose_midpoint(i_s, i_t):
    assert np.allclose(compose(i_s, i_t, np.full((4, 4), 0.5)), (i_s + i_t) / 2, atol=1e-15)


@settings(max_examples=40)
@given(img((4, 5, 3)), img((4, 5, 3)), img((4, 5)))
def test_compose_is_convex(i_s, i_t, m):
    out = compose(i_s, i_t, m)
    lo, hi = np.minimum(i_s, i_t), np.maximum(i_s, i_t)
    assert np.all(out >= lo - 1e-15) and np.all(out <= hi + 1e-15)


def test_compose_shape_mismatch():
    with pytest.raises(ValueError):
        compose(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        compose(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 5)))


def test_compose_backward_matches_fd():
    rng = np.random.default_rng(0)
    i_s, i_t, m = rng.uniform(size=(3, 4, 3)), rng.uniform(size=(3, 4, 3)), rng.uniform(size=(3, 4))
    up = rng.normal(size=(3, 4, 3))
    d_s, d_t, d_m = compose_backward(up, i_s, i_t, m)
    h = 1e-6
    for arr, g in ((i_s, d_s), (i_t, d_t), (m, d_m)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = np.sum(up * compose(i_s, i_t, m))
            arr[idx] = old - h
            fm = np.sum(up * compose(i_s, i_t, m))
            arr[idx] = old
            assert abs((fp - fm) / (2 * h) - g[idx]) < 1e-7


# SSIM


def test_window_is_normalized_gaussian():
    w = gaussian_window()
    assert w.shape == (11,) and np.isclose(w.sum(), 1.0)
    assert np.allclose(w / w[5], np.exp(-(np.arange(11) - 5) ** 2 / (2 * 1.5 ** 2)))


@pytest.mark.parametrize("shape", [(11, 11, 3), (16, 13, 3), (20, 20, 3)])
def test_ssim_map_matches_loop_oracle(shape):
    rng = np.random.default_rng(shape[1])
    a, b = rng.uniform(size=shape), rng.uniform(size=shape)
    val, smap = ssim(a, b)
    ref = ssim_loop(a, b)
    assert np.allclose(smap, ref, atol=1e-12)
    assert np.isclose(val, ref.mean())


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    assert ssim(a, a)[0] == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b)[0] == pytest.approx(ssim(b, a)[0], abs=1e-15)


def test_ssim_constant_images_closed_form():
    # constant images: variances vanish, so SSIM = (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1)
    a, b = np.full((11, 11, 3), 0.5), np.full((11, 11, 3), 0.25)
    c1 = 1e-4
    expected = (2 * 0.5 * 0.25 + c1) / (0.25 + 0.0625 + c1)
    assert ssim(a, b)[0] == pytest.approx(expected, rel=1e-12)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError, match="11x11"):
        ssim(np.zeros((10, 12, 3)), np.zeros((10, 12, 3)))


def test_ssim_backward_matches_fd():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(11, 12, 3)), rng.uniform(size=(11, 12, 3))
    g = rng.normal(size=(11, 12))
    analytic = ssim_map_backward(a, b, g)
    h = 1e-5
    fd = np.zeros_like(a)
    for idx in np.ndindex(a.shape):
        old = a[idx]
        a[idx] = old + h
        fp = np.sum(g * ssim(a, b)[1])
        a[idx] = old - h
        fm = np.sum(g * ssim(a, b)[1])
        a[idx] = old
        fd[idx] = (fp - fm) / (2 * h)
    assert np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)) < 1e-6


# photometric losses


def test_photometric_loss_decomposition():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    lb = photometric_loss(a, b, 0.2)
    l1 = np.mean(np.abs(a - b))
    dssim = np.mean((1 - ssim_loop(a, b)) / 2)
    assert lb.l1_term == pytest.approx(l1, rel=1e-12)
    assert lb.dssim_term == pytest.approx(dssim, rel=1e-10)
    assert lb.total == pytest.approx(0.8 * l1 + 0.2 * dssim, rel=1e-10)
    assert lb.per_pixel_map.shape == (12, 12)


def test_photometric_loss_of_identical_images_is_zero():
    a = np.random.default_rng(4).uniform(size=(12, 12, 3))
    lb = photometric_loss(a, a, 0.2)
    assert lb.total == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("w", [-0.1, 1.5])
def test_photometric_weight_range(w):
    a = np.zeros((12, 12, 3))
    with pytest.raises(ValueError):
        photometric_loss(a, a, w)


def test_masked_loss_identities():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    ref = photometric_loss(a, b, 0.2)
    zero = masked_loss_3d(a, b, np.zeros((12, 12)), 0.2)
    assert zero.total == ref.total
    assert np.array_equal(zero.grad, ref.grad)
    full = masked_loss_3d(a, b, np.ones((12, 12)), 0.2)
    assert full.total == 0.0
    assert not np.any(full.grad)


def test_masked_loss_averages_over_all_pixels():
    rng = np.random.default_rng(6)
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    m = np.zeros((12, 12))
    m[:, 6:] = 1
    lb = masked_loss_3d(a, b, m, 0.2)
    per_pixel = photometric_loss(a, b, 0.2).per_pixel_map
    assert lb.total == pytest.approx(per_pixel[:, :6].sum() / 144, rel=1e-12)


def test_masked_loss_shape_mismatch():
    with pytest.raises(ValueError):
        masked_loss_3d(np.zeros((12, 12, 3)), np.zeros((12, 12, 3)), np.zeros((12, 11)), 0.2)


@pytest.mark.parametrize("seed", range(3))
def test_composed_loss_gradients(seed):
    errors = check_compose(np.random.default_rng(seed))
    assert max(errors.values()) < 1e-4, errors
