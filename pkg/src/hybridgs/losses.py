"""Hybrid composition, SSIM/DSSIM and the photometric losses, with analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_shapes(*arrays, what="inputs"):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch between {what}: {[a.shape for a in arrays]}")


# ---------------------------------------------------------------------------
# composition


def compose(i_s, i_t, m_t):
    """``m_t * i_t + (1 - m_t) * i_s`` with the mask broadcast over channels."""
    i_s, i_t, m_t = np.asarray(i_s), np.asarray(i_t), np.asarray(m_t)
    _check_shapes(i_s, i_t, what="static and transient images")
    if m_t.shape != i_s.shape[:2]:
        raise ValueError(f"mask shape {m_t.shape} does not match image shape {i_s.shape[:2]}")
    m = m_t[..., None]
    return m * i_t + (1.0 - m) * i_s


def compose_backward(upstream, i_s, i_t, m_t):
    """Returns (dL/di_s, dL/di_t, dL/dm_t)."""
    m = np.asarray(m_t)[..., None]
    return upstream * (1.0 - m), upstream * m, np.sum(upstream * (np.asarray(i_t) - np.asarray(i_s)), axis=-1)


# ---------------------------------------------------------------------------
# SSIM


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


@lru_cache(maxsize=32)
def _filter_matrix(n, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Dense (n,n) operator: reflect-pad by size//2, then correlate with the 1D window."""
    w = gaussian_window(size, sigma)
    r = size // 2
    A = np.zeros((n, n))
    for i in range(n):
        for k in range(size):
            j = i + k - r
            # numpy 'reflect' padding (edge sample not repeated)
            if j < 0:
                j = -j
            elif j > n - 1:
                j = 2 * (n - 1) - j
            A[i, j] += w[k]
    A.setflags(write=False)
    return A


def _blur(x, Ah, Aw):
    """Separable window filter on (H,W,C): ``Ah @ x @ Aw.T`` per channel."""
    return np.tensordot(np.tensordot(Ah, x, axes=(1, 0)), Aw, axes=(1, 1)).transpose(0, 2, 1)


def _blur_adjoint(g, Ah, Aw):
    return np.tensordot(np.tensordot(Ah, g, axes=(0, 0)), Aw, axes=(1, 0)).transpose(0, 2, 1)


def _ssim_parts(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b, what="SSIM inputs")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {W}x{H}")
    Ah, Aw = _filter_matrix(H), _filter_matrix(W)
    mu_a, mu_b = _blur(a, Ah, Aw), _blur(b, Ah, Aw)
    e_aa, e_bb, e_ab = _blur(a * a, Ah, Aw), _blur(b * b, Ah, Aw), _blur(a * b, Ah, Aw)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a ** 2 + mu_b ** 2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    return dict(a=a, b=b, Ah=Ah, Aw=Aw, mu_a=mu_a, mu_b=mu_b, A1=A1, A2=A2, B1=B1, B2=B2)


def ssim(a, b):
    """SSIM of two (H,W,3) images in [0,1]: (mean, per-pixel channel-averaged map)."""
    p = _ssim_parts(a, b)
    smap = (p["A1"] * p["A2"]) / (p["B1"] * p["B2"])
    smap = smap.mean(axis=-1)
    return float(smap.mean()), smap


def ssim_map_backward(a, b, g_map, parts=None):
    """Gradient w.r.t. ``a`` of ``sum(g_map * ssim_map(a, b))``."""
    p = _ssim_parts(a, b) if parts is None else parts
    a_, b_ = p["a"], p["b"]
    C = a_.shape[-1]
    g = np.asarray(g_map, dtype=np.float64)[..., None] / C
    A1, A2, B1, B2 = p["A1"], p["A2"], p["B1"], p["B2"]
    mu_a, mu_b = p["mu_a"], p["mu_b"]
    N, D = A1 * A2, B1 * B2
    # S = N / D in terms of mu_a, E[a^2], E[ab]
    dN_dmu = 2 * mu_b * A2 - 2 * mu_b * A1
    dD_dmu = 2 * mu_a * B2 - 2 * mu_a * B1
    dS_dmu = (dN_dmu * D - N * dD_dmu) / D ** 2
    dS_daa = -N / (D * B2)
    dS_dab = 2 * A1 / D
    Ah, Aw = p["Ah"], p["Aw"]
    grad = (_blur_adjoint(g * dS_dmu, Ah, Aw) + 2 * a_ * _blur_adjoint(g * dS_daa, Ah, Aw)
            + b_ * _blur_adjoint(g * dS_dab, Ah, Aw))
    return grad.reshape(np.shape(a))


# ---------------------------------------------------------------------------
# photometric losses


@dataclass
class LossBreakdown:
    total: float
    l1_term: float
    dssim_term: float
    per_pixel_map: np.ndarray
    grad: np.ndarray | None = None   # dL/dpred


def _loss(pred, gt, weight, pixel_weight, with_grad):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt, what="prediction and target")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"DSSIM weight must lie in [0, 1], got {weight}")
    H, W = pred.shape[:2]
    parts = _ssim_parts(pred, gt)
    smap = ((parts["A1"] * parts["A2"]) / (parts["B1"] * parts["B2"])).mean(axis=-1)
    dssim_map = (1.0 - smap) / 2.0
    diff = pred - gt
    l1_map = np.abs(diff).mean(axis=-1)
    per_pixel = weight * dssim_map + (1.0 - weight) * l1_map
    pw = np.ones((H, W)) if pixel_weight is None else pixel_weight
    n = H * W
    out = LossBreakdown(
        total=float(np.sum(per_pixel * pw) / n),
        l1_term=float(np.sum(l1_map * pw) / n),
        dssim_term=float(np.sum(dssim_map * pw) / n),
        per_pixel_map=per_pixel,
    )
    if with_grad:
        g = pw / n
        grad = (1.0 - weight) * np.sign(diff) * (g[..., None] / pred.shape[-1])
        if weight != 0.0:
            grad = grad + ssim_map_backward(pred, gt, -0.5 * weight * g, parts)
        out.grad = grad
    return out


def photometric_loss(pred, gt, weight: float, with_grad: bool = True) -> LossBreakdown:
    """``weight * DSSIM + (1 - weight) * L1``, averaged over pixels."""
    return _loss(pred, gt, weight, None, with_grad)


def masked_loss_3d(pred_composed, gt, binary_mask, weight: float, with_grad: bool = True) -> LossBreakdown:
    """Photometric loss map weighted by ``1 - mask``, averaged over *all* pixels."""
    mask = np.asarray(binary_mask, dtype=np.float64)
    if mask.shape != np.shape(gt)[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {np.shape(gt)[:2]}")
    return _loss(pred_composed, gt, weight, 1.0 - mask, with_grad)
