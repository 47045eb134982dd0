"""Differentiable renderer for per-image 2D Gaussian layers.

Color and mask are unordered accumulations, ``sum a'_i c_i`` and ``sum a'_i``.
Splats are visited in a canonical (lexicographic) order so the floating-point
reduction -- and hence the image -- does not depend on how the layer is stored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .raster3d import TILE, BackwardCacheError, bin_tiles, pixel_rects
from .scene import Gaussian2DLayer, sigmoid

# contributions below this weight are dropped; keeps the culled sum within
# 1e-6 of the exhaustive one for any realistic per-pixel overlap
WEIGHT_FLOOR = 1e-8


@dataclass
class RenderOutput2D:
    raw_color: np.ndarray    # (H,W,3) pre-clamp accumulation
    raw_mask: np.ndarray     # (H,W) pre-clamp sum of weights
    layer: Gaussian2DLayer | None = None
    order: np.ndarray | None = None
    conic: np.ndarray | None = None
    opacity: np.ndarray | None = None
    rects: np.ndarray | None = None
    tile_offsets: np.ndarray | None = None
    tile_lists: np.ndarray | None = None
    weight_floor: float = WEIGHT_FLOOR

    @property
    def color(self):
        return np.clip(self.raw_color, 0.0, 1.0)

    @property
    def mask(self):
        return np.clip(self.raw_mask, 0.0, 1.0)

    @property
    def has_cache(self):
        return self.layer is not None and self.tile_lists is not None


def conics_from_params(log_scales, angles):
    """Upper triangle of inv(R S S^T R^T), from the raw parameters directly."""
    c, s = np.cos(angles), np.sin(angles)
    w1 = np.exp(-2.0 * log_scales[:, 0])
    w2 = np.exp(-2.0 * log_scales[:, 1])
    return np.stack([c * c * w1 + s * s * w2, c * s * (w1 - w2), s * s * w1 + c * c * w2], -1)


def canonical_order(layer: Gaussian2DLayer):
    keys = [layer.opacity_logits, *layer.colors.T[::-1], layer.rotation_angles, *layer.log_scales.T[::-1],
            layer.centers[:, 0], layer.centers[:, 1]]
    return np.lexsort(keys)


@njit(cache=True)
def _forward_kernel(means, conics, opac, colors, rects, offsets, lists, width, height, tile, floor):
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    col = np.zeros((height, width, 3))
    msk = np.zeros((height, width))
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            yc = py + 0.5
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                xc = px + 0.5
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                m = 0.0
                for k in range(offsets[t], offsets[t + 1]):
                    g = lists[k]
                    if px < rects[g, 0] or px > rects[g, 1] or py < rects[g, 2] or py > rects[g, 3]:
                        continue
                    dx = xc - means[g, 0]
                    dy = yc - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    a = opac[g] * np.exp(-0.5 * q)
                    if a < floor:
                        continue
                    c0 += a * colors[g, 0]
                    c1 += a * colors[g, 1]
                    c2 += a * colors[g, 2]
                    m += a
                col[py, px, 0] = c0
                col[py, px, 1] = c1
                col[py, px, 2] = c2
                msk[py, px] = m
    return col, msk


@njit(cache=True)
def _backward_kernel(means, conics, opac, colors, rects, offsets, lists, width, height, tile, floor,
                     g_col, g_mask):
    n = means.shape[0]
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    d_mean = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_color = np.zeros((n, 3))
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            yc = py + 0.5
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                gc0 = g_col[py, px, 0]
                gc1 = g_col[py, px, 1]
                gc2 = g_col[py, px, 2]
                gm = g_mask[py, px]
                if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gm == 0.0:
                    continue
                xc = px + 0.5
                for k in range(offsets[t], offsets[t + 1]):
                    g = lists[k]
                    if px < rects[g, 0] or px > rects[g, 1] or py < rects[g, 2] or py > rects[g, 3]:
                        continue
                    dx = xc - means[g, 0]
                    dy = yc - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    a = opac[g] * np.exp(-0.5 * q)
                    if a < floor:
                        continue
                    d_color[g, 0] += gc0 * a
                    d_color[g, 1] += gc1 * a
                    d_color[g, 2] += gc2 * a
                    dL_da = gc0 * colors[g, 0] + gc1 * colors[g, 1] + gc2 * colors[g, 2] + gm
                    d_opac[g] += dL_da * a / opac[g]
                    dL_dq = -0.5 * a * dL_da
                    d_conic[g, 0] += dL_dq * dx * dx
                    d_conic[g, 1] += dL_dq * 2.0 * dx * dy
                    d_conic[g, 2] += dL_dq * dy * dy
                    d_mean[g, 0] -= dL_dq * (2.0 * conics[g, 0] * dx + 2.0 * conics[g, 1] * dy)
                    d_mean[g, 1] -= dL_dq * (2.0 * conics[g, 1] * dx + 2.0 * conics[g, 2] * dy)
    return d_mean, d_conic, d_opac, d_color


def rasterize2d_forward(layer: Gaussian2DLayer, width: int, height: int, cache: bool = True,
                        weight_floor: float = WEIGHT_FLOOR) -> RenderOutput2D:
    order = canonical_order(layer)
    means = np.ascontiguousarray(layer.centers[order])
    conic = conics_from_params(layer.log_scales[order], layer.rotation_angles[order])
    opacity = sigmoid(layer.opacity_logits[order])
    colors = np.ascontiguousarray(layer.colors[order])
    if weight_floor > 0:
        # ellipse where opacity * G = floor; its bounding box is sqrt(q * cov_ii)
        q_max = 2.0 * np.log(np.maximum(opacity / weight_floor, 1.0))
        det = conic[:, 0] * conic[:, 2] - conic[:, 1] ** 2
        cov_xx = conic[:, 2] / det
        cov_yy = conic[:, 0] / det
        half = np.ceil(np.sqrt(q_max * np.maximum(cov_xx, cov_yy)))
        half = np.where(opacity > weight_floor, half, -1.0)
    else:
        half = np.full(len(order), np.inf)
    rects, empty = pixel_rects(means, half, width, height)
    rects[empty] = (0, -1, 0, -1)
    rects = np.ascontiguousarray(rects)
    offsets, lists = bin_tiles(rects, width, height, TILE)
    raw_color, raw_mask = _forward_kernel(means, conic, opacity, colors, rects, offsets, lists,
                                          width, height, TILE, weight_floor)
    out = RenderOutput2D(raw_color=raw_color, raw_mask=raw_mask, weight_floor=weight_floor)
    if cache:
        out.layer = layer
        out.order = order
        out.conic = conic
        out.opacity = opacity
        out.rects = rects
        out.tile_offsets = offsets
        out.tile_lists = lists
    return out


def rasterize2d_backward(output: RenderOutput2D, dL_dcolor=None, dL_dmask=None) -> dict[str, np.ndarray]:
    """Gradients w.r.t. raw layer parameters, given gradients on the *clamped* color and mask.

    Pixels where a clamp is active (raw value strictly outside [0, 1]) pass no gradient.
    """
    if not output.has_cache:
        raise BackwardCacheError("rasterize2d_backward needs a forward pass rendered with cache=True")
    layer = output.layer
    H, W = output.raw_mask.shape
    g_col = np.zeros((H, W, 3)) if dL_dcolor is None else np.asarray(dL_dcolor, dtype=np.float64).reshape(H, W, 3)
    g_mask = np.zeros((H, W)) if dL_dmask is None else np.asarray(dL_dmask, dtype=np.float64).reshape(H, W)
    g_col = np.ascontiguousarray(g_col * ((output.raw_color >= 0.0) & (output.raw_color <= 1.0)))
    g_mask = np.ascontiguousarray(g_mask * ((output.raw_mask >= 0.0) & (output.raw_mask <= 1.0)))

    order = output.order
    d_mean, d_conic, d_opac, d_color = _backward_kernel(
        np.ascontiguousarray(layer.centers[order]), output.conic, output.opacity,
        np.ascontiguousarray(layer.colors[order]), output.rects, output.tile_offsets, output.tile_lists,
        W, H, TILE, output.weight_floor, g_col, g_mask)

    # conic = (c^2 w1 + s^2 w2, c s (w1 - w2), s^2 w1 + c^2 w2), w_k = exp(-2 log_scale_k)
    theta = layer.rotation_angles[order]
    ls = layer.log_scales[order]
    c, s = np.cos(theta), np.sin(theta)
    w1, w2 = np.exp(-2.0 * ls[:, 0]), np.exp(-2.0 * ls[:, 1])
    da, db, dc = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    d_theta = da * 2 * c * s * (w2 - w1) + db * (c * c - s * s) * (w1 - w2) + dc * 2 * c * s * (w1 - w2)
    d_w1 = da * c * c + db * c * s + dc * s * s
    d_w2 = da * s * s - db * c * s + dc * c * c
    d_ls = np.stack([d_w1 * -2 * w1, d_w2 * -2 * w2], -1)

    grads = {name: np.zeros_like(getattr(layer, name)) for name in Gaussian2DLayer.PARAM_NAMES}
    grads["centers"][order] = d_mean
    grads["log_scales"][order] = d_ls
    grads["rotation_angles"][order] = d_theta
    grads["colors"][order] = d_color
    grads["opacity_logits"][order] = d_opac * output.opacity * (1.0 - output.opacity)
    return grads
