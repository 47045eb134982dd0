"""Differentiable 3D Gaussian rasterizer (EWA projection + front-to-back alpha blending).

The forward pass bins projected splats into 16x16 pixel tiles, each tile list
sorted by depth (ties broken by original index).  The backward pass replays
each pixel's contributor list to recover the exact per-splat transmittance,
so no division by ``1 - alpha`` is ever needed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .scene import Camera, Gaussian3DSet, quaternion_rotation_backward, quaternion_to_rotation, sigmoid

TILE = 16


@dataclass(frozen=True)
class RasterSettings:
    """Numerical-hygiene constants of the blending loop."""

    alpha_min: float = 1.0 / 255.0   # splats below this at a pixel are skipped
    alpha_max: float = 0.999         # per-splat clamp
    t_min: float = 1e-4              # early termination threshold on transmittance
    dilation: float = 0.3            # px^2 added to the projected covariance

    @classmethod
    def reference(cls):
        """Smooth variant for oracle and finite-difference checks: no skipping, no early exit."""
        return cls(alpha_min=0.0, t_min=0.0)


DEFAULT_SETTINGS = RasterSettings()


@dataclass
class ProjectedGaussians:
    """Structure-of-arrays view of the splats that survived culling.

    ``index`` maps each row back to its row in the source Gaussian3DSet.  The
    fields up to ``rects`` are what the blending kernels read; ``cam_points``,
    ``T``, ``cov3d``, ``rotmats`` and ``scales`` are kept for the backward pass.
    """

    index: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray      # (M,2,2), dilation included
    conic: np.ndarray      # (M,3) upper triangle a, b, c of inv(cov2d)
    depth: np.ndarray
    radius: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    rects: np.ndarray      # (M,4) inclusive pixel bounds x0, x1, y0, y1
    n_source: int
    cam_points: np.ndarray
    T: np.ndarray          # (M,2,3) = J W
    cov3d: np.ndarray
    rotmats: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    settings: RasterSettings
    camera_R: np.ndarray
    focals: tuple[float, float]
    near_culled: int = 0
    footprint_culled: int = 0

    def __len__(self):
        return len(self.index)


@dataclass
class RenderOutput3D:
    color: np.ndarray         # (H,W,3)
    accum_alpha: np.ndarray   # (H,W)
    projected: ProjectedGaussians | None = None
    background: np.ndarray | None = None
    # contributor records: per-tile depth-sorted lists and per-pixel traversal length
    tile_offsets: np.ndarray | None = None
    tile_lists: np.ndarray | None = None
    n_traversed: np.ndarray | None = None
    final_T: np.ndarray | None = None
    n_contrib: np.ndarray | None = None

    @property
    def has_cache(self):
        return self.projected is not None and self.tile_lists is not None


def _extent_factor(opacity, alpha_min):
    """Mahalanobis radius beyond which ``opacity * G < alpha_min`` (0 if never visible)."""
    if alpha_min <= 0.0:
        return np.full(opacity.shape, np.inf)
    ratio = opacity / alpha_min
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0)))
    return np.where(ratio > 1.0, k, -1.0)


def pixel_rects(mean2d, half_extent, width, height):
    """Inclusive integer pixel ranges whose centers lie within ``mean +- half_extent``."""
    big = float(width + height)
    he = np.minimum(half_extent, big)
    x0 = np.ceil(mean2d[:, 0] - he - 0.5)
    x1 = np.floor(mean2d[:, 0] + he - 0.5)
    y0 = np.ceil(mean2d[:, 1] - he - 0.5)
    y1 = np.floor(mean2d[:, 1] + he - 0.5)
    x0 = np.clip(x0, 0, width - 1)
    y0 = np.clip(y0, 0, height - 1)
    x1 = np.clip(x1, -1, width - 1)
    y1 = np.clip(y1, -1, height - 1)
    rects = np.stack([x0, x1, y0, y1], -1).astype(np.int64)
    empty = (half_extent < 0) | (mean2d[:, 0] + he - 0.5 < 0) | (mean2d[:, 0] - he - 0.5 > width - 1) \
        | (mean2d[:, 1] + he - 0.5 < 0) | (mean2d[:, 1] - he - 0.5 > height - 1)
    return rects, empty | (rects[:, 1] < rects[:, 0]) | (rects[:, 3] < rects[:, 2])


def project_gaussians(g3d: Gaussian3DSet, cam: Camera, settings: RasterSettings = DEFAULT_SETTINGS) -> ProjectedGaussians:
    """Perspective-project centers and EWA-project covariances; cull by depth and footprint."""
    n = len(g3d)
    W = cam.R
    t_all = g3d.positions @ W.T + cam.t if n else np.zeros((0, 3))
    z = t_all[:, 2]
    depth_ok = (z > cam.near) & (z < cam.far)
    idx = np.nonzero(depth_ok)[0]
    t = t_all[idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], -1)

    rotmats = quaternion_to_rotation(g3d.rotations[idx]) if len(idx) else np.zeros((0, 3, 3))
    scales = np.exp(g3d.log_scales[idx])
    M = rotmats * scales[:, None, :]
    cov3d = M @ M.transpose(0, 2, 1)

    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z ** 2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z ** 2
    T = J @ W
    cov2d = T @ cov3d @ T.transpose(0, 2, 1)
    cov2d[:, 0, 0] += settings.dilation
    cov2d[:, 1, 1] += settings.dilation
    cov2d[:, 0, 1] = cov2d[:, 1, 0] = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], -1)

    opacity = sigmoid(g3d.opacity_logits[idx])
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid ** 2 - det, 0.0))
    k = _extent_factor(opacity, settings.alpha_min)
    with np.errstate(invalid="ignore"):
        half = np.where(k >= 0, np.ceil(k * np.sqrt(lam_max)), -1.0)
    rects, empty = pixel_rects(mean2d, half, cam.width, cam.height)
    keep = ~empty & (det > 0)
    big = cam.width + cam.height
    radius = np.minimum(half, big).astype(np.int64)

    sel = np.nonzero(keep)[0]
    return ProjectedGaussians(
        index=idx[sel], mean2d=mean2d[sel], cov2d=cov2d[sel], conic=conic[sel], depth=z[sel],
        radius=radius[sel], color=g3d.colors[idx[sel]].copy(), opacity=opacity[sel], rects=rects[sel],
        n_source=n, cam_points=t[sel], T=T[sel], cov3d=cov3d[sel], rotmats=rotmats[sel], scales=scales[sel],
        rotations=g3d.rotations[idx[sel]].copy(), settings=settings,
        camera_R=W.copy(), focals=(float(cam.fx), float(cam.fy)),
        near_culled=int(n - len(idx)), footprint_culled=int(len(idx) - len(sel)),
    )


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True)
def bin_tiles(rects, width, height, tile):
    """CSR tile lists; entries keep the order of ``rects`` (already depth sorted)."""
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, np.int64)
    m = rects.shape[0]
    for g in range(m):
        x0, x1, y0, y1 = rects[g, 0], rects[g, 1], rects[g, 2], rects[g, 3]
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    lists = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for g in range(m):
        x0, x1, y0, y1 = rects[g, 0], rects[g, 1], rects[g, 2], rects[g, 3]
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                t = ty * tiles_x + tx
                lists[fill[t]] = g
                fill[t] += 1
    return offsets, lists


@njit(cache=True)
def _forward_kernel(means, conics, opac, colors, rects, offsets, lists, width, height, tile, bg,
                    alpha_min, alpha_max, t_min):
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    out = np.zeros((height, width, 3))
    final_T = np.ones((height, width))
    n_trav = np.zeros((height, width), np.int64)
    n_contrib = np.zeros((height, width), np.int64)
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            yc = py + 0.5
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                xc = px + 0.5
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                last = 0
                cnt = 0
                for k in range(start, end):
                    if T < t_min:
                        break
                    g = lists[k]
                    if px < rects[g, 0] or px > rects[g, 1] or py < rects[g, 2] or py > rects[g, 3]:
                        continue
                    dx = xc - means[g, 0]
                    dy = yc - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    a = opac[g] * np.exp(-0.5 * q)
                    if a > alpha_max:
                        a = alpha_max
                    if a < alpha_min:
                        continue
                    w = a * T
                    c0 += w * colors[g, 0]
                    c1 += w * colors[g, 1]
                    c2 += w * colors[g, 2]
                    T *= 1.0 - a
                    last = k - start + 1
                    cnt += 1
                out[py, px, 0] = c0 + T * bg[0]
                out[py, px, 1] = c1 + T * bg[1]
                out[py, px, 2] = c2 + T * bg[2]
                final_T[py, px] = T
                n_trav[py, px] = last
                n_contrib[py, px] = cnt
    return out, final_T, n_trav, n_contrib


@njit(cache=True)
def _backward_kernel(means, conics, opac, colors, rects, offsets, lists, n_trav, n_contrib, final_T,
                     width, height, tile, bg, alpha_min, alpha_max, dL_dC, dL_dA):
    m = means.shape[0]
    tiles_x = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_color = np.zeros((m, 3))
    max_c = 1
    for py in range(height):
        for px in range(width):
            if n_contrib[py, px] > max_c:
                max_c = n_contrib[py, px]
    s_g = np.empty(max_c, np.int64)
    s_a = np.empty(max_c)
    s_T = np.empty(max_c)
    s_clamped = np.empty(max_c, np.bool_)
    s_dx = np.empty(max_c)
    s_dy = np.empty(max_c)
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            yc = py + 0.5
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                xc = px + 0.5
                gC0 = dL_dC[py, px, 0]
                gC1 = dL_dC[py, px, 1]
                gC2 = dL_dC[py, px, 2]
                gA = dL_dA[py, px]
                if gC0 == 0.0 and gC1 == 0.0 and gC2 == 0.0 and gA == 0.0:
                    continue
                # replay the forward traversal
                T = 1.0
                n = 0
                for k in range(start, start + n_trav[py, px]):
                    g = lists[k]
                    if px < rects[g, 0] or px > rects[g, 1] or py < rects[g, 2] or py > rects[g, 3]:
                        continue
                    dx = xc - means[g, 0]
                    dy = yc - means[g, 1]
                    q = conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy
                    a = opac[g] * np.exp(-0.5 * q)
                    clamped = False
                    if a > alpha_max:
                        a = alpha_max
                        clamped = True
                    if a < alpha_min:
                        continue
                    s_g[n] = g
                    s_a[n] = a
                    s_T[n] = T
                    s_clamped[n] = clamped
                    s_dx[n] = dx
                    s_dy[n] = dy
                    n += 1
                    T *= 1.0 - a
                Tn = final_T[py, px]
                S0 = Tn * bg[0]
                S1 = Tn * bg[1]
                S2 = Tn * bg[2]
                for j in range(n - 1, -1, -1):
                    g = s_g[j]
                    a = s_a[j]
                    Ti = s_T[j]
                    w = a * Ti
                    d_color[g, 0] += gC0 * w
                    d_color[g, 1] += gC1 * w
                    d_color[g, 2] += gC2 * w
                    inv = 1.0 / (1.0 - a)
                    dL_da = (gC0 * (colors[g, 0] * Ti - S0 * inv) + gC1 * (colors[g, 1] * Ti - S1 * inv)
                             + gC2 * (colors[g, 2] * Ti - S2 * inv) + gA * Tn * inv)
                    S0 += colors[g, 0] * w
                    S1 += colors[g, 1] * w
                    S2 += colors[g, 2] * w
                    if s_clamped[j]:
                        continue
                    # a = opac * exp(-q/2)
                    d_opac[g] += dL_da * a / opac[g]
                    dL_dq = -0.5 * a * dL_da
                    dx = s_dx[j]
                    dy = s_dy[j]
                    ca = conics[g, 0]
                    cb = conics[g, 1]
                    cc = conics[g, 2]
                    d_conic[g, 0] += dL_dq * dx * dx
                    d_conic[g, 1] += dL_dq * 2.0 * dx * dy
                    d_conic[g, 2] += dL_dq * dy * dy
                    # dx = xc - mean_x
                    d_mean[g, 0] -= dL_dq * (2.0 * ca * dx + 2.0 * cb * dy)
                    d_mean[g, 1] -= dL_dq * (2.0 * cb * dx + 2.0 * cc * dy)
    return d_mean, d_conic, d_opac, d_color


# ---------------------------------------------------------------------------
# public API


def _depth_order(projected: ProjectedGaussians):
    return np.lexsort((projected.index, projected.depth))


def rasterize3d_forward(projected: ProjectedGaussians, cam: Camera, background=(0.0, 0.0, 0.0),
                        cache: bool = True) -> RenderOutput3D:
    """Alpha-composite projected splats front to back.  ``cache`` keeps what backward needs."""
    order = _depth_order(projected)
    p = _reorder(projected, order)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    s = p.settings
    offsets, lists = bin_tiles(p.rects, cam.width, cam.height, TILE)
    color, final_T, n_trav, n_contrib = _forward_kernel(
        p.mean2d, p.conic, p.opacity, p.color, p.rects, offsets, lists, cam.width, cam.height, TILE, bg,
        s.alpha_min, s.alpha_max, s.t_min)
    out = RenderOutput3D(color=color, accum_alpha=1.0 - final_T, background=bg)
    if cache:
        out.projected = p
        out.tile_offsets = offsets
        out.tile_lists = lists
        out.n_traversed = n_trav
        out.final_T = final_T
        out.n_contrib = n_contrib
    return out


def _reorder(p: ProjectedGaussians, order) -> ProjectedGaussians:
    arrays = {name: getattr(p, name)[order] for name in
              ("index", "mean2d", "cov2d", "conic", "depth", "radius", "color", "opacity", "rects",
               "cam_points", "T", "cov3d", "rotmats", "scales", "rotations")}
    arrays["rects"] = np.ascontiguousarray(arrays["rects"])
    return replace(p, **arrays)


class BackwardCacheError(RuntimeError):
    """Backward was called on an output rendered without its cache."""


def rasterize3d_backward(output: RenderOutput3D, dL_dcolor, dL_dalpha=None, return_screen_grads: bool = False):
    """Gradients of a scalar loss w.r.t. every raw Gaussian3DSet parameter.

    Culled Gaussians get exactly zero.  With ``return_screen_grads`` the pixel-space
    mean gradients (indexed like the source set) are returned as a second value.
    """
    if not output.has_cache:
        raise BackwardCacheError("rasterize3d_backward needs a forward pass rendered with cache=True")
    p = output.projected
    H, W = output.color.shape[:2]
    dL_dcolor = np.ascontiguousarray(dL_dcolor, dtype=np.float64).reshape(H, W, 3)
    dL_dalpha = np.zeros((H, W)) if dL_dalpha is None else np.ascontiguousarray(dL_dalpha, dtype=np.float64).reshape(H, W)
    s = p.settings
    d_mean, d_conic, d_opac, d_color = _backward_kernel(
        p.mean2d, p.conic, p.opacity, p.color, p.rects, output.tile_offsets, output.tile_lists,
        output.n_traversed, output.n_contrib, output.final_T, W, H, TILE, output.background,
        s.alpha_min, s.alpha_max, dL_dcolor, dL_dalpha)
    grads = projection_backward(p, d_mean, d_conic, d_opac, d_color)
    if return_screen_grads:
        screen = np.zeros((p.n_source, 2))
        screen[p.index] = d_mean
        return grads, screen
    return grads


def projection_backward(p: ProjectedGaussians, d_mean, d_conic, d_opac, d_color):
    """Chain screen-space gradients through conic inversion, EWA projection and activations."""
    n = p.n_source
    grads = {
        "positions": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacity_logits": np.zeros(n),
        "colors": np.zeros((n, 3)),
    }
    if len(p) == 0:
        return grads
    idx = p.index
    grads["colors"][idx] = d_color
    grads["opacity_logits"][idx] = d_opac * p.opacity * (1.0 - p.opacity)

    # conic = inv(cov2d): dL/dcov = -K G K with G the symmetric gradient w.r.t. K
    K = np.stack([np.stack([p.conic[:, 0], p.conic[:, 1]], -1), np.stack([p.conic[:, 1], p.conic[:, 2]], -1)], -2)
    G = np.stack([np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
                  np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1)], -2)
    d_cov2d = -K @ G @ K

    # cov2d = T cov3d T^T (+ dilation), T = J W
    Tm = p.T
    d_cov3d = Tm.transpose(0, 2, 1) @ d_cov2d @ Tm
    d_T = 2.0 * d_cov2d @ Tm @ p.cov3d
    Wr = p.camera_R
    d_J = d_T @ Wr.T

    x, y, z = p.cam_points[:, 0], p.cam_points[:, 1], p.cam_points[:, 2]
    fx, fy = p.focals
    # J = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
    d_t = np.zeros((len(p), 3))
    d_t[:, 0] += d_J[:, 0, 2] * (-fx / z ** 2)
    d_t[:, 1] += d_J[:, 1, 2] * (-fy / z ** 2)
    d_t[:, 2] += (d_J[:, 0, 0] * (-fx / z ** 2) + d_J[:, 0, 2] * (2 * fx * x / z ** 3)
                  + d_J[:, 1, 1] * (-fy / z ** 2) + d_J[:, 1, 2] * (2 * fy * y / z ** 3))
    # mean2d = (fx x/z + cx, fy y/z + cy)
    d_t[:, 0] += d_mean[:, 0] * fx / z
    d_t[:, 1] += d_mean[:, 1] * fy / z
    d_t[:, 2] += -d_mean[:, 0] * fx * x / z ** 2 - d_mean[:, 1] * fy * y / z ** 2
    grads["positions"][idx] = d_t @ Wr

    # cov3d = M M^T, M = R diag(s)
    Mm = p.rotmats * p.scales[:, None, :]
    d_M = 2.0 * d_cov3d @ Mm
    d_s = np.sum(d_M * p.rotmats, axis=1)
    grads["log_scales"][idx] = d_s * p.scales
    d_R = d_M * p.scales[:, None, :]
    grads["rotations"][idx] = quaternion_rotation_backward(p.rotations, d_R)
    return grads


def render3d(g3d: Gaussian3DSet, cam: Camera, background=(0.0, 0.0, 0.0),
             settings: RasterSettings = DEFAULT_SETTINGS, cache: bool = True) -> RenderOutput3D:
    """Project + rasterize in one call."""
    projected = project_gaussians(g3d, cam, settings)
    return rasterize3d_forward(projected, cam, background, cache=cache)
