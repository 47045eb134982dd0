"""Frustum co-visibility for multi-view regulated supervision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, Gaussian3DSet


@dataclass(frozen=True)
class Frustum:
    """Six inward-facing world-space planes ``(n, d)``; inside iff ``n . p + d >= 0`` for all."""

    planes: np.ndarray  # (6,4): left, right, top, bottom, near, far

    def signed_distances(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.planes[:, :3].T + self.planes[:, 3]

    def contains(self, points):
        return np.all(self.signed_distances(points) >= 0.0, axis=1)


def compute_frustum(cam: Camera) -> Frustum:
    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    W, H = cam.width, cam.height
    # camera-space planes (a, b, c, d): a x + b y + c z + d >= 0
    cam_planes = np.array([
        [fx, 0.0, cx, 0.0],              # u >= 0
        [-fx, 0.0, W - cx, 0.0],         # u <= W
        [0.0, fy, cy, 0.0],              # v >= 0
        [0.0, -fy, H - cy, 0.0],         # v <= H
        [0.0, 0.0, 1.0, -cam.near],      # z >= near
        [0.0, 0.0, -1.0, cam.far],       # z <= far
    ])
    R, t = cam.R, cam.t
    n_world = cam_planes[:, :3] @ R
    d_world = cam_planes[:, :3] @ t + cam_planes[:, 3]
    norm = np.linalg.norm(n_world, axis=1, keepdims=True)
    return Frustum(np.concatenate([n_world, d_world[:, None]], axis=1) / norm)


def in_view(points, cam: Camera):
    """Exact projection test: near < z < far and the projection lands on the image."""
    t = cam.world_to_cam_points(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = t[:, 2]
    ok = (z > cam.near) & (z < cam.far)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * t[:, 0] / z + cam.cx
        v = cam.fy * t[:, 1] / z + cam.cy
    return ok & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)


def extract_covisible(g3d: Gaussian3DSet, cams: list[Camera]) -> np.ndarray:
    """Sorted indices of Gaussians whose centers every camera sees."""
    if len(cams) == 0:
        raise ValueError("extract_covisible needs at least one camera")
    keep = np.ones(len(g3d), dtype=bool)
    for cam in cams:
        keep &= in_view(g3d.positions, cam)
    return np.nonzero(keep)[0]


def gradient_gate(grads: dict[str, np.ndarray], covis, n: int | None = None) -> dict[str, np.ndarray]:
    """Zero every gradient row whose index is not in ``covis``."""
    covis = np.asarray(covis, dtype=np.int64)
    if n is None:
        n = len(next(iter(grads.values())))
    if covis.size and (covis.min() < 0 or covis.max() >= n):
        raise IndexError(f"co-visible index out of range for {n} Gaussians")
    keep = np.zeros(n, dtype=bool)
    keep[covis] = True
    out = {}
    for name, g in grads.items():
        if len(g) != n:
            raise ValueError(f"gradient '{name}' has {len(g)} rows, expected {n}")
        g = g.copy()
        g[~keep] = 0.0
        out[name] = g
    return out
