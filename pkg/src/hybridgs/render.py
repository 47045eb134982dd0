"""Novel-view rendering of the static branch and per-view decomposition."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .losses import compose
from .raster2d import rasterize2d_forward
from .raster3d import render3d
from .scene import Camera, Gaussian2DLayer, Gaussian3DSet, write_png
from .trainer import binarize_mask


def render_novel_views(g3d: Gaussian3DSet, cams: list[Camera], background=(0.0, 0.0, 0.0)):
    """Static-branch renders only; transient layers belong to training views."""
    return [render3d(g3d, cam, background, cache=False).color for cam in cams]


def write_views(images, out_dir, prefix="view"):
    out = Path(out_dir)
    paths = []
    for k, img in enumerate(images):
        p = out / f"{prefix}_{k:03d}.png"
        write_png(p, img)
        paths.append(p)
    return paths


def decompose_view(g3d: Gaussian3DSet, layers: list[Gaussian2DLayer], cams: list[Camera], frame_index: int,
                   epsilon: float = 0.1, background=(0.0, 0.0, 0.0)) -> dict[str, np.ndarray]:
    """Static, transient, continuous mask, binarized mask and composed image of a training view."""
    if not 0 <= frame_index < len(cams):
        raise IndexError(f"frame index {frame_index} out of range for {len(cams)} training views")
    cam = cams[frame_index]
    static = render3d(g3d, cam, background, cache=False).color
    layer = layers[frame_index] if frame_index < len(layers) else Gaussian2DLayer.empty(frame_index)
    out2d = rasterize2d_forward(layer, cam.width, cam.height, cache=False)
    mask = out2d.mask
    return {"static": static, "transient": out2d.color, "mask": mask,
            "mask_binary": binarize_mask(mask, epsilon).astype(np.float64),
            "composed": compose(static, out2d.color, mask)}


def write_decomposition(parts: dict[str, np.ndarray], out_dir, frame_index: int):
    out = Path(out_dir)
    paths = {}
    for name, img in parts.items():
        paths[name] = out / f"frame_{frame_index:03d}_{name}.png"
        write_png(paths[name], img)
    return paths
