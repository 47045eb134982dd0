"""Central finite-difference checks of the analytic gradients on small random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import compose, compose_backward, masked_loss_3d, photometric_loss
from .raster2d import rasterize2d_backward, rasterize2d_forward
from .raster3d import RasterSettings, rasterize3d_backward, render3d
from .scene import Camera, Gaussian2DLayer, Gaussian3DSet, look_at, normalize_quaternions

MODULES = ("raster3d", "raster2d", "compose")
FD_STEP = 1e-4


@dataclass
class GradcheckResult:
    module: str
    instance: int
    errors: dict[str, float]

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0


def relative_error(analytic, fd):
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-8))


def fd_gradient(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def random_scene3d(rng: np.random.Generator, n=10, size=16):
    eye = rng.normal(0, 0.3, 3) + [0, 0, -3.0]
    cam = Camera(fx=size * rng.uniform(1.1, 1.5), fy=size * rng.uniform(1.1, 1.5),
                 cx=size / 2 + rng.uniform(-1, 1), cy=size / 2 + rng.uniform(-1, 1),
                 world_to_camera=look_at(eye, rng.normal(0, 0.1, 3), up=(0, -1, 0)), width=size, height=size)
    g3d = Gaussian3DSet(
        positions=np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(-0.8, 0.8, n)],
        log_scales=np.log(rng.uniform(0.05, 0.3, (n, 3))),
        rotations=normalize_quaternions(rng.normal(size=(n, 4))),
        opacity_logits=rng.normal(0.0, 1.0, n), colors=rng.uniform(0, 1, (n, 3)))
    return g3d, cam, tuple(rng.uniform(0, 1, 3))


def random_layer(rng: np.random.Generator, n=10, size=16):
    return Gaussian2DLayer(0, rng.uniform(0, size, (n, 2)), np.log(rng.uniform(0.8, 4.0, (n, 2))),
                           rng.uniform(0, 2 * np.pi, n), rng.uniform(0, 1, (n, 3)), rng.normal(-1.0, 1.0, n))


def check_raster3d(rng: np.random.Generator, n=10, size=16, h=FD_STEP):
    # reference settings: no skip threshold and no early stop, so the image is smooth in the parameters
    settings = RasterSettings.reference()
    g3d, cam, bg = random_scene3d(rng, n, size)
    w_c = rng.normal(size=(size, size, 3))
    w_a = rng.normal(size=(size, size))

    def loss():
        out = render3d(g3d, cam, bg, settings, cache=False)
        return float(np.sum(out.color * w_c) + np.sum(out.accum_alpha * w_a))

    grads = rasterize3d_backward(render3d(g3d, cam, bg, settings), w_c, w_a)
    return {name: relative_error(grads[name], fd_gradient(loss, getattr(g3d, name), h))
            for name in Gaussian3DSet.PARAM_NAMES}


def check_raster2d(rng: np.random.Generator, n=10, size=16, h=FD_STEP):
    # resample until no raw value sits within 1e-3 of a clamp kink
    while True:
        layer = random_layer(rng, n, size)
        ref = rasterize2d_forward(layer, size, size, cache=False, weight_floor=0.0)
        raws = np.concatenate([ref.raw_color.ravel(), ref.raw_mask.ravel()])
        if np.min(np.abs(raws - 1.0)) > 1e-3:
            break
    w_c = rng.normal(size=(size, size, 3))
    w_m = rng.normal(size=(size, size))

    def loss():
        out = rasterize2d_forward(layer, size, size, cache=False, weight_floor=0.0)
        return float(np.sum(out.color * w_c) + np.sum(out.mask * w_m))

    grads = rasterize2d_backward(rasterize2d_forward(layer, size, size, weight_floor=0.0), w_c, w_m)
    return {name: relative_error(grads[name], fd_gradient(loss, getattr(layer, name), h))
            for name in Gaussian2DLayer.PARAM_NAMES}


def check_compose(rng: np.random.Generator, size=12, h=FD_STEP):
    """compose -> photometric / masked loss, w.r.t. static image, transient image and mask."""
    weight = float(rng.choice([0.2, rng.uniform(0, 1)]))
    i_s = rng.uniform(0.05, 0.95, (size, size, 3))
    i_t = rng.uniform(0.05, 0.95, (size, size, 3))
    m_t = rng.uniform(0.0, 1.0, (size, size))
    # keep the target at least 1e-2 away from the composite so the L1 kink is never crossed
    comp = compose(i_s, i_t, m_t)
    gt = np.clip(comp + rng.choice([-1, 1], comp.shape) * rng.uniform(0.01, 0.3, comp.shape), 0, 1)
    gt = np.where(np.abs(gt - comp) < 1e-2, comp + np.where(comp > 0.5, -0.05, 0.05), gt)
    binary = (rng.uniform(size=(size, size)) < 0.3).astype(np.float64)
    errors = {}
    for tag, lossfn in (("photometric", lambda p, g=True: photometric_loss(p, gt, weight, g)),
                        ("masked", lambda p, g=True: masked_loss_3d(p, gt, binary, weight, g))):
        lb = lossfn(compose(i_s, i_t, m_t))
        d_s, d_t, d_m = compose_backward(lb.grad, i_s, i_t, m_t)
        f = lambda: lossfn(compose(i_s, i_t, m_t), False).total  # noqa: E731
        errors[f"{tag}/i_s"] = relative_error(d_s, fd_gradient(f, i_s, h))
        errors[f"{tag}/i_t"] = relative_error(d_t, fd_gradient(f, i_t, h))
        errors[f"{tag}/m_t"] = relative_error(d_m, fd_gradient(f, m_t, h))
    return errors


_CHECKS = {"raster3d": check_raster3d, "raster2d": check_raster2d, "compose": check_compose}


def run(module: str, n_instances: int = 20, seed: int = 0) -> list[GradcheckResult]:
    if module not in _CHECKS:
        raise ValueError(f"unknown gradcheck module '{module}', expected one of {MODULES}")
    rng = np.random.default_rng(seed)
    return [GradcheckResult(module, k, _CHECKS[module](rng)) for k in range(n_instances)]
