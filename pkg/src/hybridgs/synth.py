"""Synthetic scenes with planted transients and exact ground-truth masks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .raster3d import render3d
from .scene import Camera, Frame, Gaussian3DSet, ValidationError, look_at, logit, save_points, write_png


@dataclass
class TransientSpec:
    """Axis-aligned opaque square; ``center`` and ``size`` are fractions of the image width/height."""
    center: tuple[float, float]
    size: float
    rgb: tuple[float, float, float]


@dataclass
class SynthSpec:
    n_views: int = 8
    n_test_views: int = 4
    image_size: tuple[int, int] = (64, 64)   # (W, H)
    n_static_blobs: int = 200
    transient_size: float = 0.31             # used when transient_per_view is None
    transient_per_view: list | None = None   # None: one random square per view
    orbit_radius: float = 4.0
    orbit_elevation_deg: float = 20.0
    orbit_span_deg: float = 40.0
    fov_deg: float = 60.0
    background: tuple[float, float, float] = (0.4, 0.4, 0.4)
    seed_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.background = tuple(float(v) for v in self.background)
        if self.transient_per_view is not None:
            self.transient_per_view = [t if isinstance(t, TransientSpec) else
                                       TransientSpec(tuple(t["center"]), float(t["size"]), tuple(t["rgb"]))
                                       for t in self.transient_per_view]
        self.validate()

    def validate(self):
        if self.n_views < 1 or self.n_test_views < 0:
            raise ValidationError("need n_views >= 1 and n_test_views >= 0")
        if min(self.image_size) < 16:
            raise ValidationError(f"image_size must be at least 16x16, got {self.image_size}")
        if self.n_static_blobs < 1:
            raise ValidationError("n_static_blobs must be >= 1")
        if not 0.0 <= self.transient_size <= 1.0:
            raise ValidationError("transient_size must lie in [0, 1]")
        if self.transient_per_view is not None and len(self.transient_per_view) != self.n_views:
            raise ValidationError("transient_per_view needs exactly one entry per training view")
        if self.orbit_radius <= 0 or not 0 < self.fov_deg < 180:
            raise ValidationError("orbit_radius must be positive and fov_deg in (0, 180)")
        if len(self.background) != 3 or not all(0.0 <= v <= 1.0 for v in self.background):
            raise ValidationError(f"background must be an RGB triple in [0, 1], got {self.background}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class SynthScene:
    spec: SynthSpec
    static: Gaussian3DSet
    seed_points: np.ndarray
    train: list[Frame] = field(default_factory=list)
    clean: list[np.ndarray] = field(default_factory=list)
    test: list[Frame] = field(default_factory=list)
    transients: list[TransientSpec] = field(default_factory=list)


TARGET = np.array([0.0, 0.0, 0.4])


def _noisy_quats(rng, n):
    q = rng.normal(0.0, 0.08, (n, 4))
    q[:, 0] += 1.0
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _jittered_grid(rng, n, aspect):
    """``n`` points in the unit square, one per cell of a near-square grid."""
    cols = max(1, int(np.ceil(np.sqrt(n * aspect))))
    rows = int(np.ceil(n / cols))
    cell = np.arange(n)
    return np.stack([(cell % cols + rng.uniform(0.2, 0.8, n)) / cols,
                     (cell // cols + rng.uniform(0.2, 0.8, n)) / rows], 1)


def make_static_scene(n: int, rng: np.random.Generator) -> Gaussian3DSet:
    """Textured floor patch, a back panel and three compact objects.

    Everything sits well inside every orbit view.  Co-visibility gating is by
    center, so a blob whose center leaves a frame while its footprint still
    covers the border would never get a gradient from that frame.
    """
    n_ground = int(round(0.3 * n))
    n_wall = int(round(0.45 * n))
    n_obj = n - n_ground - n_wall

    uv = _jittered_grid(rng, n_ground, 1.4)
    ground = np.stack([-1.4 + 2.8 * uv[:, 0], -1.0 + 2.0 * uv[:, 1], np.zeros(n_ground)], 1)
    ground_ls = np.log([0.22, 0.22, 0.02]) + rng.normal(0.0, 0.1, (n_ground, 3))
    ground_col = np.stack([0.5 + 0.3 * np.sin(1.7 * ground[:, 0]), 0.5 + 0.3 * np.cos(2.3 * ground[:, 1]),
                           0.35 + 0.2 * np.sin(ground[:, 0] + ground[:, 1])], 1)

    uv = _jittered_grid(rng, n_wall, 3.0 / 1.8)
    wall = np.stack([-1.5 + 3.0 * uv[:, 0], np.full(n_wall, 1.1), 0.05 + 1.8 * uv[:, 1]], 1)
    wall_ls = np.log([0.2, 0.02, 0.2]) + rng.normal(0.0, 0.1, (n_wall, 3))
    wall_col = np.stack([0.3 + 0.25 * np.cos(2.2 * wall[:, 2]), 0.4 + 0.3 * np.sin(2.0 * wall[:, 0]),
                         0.6 + 0.3 * np.cos(1.5 * wall[:, 0] - 1.5 * wall[:, 2])], 1)

    obj_centers = np.array([[-0.7, 0.1, 0.35], [0.6, 0.4, 0.45], [0.05, -0.5, 0.3]])
    obj_colors = np.array([[0.85, 0.25, 0.2], [0.2, 0.7, 0.3], [0.95, 0.8, 0.2]])
    which = np.arange(n_obj) % len(obj_centers)
    obj = obj_centers[which] + rng.normal(0.0, 0.15, (n_obj, 3)) * [1, 1, 0.8]
    obj[:, 2] = np.maximum(obj[:, 2], 0.08)
    obj_ls = np.log(0.09) + rng.normal(0.0, 0.2, (n_obj, 3))
    obj_col = obj_colors[which] + rng.normal(0, 0.05, (n_obj, 3))

    return Gaussian3DSet(
        positions=np.concatenate([ground, wall, obj]),
        log_scales=np.concatenate([ground_ls, wall_ls, obj_ls]),
        rotations=np.concatenate([_noisy_quats(rng, n_ground), _noisy_quats(rng, n_wall), _noisy_quats(rng, n_obj)]),
        opacity_logits=np.full(n, logit(0.95)),
        colors=np.clip(np.concatenate([ground_col, wall_col, obj_col]), 0.02, 0.98))


def orbit_camera(spec: SynthSpec, azimuth_deg: float, elevation_deg: float | None = None) -> Camera:
    W, H = spec.image_size
    el = np.deg2rad(spec.orbit_elevation_deg if elevation_deg is None else elevation_deg)
    az = np.deg2rad(azimuth_deg)
    eye = TARGET + spec.orbit_radius * np.array([np.cos(el) * np.sin(az), -np.cos(el) * np.cos(az), np.sin(el)])
    f = 0.5 * W / np.tan(np.deg2rad(spec.fov_deg) / 2)
    return Camera(fx=f, fy=f, cx=W / 2, cy=H / 2, world_to_camera=look_at(eye, TARGET), width=W, height=H)


def train_azimuths(spec: SynthSpec):
    half = spec.orbit_span_deg / 2
    return np.linspace(-half, half, spec.n_views) if spec.n_views > 1 else np.zeros(1)


def test_azimuths(spec: SynthSpec):
    """Held-out azimuths at midpoints between training views, so no test camera coincides with one."""
    az = train_azimuths(spec)
    if spec.n_test_views == 0:
        return np.zeros(0)
    if len(az) == 1:
        return np.linspace(-10, 10, spec.n_test_views) + 5.0
    mids = (az[:-1] + az[1:]) / 2
    pick = np.linspace(0, len(mids) - 1, spec.n_test_views)
    return np.interp(pick, np.arange(len(mids)), mids)


def transient_mask(tr: TransientSpec, width: int, height: int):
    side = int(round(tr.size * width))
    mask = np.zeros((height, width), dtype=np.uint8)
    if side == 0:
        return mask
    x0 = int(round(tr.center[0] * width - side / 2))
    y0 = int(round(tr.center[1] * height - side / 2))
    x0 = min(max(x0, 0), width - side)
    y0 = min(max(y0, 0), height - side)
    mask[y0:y0 + side, x0:x0 + side] = 1
    return mask


PALETTE = [(1.0, 0.0, 1.0), (0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (0.1, 0.1, 0.9),
           (1.0, 0.5, 0.0), (0.9, 0.9, 0.1), (0.9, 0.1, 0.1), (0.4, 1.0, 0.3)]


def random_transients(spec: SynthSpec, rng: np.random.Generator):
    # colors drawn without repeats (cycling past 8 views), so no single color dominates the set
    order = rng.permutation(len(PALETTE))
    out = []
    for k in range(spec.n_views):
        center = tuple(float(v) for v in rng.uniform(0.25, 0.75, 2))
        out.append(TransientSpec(center, spec.transient_size, PALETTE[order[k % len(PALETTE)]]))
    return out


def generate(spec: SynthSpec) -> SynthScene:
    """Build the scene in memory (see ``synth_scene`` for the on-disk form)."""
    rng = np.random.default_rng(spec.seed)
    static = make_static_scene(spec.n_static_blobs, rng)
    seeds = static.positions + rng.normal(0.0, spec.seed_noise, static.positions.shape)
    transients = spec.transient_per_view or random_transients(spec, rng)
    W, H = spec.image_size
    scene = SynthScene(spec=spec, static=static, seed_points=seeds, transients=list(transients))
    for k, az in enumerate(train_azimuths(spec)):
        cam = orbit_camera(spec, az)
        clean = render3d(static, cam, spec.background, cache=False).color
        mask = transient_mask(transients[k], W, H)
        image = clean.copy()
        image[mask == 1] = transients[k].rgb
        scene.clean.append(clean)
        scene.train.append(Frame(camera=cam, image=image, gt_mask=mask, name=f"images/train_{k:03d}.png"))
    for k, az in enumerate(test_azimuths(spec)):
        cam = orbit_camera(spec, az, spec.orbit_elevation_deg + 5.0 * (-1) ** k)
        scene.test.append(Frame(camera=cam, image=render3d(static, cam, spec.background, cache=False).color,
                                name=f"test/images/test_{k:03d}.png"))
    return scene


def synth_scene(spec: SynthSpec, out_dir) -> Path:
    """Write a dataset directory: cameras.json, images/, masks/, clean/, points3d.json and test/.

    Test images are the true static renders; they contain no transient pixels by construction.
    """
    scene = generate(spec)
    out = Path(out_dir)
    (out / "test").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, fr in enumerate(scene.train):
        write_png(out / fr.name, fr.image)
        write_png(out / f"masks/train_{k:03d}.png", fr.gt_mask.astype(np.float64))
        write_png(out / f"clean/train_{k:03d}.png", scene.clean[k])
        entries.append({**fr.camera.to_json(fr.name), "mask": f"masks/train_{k:03d}.png",
                        "clean": f"clean/train_{k:03d}.png"})
    with open(out / "cameras.json", "w") as f:
        json.dump({"frames": entries}, f, indent=1)
    test_entries = []
    for fr in scene.test:
        write_png(out / fr.name, fr.image)
        test_entries.append(fr.camera.to_json(fr.name[len("test/"):]))
    with open(out / "test" / "cameras.json", "w") as f:
        json.dump({"frames": test_entries}, f, indent=1)
    save_points(out / "points3d.json", scene.seed_points)
    with open(out / "synth_spec.json", "w") as f:
        json.dump(spec.to_dict(), f, indent=1)
    return out


def dataset_digest(root) -> str:
    """SHA-256 over every file in a dataset directory (relative path + bytes), for determinism checks."""
    h = hashlib.sha256()
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
