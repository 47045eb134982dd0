"""Persistent scene types, activations, dataset ingestion and file formats.

Conventions
-----------
* Cameras are OpenCV-style pinholes: +x right, +y down, +z forward.  A pixel
  with integer index ``(u, v)`` has its center at ``(u + 0.5, v + 0.5)``.
* Images are linear RGB in [0, 1] (8-bit value / 255, no gamma).
* Colors are view-independent RGB (degree-0 SH) stored post-activation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SH_C0 = 0.28209479177387814
CKPT_VERSION = "hybridgs-ckpt-v1"
DEFAULT_NEAR = 0.01
DEFAULT_FAR = 100.0


class ValidationError(ValueError):
    """Input violates a declared invariant (bad camera, bad config...)."""


class DatasetError(ValidationError):
    """A dataset directory could not be loaded."""


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def normalize_quaternions(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quaternion_to_rotation(q):
    """Rotation matrices (N,3,3) from (w, x, y, z) quaternions (N,4), normalizing first."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quaternion_rotation_backward(q, dL_dR):
    """Pull a gradient w.r.t. R(q / |q|) back onto the raw quaternion."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    G = dL_dR
    g_w = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2]
               - y * G[:, 2, 0] + x * G[:, 2, 1])
    g_x = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
               - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    g_y = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
               + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    g_z = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
               - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    g_n = np.stack([g_w, g_x, g_y, g_z], axis=-1)
    # through q / |q|
    return (g_n - qn * np.sum(qn * g_n, axis=-1, keepdims=True)) / norm


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Gaussian3DSet:
    """The static scene.  Raw parameters; activated views are properties."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "colors")

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self):
        return Gaussian3DSet(**{k: v.copy() for k, v in self.params().items()})

    def subset(self, idx):
        return Gaussian3DSet(**{k: v[idx] for k, v in self.params().items()})

    def validate(self):
        n = len(self)
        for name, arr in self.params().items():
            if len(arr) != n:
                raise ValidationError(f"Gaussian3DSet.{name} has {len(arr)} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"Gaussian3DSet.{name} contains non-finite values")
        norms = np.linalg.norm(self.rotations, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValidationError("Gaussian3DSet.rotations are not unit quaternions")


@dataclass
class Gaussian2DLayer:
    """Per-image transient layer: an unordered set of pixel-space Gaussians."""

    image_index: int
    centers: np.ndarray
    log_scales: np.ndarray
    rotation_angles: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    PARAM_NAMES = ("centers", "log_scales", "rotation_angles", "colors", "opacity_logits")

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        n = len(self.centers)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        self.rotation_angles = np.asarray(self.rotation_angles, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)

    def __len__(self):
        return len(self.centers)

    @classmethod
    def empty(cls, image_index=0):
        return cls(image_index, np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)), np.zeros(0))

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def covariances(self):
        c, s = np.cos(self.rotation_angles), np.sin(self.rotation_angles)
        R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        S2 = self.scales ** 2
        return np.einsum("nij,nj,nkj->nik", R, S2, R)

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self):
        return Gaussian2DLayer(self.image_index, **{k: v.copy() for k, v in self.params().items()})


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        object.__setattr__(self, "world_to_camera", np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def R(self):
        return self.world_to_camera[:3, :3]

    @property
    def t(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def validate(self, name="camera"):
        R = self.R
        if not np.all(np.isfinite(self.world_to_camera)):
            raise ValidationError(f"{name}: world_to_camera contains non-finite values")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ValidationError(f"{name}: rotation block is not orthonormal")
        if np.linalg.det(R) < 0:
            raise ValidationError(f"{name}: rotation block has determinant -1 (reflection)")
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1]):
            raise ValidationError(f"{name}: last row of world_to_camera must be (0, 0, 0, 1)")
        if not (0 < self.near < self.far):
            raise ValidationError(f"{name}: need 0 < near < far, got near={self.near}, far={self.far}")
        if self.width < 1 or self.height < 1:
            raise ValidationError(f"{name}: image size must be at least 1x1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"{name}: focal lengths must be positive")

    def world_to_cam_points(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def to_json(self, file: str | None = None) -> dict:
        d = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "w": self.width, "h": self.height,
             "world_to_camera": [float(v) for v in self.world_to_camera.reshape(-1)],
             "near": self.near, "far": self.far}
        if file is not None:
            d = {"file": file, **d}
        return d

    @classmethod
    def from_json(cls, d: dict):
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
                   width=int(d["w"]), height=int(d["h"]),
                   near=float(d.get("near", DEFAULT_NEAR)), far=float(d.get("far", DEFAULT_FAR)))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-to-camera matrix for an OpenCV camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray
    gt_mask: np.ndarray | None = None
    name: str = ""


# ---------------------------------------------------------------------------
# images


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.uint8)


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(image)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


# ---------------------------------------------------------------------------
# dataset


def load_cameras(json_path) -> list[tuple[str, Camera, dict]]:
    json_path = Path(json_path)
    if not json_path.is_file():
        raise FileNotFoundError(f"missing camera file: {json_path}")
    with open(json_path) as f:
        doc = json.load(f)
    if "frames" not in doc:
        raise DatasetError(f"{json_path}: no 'frames' list")
    out = []
    for i, entry in enumerate(doc["frames"]):
        name = entry.get("file", f"frame {i}")
        try:
            cam = Camera.from_json(entry)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{json_path}: entry {i} ({name}) is malformed: {exc}") from exc
        try:
            cam.validate(name=f"entry {i} ({name})")
        except ValidationError as exc:
            raise DatasetError(f"{json_path}: {exc}") from exc
        out.append((name, cam, entry))
    return out


def load_dataset(root_path) -> list[Frame]:
    """Load ``cameras.json`` plus the referenced PNGs; frames keep JSON order."""
    root = Path(root_path)
    frames = []
    for i, (name, cam, entry) in enumerate(load_cameras(root / "cameras.json")):
        if "file" not in entry:
            raise DatasetError(f"entry {i} has no 'file' field")
        img_path = root / entry["file"]
        if not img_path.is_file():
            raise FileNotFoundError(f"entry {i}: image file not found: {entry['file']}")
        image = read_png(img_path)
        if image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"entry {i} ({entry['file']}): image is {image.shape[1]}x{image.shape[0]}, "
                f"cameras.json says {cam.width}x{cam.height}")
        mask = None
        if "mask" in entry:
            mask_path = root / entry["mask"]
            if not mask_path.is_file():
                raise FileNotFoundError(f"entry {i}: mask file not found: {entry['mask']}")
            mask = read_mask_png(mask_path)
            if mask.shape != (cam.height, cam.width):
                raise DatasetError(f"entry {i} ({entry['mask']}): mask size does not match camera")
        frames.append(Frame(camera=cam, image=image, gt_mask=mask, name=entry["file"]))
    return frames


def load_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Seed points from ``points3d.json``: ``{"points": [[x,y,z],...], "colors": [[r,g,b],...]?}``."""
    with open(path) as f:
        doc = json.load(f)
    pts = np.asarray(doc["points"], dtype=np.float64).reshape(-1, 3)
    cols = doc.get("colors")
    if cols is not None:
        cols = np.asarray(cols, dtype=np.float64).reshape(-1, 3)
    return pts, cols


def save_points(path, points, colors=None):
    doc = {"points": np.asarray(points).tolist()}
    if colors is not None:
        doc["colors"] = np.asarray(colors).tolist()
    with open(path, "w") as f:
        json.dump(doc, f)


# ---------------------------------------------------------------------------
# PLY

_PLY_PROPS = (["x", "y", "z", "opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
              + [f"f_dc_{i}" for i in range(3)] + [f"color_{i}" for i in range(3)])


def export_ply(g3d: Gaussian3DSet, path):
    """Binary little-endian PLY in the layout community splat viewers read.

    ``color_*`` carries the stored color verbatim so import is bit-exact; the
    SH-DC conversion alone is not invertible in floating point.
    """
    g3d.validate()
    n = len(g3d)
    f_dc = (g3d.colors - 0.5) / SH_C0
    data = np.concatenate([g3d.positions, g3d.opacity_logits[:, None], g3d.log_scales, g3d.rotations,
                           f_dc, g3d.colors], axis=1).astype("<f8")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property double {p}" for p in _PLY_PROPS]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(data).tobytes())


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4"}


def import_ply(path) -> Gaussian3DSet:
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValidationError(f"{path}: not a PLY file")
        props, n = [], None
        while True:
            line = f.readline()
            if not line:
                raise ValidationError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "binary_little_endian":
                raise ValidationError(f"{path}: only binary_little_endian PLY is supported")
            if tok[0] == "element" and tok[1] == "vertex":
                n = int(tok[2])
            elif tok[0] == "property":
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        dtype = np.dtype(props)
        data = np.frombuffer(f.read(dtype.itemsize * n), dtype=dtype, count=n)
    col = lambda name: data[name].astype(np.float64)  # noqa: E731
    names = data.dtype.names
    if "color_0" in names:
        colors = np.stack([col(f"color_{i}") for i in range(3)], -1)
    else:
        colors = np.stack([col(f"f_dc_{i}") for i in range(3)], -1) * SH_C0 + 0.5
    return Gaussian3DSet(
        positions=np.stack([col("x"), col("y"), col("z")], -1),
        log_scales=np.stack([col(f"scale_{i}") for i in range(3)], -1),
        rotations=np.stack([col(f"rot_{i}") for i in range(4)], -1),
        opacity_logits=col("opacity"),
        colors=colors,
    )


# ---------------------------------------------------------------------------
# checkpoint: one JSON header line, then raw little-endian float32 arrays


def save_checkpoint(path, g3d: Gaussian3DSet, layers: list[Gaussian2DLayer], meta: dict | None = None):
    arrays = []
    for name in Gaussian3DSet.PARAM_NAMES:
        arrays.append((f"g3d.{name}", getattr(g3d, name)))
    for k, layer in enumerate(layers):
        for name in Gaussian2DLayer.PARAM_NAMES:
            arrays.append((f"layer{k}.{name}", getattr(layer, name)))
    header = {
        "version": CKPT_VERSION,
        "counts": {"n3d": len(g3d), "layers": [len(layer) for layer in layers]},
        "layer_image_index": [int(layer.image_index) for layer in layers],
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        **(meta or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[Gaussian3DSet, list[Gaussian2DLayer], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("version") != CKPT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        arrays = {}
        for spec in header["arrays"]:
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValidationError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(spec["shape"])
    g3d = Gaussian3DSet(**{name: arrays[f"g3d.{name}"] for name in Gaussian3DSet.PARAM_NAMES})
    layers = []
    for k, idx in enumerate(header["layer_image_index"]):
        layers.append(Gaussian2DLayer(idx, **{name: arrays[f"layer{k}.{name}"] for name in Gaussian2DLayer.PARAM_NAMES}))
    return g3d, layers, header

