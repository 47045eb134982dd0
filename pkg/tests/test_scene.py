import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridgs.scene import (
    CKPT_VERSION, SH_C0, Camera, DatasetError, Gaussian2DLayer, Gaussian3DSet, ValidationError, export_ply,
    import_ply, load_checkpoint, load_dataset, logit, look_at, normalize_quaternions, quaternion_rotation_backward,
    quaternion_to_rotation, read_png, save_checkpoint, sigmoid, write_png,
)
from hybridgs.synth import SynthSpec, synth_scene

from .oracles import quat_to_matrix

finite = st.floats(-5, 5, allow_nan=False)


def random_set(rng, n):
    return Gaussian3DSet(positions=rng.normal(size=(n, 3)), log_scales=rng.normal(-2, 0.5, (n, 3)),
                         rotations=normalize_quaternions(rng.normal(size=(n, 4))),
                         opacity_logits=rng.normal(size=n), colors=rng.uniform(0, 1, (n, 3)))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    synth_scene(SynthSpec(n_views=4, n_test_views=2, n_static_blobs=40, image_size=(24, 20)), root)
    return root


# activations and rotations


@given(arrays(np.float64, 20, elements=st.floats(-20, 20)))
def test_sigmoid_logit_roundtrip(x):
    assert np.allclose(logit(sigmoid(x)), x, atol=1e-6, rtol=1e-6)


def test_sigmoid_logit_known_values():
    assert sigmoid(0.0) == 0.5
    assert np.isclose(logit(0.1), np.log(0.1 / 0.9))


@settings(max_examples=50)
@given(arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3))
def test_rotation_is_proper_orthonormal(q):
    R = quaternion_to_rotation(q[None])[0]
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    assert np.allclose(R, quat_to_matrix(q), atol=1e-12)


def test_rotation_known_quarter_turn():
    c = np.cos(np.pi / 4)
    R = quaternion_to_rotation(np.array([[c, 0, 0, c]]))[0]
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
    assert np.array_equal(quaternion_to_rotation(np.array([[1.0, 0, 0, 0]]))[0], np.eye(3))


def test_rotation_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(5, 4))
    G = rng.normal(size=(5, 3, 3))
    analytic = quaternion_rotation_backward(q, G)
    fd = np.zeros_like(q)
    h = 1e-6
    for i in np.ndindex(q.shape):
        qp, qm = q.copy(), q.copy()
        qp[i] += h
        qm[i] -= h
        fd[i] = np.sum(G * (quaternion_to_rotation(qp) - quaternion_to_rotation(qm))) / (2 * h)
    assert np.max(np.abs(analytic - fd)) < 1e-6


# cameras


def test_look_at_places_target_on_principal_point():
    M = look_at([3.0, -2.0, 1.0], [0.0, 0.5, 0.2])
    cam = Camera(50, 50, 32, 24, M, 64, 48)
    cam.validate()
    assert np.allclose(cam.center, [3.0, -2.0, 1.0])
    p = cam.world_to_cam_points(np.array([[0.0, 0.5, 0.2]]))[0]
    assert p[2] > 0 and np.allclose(p[:2], 0, atol=1e-12)
    # world up maps to image up (negative v under the OpenCV convention)
    up = cam.world_to_cam_points(np.array([[0.0, 0.5, 1.2]]))[0]
    assert up[1] < 0


@pytest.mark.parametrize("mutate, msg", [
    (lambda M: M.__setitem__((0, 0), 1.1), "orthonormal"),
    (lambda M: M.__setitem__((slice(0, 3), 0), -M[:3, 0]), "determinant"),
    (lambda M: M.__setitem__((3, 0), 1.0), "last row"),
])
def test_camera_validation_errors(mutate, msg):
    M = np.eye(4)
    mutate(M)
    with pytest.raises(ValidationError, match=msg):
        Camera(10, 10, 5, 5, M, 10, 10).validate()


def test_camera_near_far_and_size_validation():
    with pytest.raises(ValidationError, match="near"):
        Camera(10, 10, 5, 5, np.eye(4), 10, 10, near=1.0, far=0.5).validate()
    with pytest.raises(ValidationError, match="size"):
        Camera(10, 10, 5, 5, np.eye(4), 0, 10).validate()


def test_camera_json_roundtrip_and_default_clip_planes():
    cam = Camera(11.5, 12.5, 4.0, 5.0, look_at([1, 2, 3], [0, 0, 0]), 9, 7, near=0.2, far=9.0)
    again = Camera.from_json(json.loads(json.dumps(cam.to_json("x.png"))))
    assert np.array_equal(again.world_to_camera, cam.world_to_camera)
    assert (again.fx, again.fy, again.cx, again.cy, again.width, again.height, again.near, again.far) == \
        (11.5, 12.5, 4.0, 5.0, 9, 7, 0.2, 9.0)
    d = cam.to_json()
    del d["near"], d["far"]
    assert (Camera.from_json(d).near, Camera.from_json(d).far) == (0.01, 100.0)


# dataset loading


def test_load_dataset_returns_frames_in_json_order(tiny_dataset):
    frames = load_dataset(tiny_dataset)
    names = [e["file"] for e in json.loads((tiny_dataset / "cameras.json").read_text())["frames"]]
    assert [f.name for f in frames] == names
    assert len(frames) == 4
    for f in frames:
        assert f.image.shape == (20, 24, 3)
        assert f.gt_mask.shape == (20, 24)


def test_load_dataset_pixels_are_bytes_over_255(tiny_dataset):
    from PIL import Image
    frames = load_dataset(tiny_dataset)
    raw = np.asarray(Image.open(tiny_dataset / frames[0].name))
    assert np.array_equal(frames[0].image, raw / 255.0)


def test_load_dataset_is_deterministic(tiny_dataset):
    a, b = load_dataset(tiny_dataset), load_dataset(tiny_dataset)
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.camera.world_to_camera, y.camera.world_to_camera)
               for x, y in zip(a, b))


def _edit_cameras(root, fn):
    path = root / "cameras.json"
    doc = json.loads(path.read_text())
    fn(doc["frames"])
    path.write_text(json.dumps(doc))


def test_missing_png_names_the_file(tiny_dataset, tmp_path):
    import shutil
    root = tmp_path / "ds"
    shutil.copytree(tiny_dataset, root)
    _edit_cameras(root, lambda fr: fr[2].__setitem__("file", "images/nope.png"))
    with pytest.raises(FileNotFoundError, match="nope.png"):
        load_dataset(root)


def test_reflection_rotation_is_rejected_with_entry(tiny_dataset, tmp_path):
    import shutil
    root = tmp_path / "ds"
    shutil.copytree(tiny_dataset, root)

    def flip(frames):
        M = np.asarray(frames[1]["world_to_camera"]).reshape(4, 4)
        M[:3, 0] *= -1
        frames[1]["world_to_camera"] = M.ravel().tolist()

    _edit_cameras(root, flip)
    with pytest.raises(DatasetError, match="entry 1"):
        load_dataset(root)


def test_dimension_mismatch_is_rejected(tiny_dataset, tmp_path):
    import shutil
    root = tmp_path / "ds"
    shutil.copytree(tiny_dataset, root)
    _edit_cameras(root, lambda fr: fr[0].__setitem__("w", 30))
    with pytest.raises(DatasetError, match="30x20"):
        load_dataset(root)


def test_png_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    write_png(tmp_path / "a.png", img)
    assert np.array_equal(read_png(tmp_path / "a.png"), img)


# PLY


def test_ply_gray_maps_to_zero_sh_dc(tmp_path):
    g = Gaussian3DSet(np.zeros((1, 3)), np.zeros((1, 3)), [[1, 0, 0, 0]], [0.0], [[0.5, 0.5, 0.5]])
    export_ply(g, tmp_path / "g.ply")
    data = (tmp_path / "g.ply").read_bytes()
    body = data[data.index(b"end_header\n") + len(b"end_header\n"):]
    row = np.frombuffer(body, dtype="<f8")
    assert np.array_equal(row[11:14], [0.0, 0.0, 0.0])


def test_ply_roundtrip_is_bit_exact(tmp_path):
    g = random_set(np.random.default_rng(1), 100)
    export_ply(g, tmp_path / "g.ply")
    back = import_ply(tmp_path / "g.ply")
    for name in Gaussian3DSet.PARAM_NAMES:
        assert np.array_equal(getattr(back, name), getattr(g, name)), name


def test_ply_sh_dc_convention(tmp_path):
    g = random_set(np.random.default_rng(2), 3)
    export_ply(g, tmp_path / "g.ply")
    text = (tmp_path / "g.ply").read_bytes()
    body = np.frombuffer(text[text.index(b"end_header\n") + 11:], dtype="<f8").reshape(3, -1)
    assert np.allclose(body[:, 11:14], (g.colors - 0.5) / SH_C0)
    assert SH_C0 == 0.28209479177387814


def test_ply_empty_set(tmp_path):
    export_ply(Gaussian3DSet.empty(), tmp_path / "e.ply")
    assert b"element vertex 0" in (tmp_path / "e.ply").read_bytes()
    assert len(import_ply(tmp_path / "e.ply")) == 0


def test_ply_without_color_properties_uses_sh(tmp_path):
    # viewers' files only carry f_dc; decoding goes through the SH-DC map
    g = random_set(np.random.default_rng(4), 4)
    f_dc = (g.colors - 0.5) / SH_C0
    data = np.concatenate([g.positions, g.opacity_logits[:, None], g.log_scales, g.rotations, f_dc], 1)
    props = ["x", "y", "z", "opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)] + \
        [f"f_dc_{i}" for i in range(3)]
    head = "ply\nformat binary_little_endian 1.0\nelement vertex 4\n" + \
        "".join(f"property float {p}\n" for p in props) + "end_header\n"
    (tmp_path / "v.ply").write_bytes(head.encode() + data.astype("<f4").tobytes())
    back = import_ply(tmp_path / "v.ply")
    assert np.allclose(back.colors, g.colors, atol=1e-6)


# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    g = random_set(rng, 7)
    layers = [Gaussian2DLayer(k, rng.uniform(0, 9, (3, 2)), rng.normal(size=(3, 2)), rng.normal(size=3),
                              rng.uniform(size=(3, 3)), rng.normal(size=3)) for k in range(2)]
    save_checkpoint(tmp_path / "c.ckpt", g, layers, {"stage": "done"})
    g2, l2, header = load_checkpoint(tmp_path / "c.ckpt")
    assert header["version"] == CKPT_VERSION and header["stage"] == "done"
    assert header["counts"] == {"n3d": 7, "layers": [3, 3]}
    for name in Gaussian3DSet.PARAM_NAMES:
        assert np.array_equal(getattr(g2, name), getattr(g, name).astype(np.float32))
    for a, b in zip(layers, l2):
        assert a.image_index == b.image_index
        assert np.array_equal(b.centers, a.centers.astype(np.float32))


def test_checkpoint_rejects_wrong_version(tmp_path):
    p = tmp_path / "c.ckpt"
    save_checkpoint(p, Gaussian3DSet.empty(), [])
    raw = p.read_bytes().replace(CKPT_VERSION.encode(), b"other-v9")
    p.write_bytes(raw)
    with pytest.raises(ValidationError, match="version"):
        load_checkpoint(p)


def test_gaussian_set_validate():
    g = random_set(np.random.default_rng(6), 3)
    g.validate()
    g.rotations[1] *= 2
    with pytest.raises(ValidationError, match="unit"):
        g.validate()
    g = random_set(np.random.default_rng(6), 3)
    g.positions[0, 0] = np.nan
    with pytest.raises(ValidationError, match="non-finite"):
        g.validate()


def test_layer_covariance_matches_rotation_scale():
    layer = Gaussian2DLayer(0, [[1.0, 2.0]], [[np.log(2.0), np.log(0.5)]], [np.pi / 2], [[1, 1, 1]], [0.0])
    assert np.allclose(layer.covariances()[0], np.diag([0.25, 4.0]))
