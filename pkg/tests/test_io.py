import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_scene
from surfelsplat import io
from surfelsplat.camera import CameraIntrinsics, se3_exp

floats = st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=True)


def assert_scenes_equal(a, b):
    for name in ("colors", "centers", "scales", "normals", "opacities"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_ply_round_trip(tmp_path, rng):
    scene, _ = random_scene(rng, n=30)
    io.write_ply(tmp_path / "s.ply", scene)
    back = io.read_ply(tmp_path / "s.ply")
    assert_scenes_equal(scene, back)
    assert back.prior_normals is None


def test_ply_round_trip_with_priors(tmp_path, rng):
    scene, _ = random_scene(rng, n=5)
    scene = scene.replace(prior_normals=scene.normals[::-1].copy())
    io.write_ply(tmp_path / "s.ply", scene)
    np.testing.assert_array_equal(io.read_ply(tmp_path / "s.ply").prior_normals,
                                  scene.prior_normals)


def test_ascii_ply_with_byte_colors(tmp_path):
    text = "\n".join([
        "ply", "format ascii 1.0", "comment made by hand", "element vertex 2",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        "property float opacity", "property float sx", "property float sy",
        "element face 0", "property list uchar int vertex_indices", "end_header",
        "0 0 2 0 0 -1 255 0 51 0.5 0.1 0.2",
        "1 1 3 0 0 1 0 255 0 0.9 0.3 0.3", ""])
    (tmp_path / "a.ply").write_text(text)
    s = io.read_ply(tmp_path / "a.ply")
    assert len(s) == 2
    np.testing.assert_allclose(s.colors[0], [1.0, 0.0, 0.2])
    np.testing.assert_allclose(s.scales[1], [0.3, 0.3])


def test_not_a_ply(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"hello\n")
    with pytest.raises(io.FormatError):
        io.read_ply(tmp_path / "x.ply")


@settings(max_examples=20)
@given(arrays(np.float32, st.tuples(st.integers(1, 7), st.integers(1, 7), st.just(3)),
              elements=st.floats(-1e3, 1e3, width=32)))
def test_pfm_color_round_trip(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("pfm") / "c.pfm"
    io.write_pfm(p, img)
    np.testing.assert_array_equal(io.read_pfm(p), img)


def test_pfm_gray_round_trip_and_orientation(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 4)
    io.write_pfm(tmp_path / "g.pfm", img)
    raw = (tmp_path / "g.pfm").read_bytes()
    # rows are stored bottom to top
    assert np.frombuffer(raw[-16:], "<f4")[0] == 0.0
    np.testing.assert_array_equal(io.read_pfm(tmp_path / "g.pfm"), img)


def test_pfm_rejects_bad_shape(tmp_path):
    with pytest.raises(io.FormatError):
        io.write_pfm(tmp_path / "x.pfm", np.zeros((2, 2, 2)))


@settings(max_examples=40)
@given(st.floats(1e-3, 1e5), st.floats(1e-3, 1e5), floats, floats,
       arrays(np.float64, 6, elements=st.floats(-3, 3)))
def test_camera_json_round_trip(tmp_path_factory, fx, fy, cx, cy, xi):
    K = CameraIntrinsics(fx, fy, cx, cy, 640, 480, 0.05, 250.0)
    pose = se3_exp(xi)
    p = tmp_path_factory.mktemp("cam") / "c.json"
    io.write_camera(p, K, pose)
    K2, pose2 = io.read_camera(p)
    assert K2 == K
    np.testing.assert_array_equal(pose2.rotation, pose.rotation)
    np.testing.assert_array_equal(pose2.translation, pose.translation)
    json.loads(p.read_text())


def test_camera_without_pose(tmp_path):
    K = CameraIntrinsics(10, 10, 5, 5, 10, 10)
    io.write_camera(tmp_path / "k.json", K)
    assert io.read_camera(tmp_path / "k.json") == (K, None)


def test_png_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 6, 3)) / 255.0
    io.write_png(tmp_path / "x.png", img)
    np.testing.assert_allclose(io.read_image(tmp_path / "x.png"), img, atol=1e-12)


def test_config_loading(tmp_path):
    (tmp_path / "c.toml").write_text('seed = 3\n[schedule]\nn_iters = 50\n')
    (tmp_path / "c.json").write_text('{"seed": 3, "schedule": {"n_iters": 50}}')
    assert io.load_config(tmp_path / "c.toml") == io.load_config(tmp_path / "c.json")


def test_jsonl_append(tmp_path):
    io.append_jsonl(tmp_path / "t.jsonl", {"a": 1})
    io.append_jsonl(tmp_path / "t.jsonl", {"a": 2})
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert [json.loads(l)["a"] for l in lines] == [1, 2]
