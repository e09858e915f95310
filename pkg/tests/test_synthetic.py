import numpy as np
import pytest

from surfelsplat import io
from surfelsplat.camera import CameraIntrinsics, CameraPose
from surfelsplat.losses import depth_edge_mask, normalized_depth, warp_depth
from surfelsplat.metrics import psnr
from surfelsplat.raster import render
from surfelsplat.synthetic import (
    PRESETS,
    DegenerateSceneError,
    SyntheticSceneSpec,
    generate_synthetic,
    init_surfels_from_depth,
)


# -- init_surfels_from_depth ---------------------------------------------------------

def test_frontal_constant_depth():
    K = CameraIntrinsics(20, 20, 8, 8, 16, 16)
    s = init_surfels_from_depth(np.full((16, 16, 3), 0.3), np.full((16, 16), 2.5), K)
    assert len(s) == 256
    np.testing.assert_allclose(s.normals, np.tile([0, 0, -1.0], (256, 1)), atol=1e-12)
    np.testing.assert_allclose(s.centers[:, 2], 2.5)
    assert np.all(s.opacities == 0.9)
    np.testing.assert_allclose(s.scales[:, 0], s.scales[:, 1])


@pytest.mark.parametrize("W,H", [(16, 16), (15, 9), (7, 12)])
def test_stride_two_count(W, H):
    K = CameraIntrinsics(20, 20, W / 2, H / 2, W, H)
    s = init_surfels_from_depth(np.zeros((H, W, 3)), np.full((H, W), 2.0), K, stride=2)
    assert len(s) == -(-W // 2) * -(-H // 2)


def test_stride_two_skips_invalid_pixels():
    K = CameraIntrinsics(20, 20, 8, 8, 16, 16)
    depth = np.full((16, 16), 2.0)
    depth[0, 0] = 0.0
    depth[2, 4] = np.nan
    s = init_surfels_from_depth(np.zeros((16, 16, 3)), depth, K, stride=2)
    assert len(s) == 64 - 2


def test_all_invalid_depth_raises():
    K = CameraIntrinsics(20, 20, 8, 8, 16, 16)
    with pytest.raises(ValueError):
        init_surfels_from_depth(np.zeros((16, 16, 3)), np.zeros((16, 16)), K)


def test_normals_face_the_camera(two_planes):
    b = two_planes
    s = init_surfels_from_depth(b.I1, normalized_depth(b.D1, b.A1), b.K_truth)
    assert np.all(np.sum(s.normals * s.centers, axis=1) <= 0)


def test_depth_init_self_consistency():
    b = generate_synthetic(SyntheticSceneSpec(preset="two-planes", width=96, height=96,
                                              resolution=96))
    depth = normalized_depth(b.D1, b.A1)
    s = init_surfels_from_depth(b.I1, depth, b.K_truth)
    out = render(s, b.K_truth, CameraPose.identity())
    m = (out.alpha > 0.5) & (depth > 0)
    rel = np.abs(normalized_depth(out.depth, out.alpha)[m] - depth[m]) / depth[m]
    assert rel.mean() < 0.01
    assert psnr(out.color, b.I1) > 30.0


# -- generate_synthetic -----------------------------------------------------------------

def test_identity_pose_gives_identical_views():
    b = generate_synthetic(SyntheticSceneSpec(preset="plane", baseline=(0, 0, 0),
                                              rotation_deg=(0, 0, 0)))
    np.testing.assert_array_equal(b.I1, b.I2)
    np.testing.assert_array_equal(b.D1, b.D2)


def test_same_seed_is_bit_identical():
    spec = SyntheticSceneSpec(preset="sphere-patch", seed=5, depth_noise=0.02, normal_noise=0.05)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for name in ("I1", "I2", "D1", "D2"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    np.testing.assert_array_equal(a.scene_init.centers, b.scene_init.centers)
    c = generate_synthetic(SyntheticSceneSpec(preset="sphere-patch", seed=6))
    assert not np.array_equal(a.I1, c.I1)


def test_truth_renders_reproduce_observations(two_planes):
    b = two_planes
    np.testing.assert_array_equal(render(b.scene_truth, b.K_truth, b.T_truth).color, b.I2)
    np.testing.assert_array_equal(render(b.scene_truth, b.K_truth, CameraPose.identity()).color,
                                  b.I1)


def test_warped_depth_matches_on_covisible_region(two_planes):
    b = two_planes
    n1, n2 = normalized_depth(b.D1, b.A1), normalized_depth(b.D2, b.A2)
    ok2 = (b.A2 > 0.5) & depth_edge_mask(n2)
    w = warp_depth(n2, b.K_truth, b.T_truth, ok2)
    m = w.mask & (b.A1 > 0.5) & depth_edge_mask(n1)
    assert m.mean() > 0.5
    assert np.mean(np.abs(w.depth[m] - n1[m]) / n1[m]) < 0.01


@pytest.mark.parametrize("preset", PRESETS)
@pytest.mark.parametrize("texture", ["checker", "perlin"])
def test_every_preset_builds(preset, texture):
    b = generate_synthetic(SyntheticSceneSpec(preset=preset, texture=texture, width=24,
                                              height=20, resolution=24))
    assert b.I1.shape == (20, 24, 3) and 0 < b.overlap <= 1
    assert (b.A1 > 0.5).mean() > 0.9
    b.scene_truth.validate()


def test_image_texture(tmp_path):
    img = np.zeros((10, 10, 3))
    img[:, 5:] = 1.0
    io.write_png(tmp_path / "t.png", img)
    b = generate_synthetic(SyntheticSceneSpec(preset="plane", texture="image",
                                              texture_path=str(tmp_path / "t.png"),
                                              width=16, height=16, resolution=16))
    assert b.I1[:, :4].mean() < 0.2 and b.I1[:, -4:].mean() > 0.6


def test_zero_overlap_is_reported():
    spec = SyntheticSceneSpec(preset="plane", baseline=(0, 0, 0), rotation_deg=(0, 180, 0))
    with pytest.raises(DegenerateSceneError, match="overlap fraction"):
        generate_synthetic(spec)


@pytest.mark.parametrize("kw", [dict(preset="cube"), dict(texture="marble"),
                                dict(texture="image"), dict(resolution=4), dict(width=6)])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        SyntheticSceneSpec(**kw)


def test_spec_dict_round_trip():
    spec = SyntheticSceneSpec(preset="plane", baseline=(0.1, 0.2, 0.0), seed=9)
    assert SyntheticSceneSpec.from_dict(spec.to_dict()) == spec
