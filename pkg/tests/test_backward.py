import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import onaxis_scene, random_scene
from surfelsplat.backward import GradientBuffers, StaleRenderError, backward
from surfelsplat.camera import CameraIntrinsics, CameraPose, se3_exp
from surfelsplat.gradcheck import (
    PARAM_GROUPS,
    central_difference,
    check_gradients,
    finite_difference_oracle,
    random_problem,
)
from surfelsplat.raster import RasterConfig, render

K16 = CameraIntrinsics(20.0, 20.0, 8.0, 8.0, 16, 16)


def random_case(seed, n=16, size=16):
    rng = np.random.default_rng(seed)
    scene, K = random_scene(rng, n=n, size=size)
    pose = se3_exp(rng.normal(size=6) * 0.02)
    return rng, scene, K, pose


# -- oracle self-tests ------------------------------------------------------------

def test_central_difference_on_quadratic():
    g = central_difference(lambda x: float(x[0] ** 2), [3.0], h=1e-4)
    assert g[0] == pytest.approx(6.0, abs=1e-7)


def test_central_difference_flags_nonfinite():
    g = central_difference(lambda x: np.inf if x[0] > 0 else 0.0, [0.0], h=1e-3)
    assert np.isnan(g[0])


def big_blob():
    # one wide surfel: every pixel inside its support, so the loss is smooth
    return onaxis_scene([2.0], [0.5], colors=[[0.3, 0.6, 0.9]], scale=2.0)


def render_sum(scene, K, pose):
    return float(render(scene, K, pose).color.sum())


def test_opacity_gradient_of_render_sum():
    scene = big_blob()
    pose = CameraPose.identity()
    out = render(scene, K16, pose)
    g = backward(scene, K16, pose, None, out, np.ones((16, 16, 3)))
    fd = finite_difference_oracle(render_sum, scene, K16, pose, "opacities", 0, h=1e-4)
    assert g.opacities[0] == pytest.approx(fd, rel=1e-7)


def test_finite_differences_converge_quadratically():
    scene = big_blob()
    pose = CameraPose.identity()
    out = render(scene, K16, pose)
    exact = backward(scene, K16, pose, None, out, np.ones((16, 16, 3))).centers[0, 0]
    errs = [abs(finite_difference_oracle(render_sum, scene, K16, pose, "centers", (0, 0), h) - exact)
            for h in (0.04, 0.02, 0.01)]
    r1, r2 = errs[0] / errs[1], errs[1] / errs[2]
    assert 3.5 < r1 < 4.5 and 3.5 < r2 < 4.5


# -- hand cases ------------------------------------------------------------------------

def test_zero_cotangents_give_zero_gradients():
    _, scene, K, pose = random_case(0)
    out = render(scene, K, pose)
    g = backward(scene, K, pose, None, out)
    for name in GradientBuffers.GROUPS:
        assert not np.any(getattr(g, name))


def test_depth_gradient_along_camera_axis():
    scene = onaxis_scene([2.0], [0.5], scale=0.05)
    pose = CameraPose.identity()
    out = render(scene, K16, pose)
    alpha = out.alpha[8, 8]
    d_depth = np.zeros((16, 16))
    d_depth[8, 8] = 1.0
    g = backward(scene, K16, pose, None, out, d_depth=d_depth)

    def center_depth(scene, K, pose):
        return float(render(scene, K, pose).depth[8, 8])

    fd = finite_difference_oracle(center_depth, scene, K16, pose, "pose", 5, h=1e-5)
    assert fd == pytest.approx(alpha, rel=1e-4)
    assert g.pose[5] == pytest.approx(alpha, rel=1e-9)


def test_stale_render_is_rejected():
    _, scene, K, pose = random_case(1)
    out = render(scene, K, pose)
    moved = scene.replace(opacities=np.clip(scene.opacities * 0.9, 0, 1))
    with pytest.raises(StaleRenderError):
        backward(moved, K, pose, None, out, np.ones((16, 16, 3)))


# -- properties ------------------------------------------------------------------------

@settings(max_examples=10)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear_in_cotangent(seed, a, b):
    rng, scene, K, pose = random_case(seed)
    out = render(scene, K, pose)
    G1, G2 = rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16, 3))
    D1, D2 = rng.normal(size=(16, 16)), rng.normal(size=(16, 16))
    lhs = backward(scene, K, pose, None, out, a * G1 + b * G2, a * D1 + b * D2)
    r1 = backward(scene, K, pose, None, out, G1, D1)
    r2 = backward(scene, K, pose, None, out, G2, D2)
    rhs = r1.scaled(a) + r2.scaled(b)
    for name in GradientBuffers.GROUPS:
        x, y = getattr(lhs, name), getattr(rhs, name)
        np.testing.assert_allclose(x, y, atol=1e-9 * max(1.0, np.abs(y).max()))


@settings(max_examples=10)
@given(st.integers(0, 2 ** 31))
def test_normal_gradients_are_tangent(seed):
    rng, scene, K, pose = random_case(seed)
    out = render(scene, K, pose)
    g = backward(scene, K, pose, None, out, rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16)))
    assert g.all_finite()
    np.testing.assert_allclose(np.sum(g.normals * scene.normals, axis=1), 0, atol=1e-9)


def test_zero_opacity_surfels_only_touch_opacity():
    rng, scene, K, pose = random_case(3)
    op = scene.opacities.copy()
    op[[0, 5]] = 0.0
    scene = scene.replace(opacities=op)
    out = render(scene, K, pose)
    g = backward(scene, K, pose, None, out, rng.normal(size=(16, 16, 3)), rng.normal(size=(16, 16)))
    for name in ("colors", "centers", "scales", "normals"):
        assert not np.any(getattr(g, name)[[0, 5]])


def test_backward_is_thread_independent():
    rng, scene, K, pose = random_case(4, n=40, size=32)
    gC, gD = rng.normal(size=(32, 32, 3)), rng.normal(size=(32, 32))
    ref = backward(scene, K, pose, RasterConfig(threads=1), render(scene, K, pose), gC, gD)
    cfg = RasterConfig(threads=4)
    par = backward(scene, K, pose, cfg, render(scene, K, pose, cfg), gC, gD)
    for name in GradientBuffers.GROUPS:
        np.testing.assert_array_equal(getattr(ref, name), getattr(par, name))


def test_all_groups_on_one_random_scene():
    scene, K, pose = random_problem(np.random.default_rng(99), n_surfels=24, size=24)
    reports = check_gradients(scene, K, pose)
    assert {r.param_group for r in reports} == set(PARAM_GROUPS)
    for r in reports:
        assert r.max_rel_err < 1e-5, r
        assert r.excluded_fraction < 0.05
