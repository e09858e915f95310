import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from surfelsplat.surfel import (
    GaussianSurfel,
    SurfelScene,
    build_frame,
    covariance_from_frame,
    covariance_world,
    covariances,
)

finite = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)
scales = arrays(np.float64, 2, elements=st.floats(1e-3, 10.0))


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def make(normal, scale=(2.0, 1.0)):
    return GaussianSurfel(color=(0.5, 0.5, 0.5), center=(0, 0, 1), scale=scale,
                          normal=unit(normal), opacity=0.5)


# -- frames ---------------------------------------------------------------

def test_frame_of_z_axis_is_identity():
    f = build_frame((0, 0, 1))
    np.testing.assert_array_equal(f.n1, [1, 0, 0])
    np.testing.assert_array_equal(f.n2, [0, 1, 0])
    np.testing.assert_allclose(f.R, np.eye(3), atol=1e-15)


def test_frame_of_x_axis_is_proper_rotation():
    R = build_frame((1, 0, 0)).R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(R[:, 2], [1, 0, 0])


def test_frame_of_diagonal_normal():
    R = build_frame(np.ones(3) / np.sqrt(3)).R
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


@given(vec3)
def test_frame_invariants(v):
    f = build_frame(v)
    n = unit(v)
    np.testing.assert_allclose(f.R @ f.R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(f.R) == pytest.approx(1.0, abs=1e-9)
    assert abs(f.n1 @ n) < 1e-9 and abs(f.n2 @ n) < 1e-9


def test_frame_rejects_zero_normal():
    with pytest.raises(ValueError):
        build_frame((0, 0, 0))


# -- covariance -----------------------------------------------------------

def test_axis_aligned_covariance():
    np.testing.assert_allclose(covariance_world(make((0, 0, 1))), np.diag([4.0, 1.0, 0.0]),
                               atol=1e-15)


def test_isotropic_covariance_ignores_tangent_choice():
    np.testing.assert_allclose(covariance_world(make((0, 0, 1), (1.0, 1.0))),
                               np.diag([1.0, 1.0, 0.0]), atol=1e-15)


@given(vec3, scales)
def test_normal_is_null_direction(v, s):
    n = unit(v)
    cov = covariance_world(make(n, s))
    assert np.linalg.norm(cov @ n) <= 1e-9 * max(1.0, s.max() ** 2)


@given(vec3, scales)
def test_eigenvalues_are_squared_scales(v, s):
    cov = covariance_world(make(v, s))
    # eigen-solver oracle, independent of the frame construction
    ev = np.sort(np.linalg.eigvalsh(cov))
    want = np.sort([s[0] ** 2, s[1] ** 2, 0.0])
    np.testing.assert_allclose(ev, want, atol=1e-9 * max(1.0, want.max()))


@given(vec3, scales)
def test_sign_flip_of_second_tangent(v, s):
    f = build_frame(v)
    R = f.R
    R_flip = np.stack([f.n1, -f.n2, f.n], axis=1)
    np.testing.assert_allclose(covariance_from_frame(R, s), covariance_from_frame(R_flip, s),
                               atol=1e-12)


def test_batch_matches_single(rng):
    n = rng.normal(size=(20, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    s = rng.uniform(0.1, 2, (20, 2))
    batch = covariances(s, n)
    for i in range(20):
        np.testing.assert_allclose(batch[i], covariance_from_frame(build_frame(n[i]).R, s[i]),
                                   atol=1e-12)


# -- validation -------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"scale": (0.0, 1.0)},
    {"normal": (0, 0, 2)},
    {"opacity": 1.5},
    {"color": (1.2, 0, 0)},
])
def test_surfel_rejects_invalid_fields(kw):
    base = dict(color=(0.5, 0.5, 0.5), center=(0, 0, 1), scale=(1.0, 1.0),
                normal=(0, 0, 1), opacity=0.5)
    base.update(kw)
    with pytest.raises(ValueError):
        GaussianSurfel(**base)


def test_scene_is_read_only_and_permutable(rng):
    from conftest import random_scene

    scene, _ = random_scene(rng, n=6)
    with pytest.raises(ValueError):
        scene.centers[0, 0] = 1.0
    perm = scene.permuted([5, 4, 3, 2, 1, 0])
    np.testing.assert_array_equal(perm.colors, scene.colors[::-1])
    assert scene[2].opacity == scene.opacities[2]


def test_scene_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        SurfelScene(np.zeros((2, 3)), np.zeros((3, 3)), np.ones((2, 2)),
                    np.tile([0, 0, 1.0], (2, 1)), np.zeros(2))
