"""Pinhole cameras, the clip/NDC/viewport projection chain, and SE(3) maps.

Conventions:
  * Poses map world (view-1 canonical) points into the camera:
    ``mu_C = W mu + t``.
  * Camera-space depth ``d`` is positive in front of the camera. The
    OpenGL-style frustum (``z_C = -d``) is folded into the formulas.
  * ``cx, cy`` are the absolute principal point, so the optical axis lands on
    pixel ``(cx, cy)``. Pixel centers sit on integer coordinates.
  * Tangent vectors are ordered ``(omega, v)``: rotation first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_NEAR = 0.01
DEFAULT_FAR = 100.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "near", "far"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def tan_half_fov(self) -> tuple[float, float]:
        return self.width / (2.0 * self.fx), self.height / (2.0 * self.fy)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def with_params(self, params) -> "CameraIntrinsics":
        fx, fy, cx, cy = (float(p) for p in params)
        return CameraIntrinsics(fx, fy, cx, cy, self.width, self.height, self.near, self.far)


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose has non-finite entries")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation is not in SO(3)")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self * other`` (apply ``other`` first)."""
        R = self.rotation @ other.rotation
        return CameraPose(_reorthonormalize(R), self.rotation @ other.translation + self.translation)

    def inverse(self) -> "CameraPose":
        Rt = self.rotation.T
        return CameraPose(Rt, -Rt @ self.translation)

    def perturbed(self, xi) -> "CameraPose":
        """Left-multiplicative update ``exp(xi) * self``."""
        return se3_exp(xi).compose(self)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U[:, -1] *= -1
        out = U @ Vt
    return out


def skew(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    K = skew(omega)
    if theta < 1e-8:
        A = 1.0 - theta2 / 6.0
        B = 0.5 - theta2 / 24.0
    else:
        A = math.sin(theta) / theta
        B = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + A * K + B * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if math.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        S = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(S)))
        axis = S[:, k] / math.sqrt(S[k, k])
        if axis @ vee < 0:
            axis = -axis
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * math.sin(theta)) * vee


def _left_jacobian(omega) -> np.ndarray:
    theta2 = float(omega @ omega)
    theta = math.sqrt(theta2)
    K = skew(omega)
    if theta < 1e-8:
        B = 0.5 - theta2 / 24.0
        C = 1.0 / 6.0 - theta2 / 120.0
    else:
        B = (1.0 - math.cos(theta)) / theta2
        C = (theta - math.sin(theta)) / (theta2 * theta)
    return np.eye(3) + B * K + C * (K @ K)


def se3_exp(xi) -> CameraPose:
    """Closed-form exponential of a twist ``(omega, v)``."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    omega, v = xi[:3], xi[3:]
    R = so3_exp(omega)
    t = _left_jacobian(omega) @ v
    return CameraPose(_reorthonormalize(R), t)


def se3_log(pose: CameraPose) -> np.ndarray:
    omega = so3_log(pose.rotation)
    v = np.linalg.solve(_left_jacobian(omega), pose.translation)
    return np.concatenate([omega, v])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation, radians."""
    return float(np.linalg.norm(so3_log(R)))


def transform_to_camera(mu, pose: CameraPose) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    return mu @ pose.rotation.T + pose.translation


def projection_matrix(K: CameraIntrinsics) -> np.ndarray:
    """Symmetric-frustum OpenGL projection expressed with pixel intrinsics."""
    n, f = K.near, K.far
    P = np.zeros((4, 4))
    P[0, 0] = 2.0 * K.fx / K.width
    P[1, 1] = 2.0 * K.fy / K.height
    P[2, 2] = -(f + n) / (f - n)
    P[2, 3] = -2.0 * f * n / (f - n)
    P[3, 2] = -1.0
    return P


def to_clip(mu_C, K: CameraIntrinsics) -> np.ndarray:
    """Clip coordinates of positive-depth camera points (..., 3) -> (..., 4)."""
    mu_C = np.asarray(mu_C, dtype=np.float64)
    # the frustum looks down -z; only the depth axis changes sign
    gl = np.stack([mu_C[..., 0], mu_C[..., 1], -mu_C[..., 2], np.ones(mu_C.shape[:-1])], axis=-1)
    return gl @ projection_matrix(K).T


def project_point(mu_C, K: CameraIntrinsics):
    """Pixel position through clip space, NDC and the viewport.

    Returns ``(uv, valid)``; points at or in front of the near plane are
    flagged invalid rather than raising.
    """
    mu_C = np.asarray(mu_C, dtype=np.float64)
    clip = to_clip(mu_C, K)
    w = clip[..., 3]
    valid = mu_C[..., 2] > K.near
    safe_w = np.where(valid, w, 1.0)
    x_ndc = clip[..., 0] / safe_w
    y_ndc = clip[..., 1] / safe_w
    uv = np.stack([0.5 * K.width * x_ndc + K.cx, 0.5 * K.height * y_ndc + K.cy], axis=-1)
    return uv, valid


def project_pinhole(mu_C, K: CameraIntrinsics) -> np.ndarray:
    mu_C = np.asarray(mu_C, dtype=np.float64)
    d = mu_C[..., 2]
    return np.stack([K.fx * mu_C[..., 0] / d + K.cx, K.fy * mu_C[..., 1] / d + K.cy], axis=-1)


def affine_jacobian(mu_C, K: CameraIntrinsics) -> np.ndarray:
    """Jacobian of the pixel projection at ``mu_C``: (..., 2, 3)."""
    mu_C = np.asarray(mu_C, dtype=np.float64)
    x, y, d = mu_C[..., 0], mu_C[..., 1], mu_C[..., 2]
    if np.any(d <= 0):
        raise ValueError("affine_jacobian needs positive depth")
    J = np.zeros(mu_C.shape[:-1] + (2, 3))
    J[..., 0, 0] = K.fx / d
    J[..., 0, 2] = -K.fx * x / d ** 2
    J[..., 1, 1] = K.fy / d
    J[..., 1, 2] = -K.fy * y / d ** 2
    return J


def project_covariance(cov, pose: CameraPose, J) -> np.ndarray:
    """``J W cov W^T J^T``, symmetrized."""
    cov = np.asarray(cov, dtype=np.float64)
    W = pose.rotation
    cov_c = W @ cov @ W.T
    out = J @ cov_c @ np.swapaxes(J, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))
