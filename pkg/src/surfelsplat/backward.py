"""Analytic reverse pass of the splatting renderer.

Pixel cotangents are pushed through the blend (reverse transmittance scan),
the 2D Gaussian, the EWA covariance ``J W Sigma W^T J^T`` and the pinhole
projection, down to surfel parameters, the four intrinsics and a left
``se(3)`` perturbation of the pose.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .raster import RasterConfig, RenderOutput, TileRecord, render_fingerprint
from .surfel import SurfelScene, tangent_seed


class StaleRenderError(RuntimeError):
    """Backward called with inputs that differ from the forward pass."""


@dataclass
class GradientBuffers:
    colors: np.ndarray      # (N, 3)
    centers: np.ndarray     # (N, 3)
    scales: np.ndarray      # (N, 2)
    normals: np.ndarray     # (N, 3), tangent to the unit sphere
    opacities: np.ndarray   # (N,)
    intrinsics: np.ndarray  # (4,) d fx, d fy, d cx, d cy
    pose: np.ndarray        # (6,) d omega, d v at the identity perturbation

    GROUPS = ("colors", "centers", "scales", "normals", "opacities", "intrinsics", "pose")

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffers":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(4), np.zeros(6))

    def __add__(self, other: "GradientBuffers") -> "GradientBuffers":
        return GradientBuffers(*(getattr(self, g) + getattr(other, g) for g in self.GROUPS))

    def scaled(self, k: float) -> "GradientBuffers":
        return GradientBuffers(*(k * getattr(self, g) for g in self.GROUPS))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, g))) for g in self.GROUPS)


def _tile_partials(tile: TileRecord, d_color: np.ndarray, d_depth: np.ndarray,
                   d_alpha: np.ndarray, colors: np.ndarray, depth: np.ndarray,
                   opacities: np.ndarray, proj) -> tuple:
    ids = tile.ids
    if len(ids) == 0:
        return ids, None
    sl = (slice(tile.y0, tile.y1), slice(tile.x0, tile.x1))
    gC = d_color[sl].reshape(-1, 3)
    gD = d_depth[sl].reshape(-1)
    gA = d_alpha[sl].reshape(-1)

    alpha, trans = tile.alpha, tile.trans
    w = alpha * trans
    g = colors[ids] @ gC.T + depth[ids][:, None] * gD[None, :] + gA[None, :]

    d_col = w @ gC
    d_dep = w @ gD

    # suffix[i] = sum_{j > i} g_j w_j
    gw = g * w
    suffix = np.cumsum(gw[::-1], axis=0)[::-1] - gw
    d_alpha_ip = np.where(tile.active, g * trans - suffix / (1.0 - alpha), 0.0)
    d_raw = np.where(tile.clamped, 0.0, d_alpha_ip)

    ys, xs = np.mgrid[tile.y0:tile.y1, tile.x0:tile.x1]
    dx = xs.reshape(-1)[None, :] - proj.uv[ids, 0][:, None]
    dy = ys.reshape(-1)[None, :] - proj.uv[ids, 1][:, None]
    Q = proj.conic[ids]
    q = Q[:, 0, 0, None] * dx * dx + 2.0 * Q[:, 0, 1, None] * dx * dy + Q[:, 1, 1, None] * dy * dy
    gauss = np.exp(-0.5 * q)
    d_op = (d_raw * gauss).sum(axis=1)
    d_q = -0.5 * d_raw * opacities[ids][:, None] * gauss

    # q = d^T Q d with d = p - mu
    d_u = -2.0 * (d_q * (Q[:, 0, 0, None] * dx + Q[:, 0, 1, None] * dy)).sum(axis=1)
    d_v = -2.0 * (d_q * (Q[:, 0, 1, None] * dx + Q[:, 1, 1, None] * dy)).sum(axis=1)
    gQ = np.empty((len(ids), 2, 2))
    gQ[:, 0, 0] = (d_q * dx * dx).sum(axis=1)
    gQ[:, 0, 1] = gQ[:, 1, 0] = (d_q * dx * dy).sum(axis=1)
    gQ[:, 1, 1] = (d_q * dy * dy).sum(axis=1)
    return ids, (d_col, d_dep, d_op, np.stack([d_u, d_v], axis=1), gQ)


def backward(scene: SurfelScene, K: CameraIntrinsics, pose: CameraPose,
             cfg: Optional[RasterConfig], out: RenderOutput,
             d_color: Optional[np.ndarray] = None, d_depth: Optional[np.ndarray] = None,
             d_alpha: Optional[np.ndarray] = None) -> GradientBuffers:
    """Gradients of ``<d_color, C> + <d_depth, D> + <d_alpha, A>``.

    ``out`` must come from ``render(scene, K, pose, cfg)`` with the very same
    inputs; a fingerprint check enforces this.
    """
    cfg = cfg or RasterConfig()
    if render_fingerprint(scene, K, pose, cfg) != out.fingerprint:
        raise StaleRenderError("render output does not match the backward inputs")
    H, Wd = out.height, out.width
    d_color = np.zeros((H, Wd, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64)
    d_depth = np.zeros((H, Wd)) if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    d_alpha = np.zeros((H, Wd)) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)

    n = len(scene)
    proj = out.projection
    grads = GradientBuffers.zeros(n)

    work = lambda t: _tile_partials(t, d_color, d_depth, d_alpha, scene.colors,  # noqa: E731
                                    proj.depth, scene.opacities, proj)
    if cfg.threads != 1 and len(out.tiles) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads if cfg.threads > 0 else None) as pool:
            partials = list(pool.map(work, out.tiles))
    else:
        partials = [work(t) for t in out.tiles]

    d_depth_i = np.zeros(n)
    d_uv = np.zeros((n, 2))
    g_conic = np.zeros((n, 2, 2))
    # tile-major ordered reduction keeps results independent of thread count
    for ids, part in partials:
        if part is None:
            continue
        d_col, d_dep, d_op, d_uv_t, gQ = part
        np.add.at(grads.colors, ids, d_col)
        np.add.at(d_depth_i, ids, d_dep)
        np.add.at(grads.opacities, ids, d_op)
        np.add.at(d_uv, ids, d_uv_t)
        np.add.at(g_conic, ids, gQ)

    _chain_geometry(scene, K, pose, proj, d_depth_i, d_uv, g_conic, grads)
    return grads


def _chain_geometry(scene, K, pose, proj, d_depth_i, d_uv, g_conic, grads):
    Wr, t = pose.rotation, pose.translation
    Q = proj.conic
    # conic = A^{-1}  =>  dL/dA = -Q G Q, and A = cov2d + dilation * I
    g_cov2d = -Q @ g_conic @ Q
    J, cov_cam = proj.J, proj.cov_cam
    g_J = 2.0 * g_cov2d @ J @ cov_cam
    g_cov_cam = np.swapaxes(J, 1, 2) @ g_cov2d @ J
    g_cov_world = Wr.T @ g_cov_cam @ Wr
    g_Wr = 2.0 * np.einsum("nij,jk,nkl->il", g_cov_cam, Wr, proj.cov_world)

    n1, n2 = proj.n1, proj.n2
    s = scene.scales
    grads.scales[:, 0] = 2.0 * s[:, 0] * np.einsum("ni,nij,nj->n", n1, g_cov_world, n1)
    grads.scales[:, 1] = 2.0 * s[:, 1] * np.einsum("ni,nij,nj->n", n2, g_cov_world, n2)
    g_n1 = 2.0 * (s[:, 0] ** 2)[:, None] * np.einsum("nij,nj->ni", g_cov_world, n1)
    g_n2 = 2.0 * (s[:, 1] ** 2)[:, None] * np.einsum("nij,nj->ni", g_cov_world, n2)
    normals = scene.normals
    # n2 = n x n1
    g_n = np.cross(n1, g_n2)
    g_n1 = g_n1 + np.cross(g_n2, normals)
    # n1 = m / |m|, m = seed x n
    g_m = (g_n1 - np.sum(g_n1 * n1, axis=1, keepdims=True) * n1) / proj.m_norm[:, None]
    g_n = g_n + np.cross(g_m, tangent_seed(normals))
    g_n -= np.sum(g_n * normals, axis=1, keepdims=True) * normals

    mu_c = proj.mu_cam
    x, y = mu_c[:, 0], mu_c[:, 1]
    d = np.where(proj.valid, mu_c[:, 2], 1.0)
    fx, fy = K.fx, K.fy
    g_mu_c = np.zeros_like(mu_c)
    # projection u = fx x/d + cx, v = fy y/d + cy
    gu, gv = d_uv[:, 0], d_uv[:, 1]
    g_fx = np.sum(gu * x / d)
    g_fy = np.sum(gv * y / d)
    g_cx = np.sum(gu)
    g_cy = np.sum(gv)
    g_mu_c[:, 0] += gu * fx / d
    g_mu_c[:, 1] += gv * fy / d
    g_mu_c[:, 2] += -gu * fx * x / d ** 2 - gv * fy * y / d ** 2
    # Jacobian entries
    gJ00, gJ02 = g_J[:, 0, 0], g_J[:, 0, 2]
    gJ11, gJ12 = g_J[:, 1, 1], g_J[:, 1, 2]
    g_fx += np.sum(gJ00 / d - gJ02 * x / d ** 2)
    g_fy += np.sum(gJ11 / d - gJ12 * y / d ** 2)
    g_mu_c[:, 0] += -gJ02 * fx / d ** 2
    g_mu_c[:, 1] += -gJ12 * fy / d ** 2
    g_mu_c[:, 2] += (-gJ00 * fx / d ** 2 + 2.0 * gJ02 * fx * x / d ** 3
                     - gJ11 * fy / d ** 2 + 2.0 * gJ12 * fy * y / d ** 3)
    g_mu_c[:, 2] += d_depth_i
    g_mu_c[~proj.valid] = 0.0

    grads.centers[:] = g_mu_c @ Wr
    g_t = g_mu_c.sum(axis=0)
    g_Wr = g_Wr + g_mu_c.T @ scene.centers
    M = g_Wr @ Wr.T + np.outer(g_t, t)
    grads.pose[:3] = [M[2, 1] - M[1, 2], M[0, 2] - M[2, 0], M[1, 0] - M[0, 1]]
    grads.pose[3:] = g_t
    grads.intrinsics[:] = [g_fx, g_fy, g_cx, g_cy]
    grads.normals[:] = g_n
