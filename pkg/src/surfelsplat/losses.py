"""Photometric, geometric (depth-warp) and normal-prior losses.

Every loss returns its value together with the gradient images that feed
``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .metrics import ssim_with_grad


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.6
    pho1: float = 0.05
    pho2: float = 0.05
    geo: float = 0.01
    normal: float = 0.0

    def __post_init__(self):
        if min(self.ssim, self.pho1, self.pho2, self.geo, self.normal) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ssim > 1:
            raise ValueError("ssim mix weight must lie in [0, 1]")


@dataclass
class LossReport:
    pho1: float = 0.0
    pho2: float = 0.0
    geo: float = 0.0
    normal: Optional[float] = None
    total: float = 0.0
    d_color: Dict[int, np.ndarray] = field(default_factory=dict)
    d_depth: Dict[int, np.ndarray] = field(default_factory=dict)
    d_normals: Optional[np.ndarray] = None


def l1_with_grad(rendered: np.ndarray, observed: np.ndarray):
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(observed, dtype=np.float64)
    n = diff.size
    return float(np.abs(diff).sum() / n), np.sign(diff) / n


def photometric_loss(rendered: np.ndarray, observed: np.ndarray, ssim_weight: float = 0.6):
    """``(1 - w) * L1 + w * |1 - SSIM|`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if rendered.shape != observed.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {observed.shape}")
    l1, g_l1 = l1_with_grad(rendered, observed)
    if ssim_weight == 0.0:
        return l1, g_l1
    s, g_s = ssim_with_grad(rendered, observed)
    g_s = g_s.reshape(rendered.shape)
    value = (1.0 - ssim_weight) * l1 + ssim_weight * abs(1.0 - s)
    grad = (1.0 - ssim_weight) * g_l1 - ssim_weight * np.sign(1.0 - s) * g_s
    return value, grad


@dataclass
class WarpResult:
    depth: np.ndarray       # (H, W) warped depth in view 1, 0 where empty
    mask: np.ndarray        # (H, W) bool, received at least one sample
    source: np.ndarray      # (H, W, 3) flat view-2 pixel indices feeding each target, -1 if unused
    transport: np.ndarray   # (H, W, 3) d(warped depth)/d(source depth) per feeding pixel
    weights: np.ndarray     # (H, W, 3) barycentric weights of the pixel center
    slope: np.ndarray       # (H, W, 2) d(depth)/d(u, v) of the interpolating plane


def depth_edge_mask(depth: np.ndarray, rel_tol: float = 0.05) -> np.ndarray:
    """Pixels with positive depth whose 4-neighbors agree within ``rel_tol``.

    Pixels straddling an occlusion boundary blend foreground and background
    depths; back-projected, they float between the two surfaces.
    """
    depth = np.asarray(depth, dtype=np.float64)
    ok = depth > 0
    tol = rel_tol * depth
    for axis in (0, 1):
        diff = np.abs(np.diff(depth, axis=axis))
        lo = [slice(None), slice(None)]
        hi = [slice(None), slice(None)]
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        ok[lo] &= diff <= tol[lo]
        ok[hi] &= diff <= tol[hi]
    return ok


def _neighbor(flat_ok: np.ndarray, W: int, ys, xs, dy: int, dx: int, H: int):
    ny, nx = ys + dy, xs + dx
    inside = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
    idx = np.where(inside, ny * W + nx, 0)
    return np.where(inside & flat_ok[idx], idx, -1)


def warp_depth(depth2: np.ndarray, K: CameraIntrinsics, pose2: CameraPose,
               valid: Optional[np.ndarray] = None) -> WarpResult:
    """Forward-warp a view-2 depth map into view 1 with a z-buffer.

    ``pose2`` maps view-1 (canonical) points into camera 2, so the view-2
    points travel back through its inverse. Each valid sample claims the
    nearest view-1 pixel center; the nearest depth wins. The winning depth is
    then evaluated at the pixel center itself using the plane through the
    sample and two grid neighbors, which removes the rounding offset.
    """
    depth2 = np.asarray(depth2, dtype=np.float64)
    H, W = depth2.shape
    ok = depth2 > 0
    if valid is not None:
        ok &= valid
    R, t = pose2.rotation, pose2.translation

    # every pixel is mapped so neighbors are available; only ``ok`` ones may land
    vv, uu = np.mgrid[0:H, 0:W]
    ys, xs = vv.reshape(-1), uu.reshape(-1)
    z = depth2.reshape(-1)
    rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones(H * W)], axis=1)
    back = rays @ R            # rows of R^T ray
    p1 = z[:, None] * back - (R.T @ t)[None, :]
    d1 = p1[:, 2]
    front = ok.reshape(-1) & (d1 > K.near)
    d1_safe = np.where(front, d1, 1.0)
    pu = K.fx * p1[:, 0] / d1_safe + K.cx
    pv = K.fy * p1[:, 1] / d1_safe + K.cy
    # d(pixel)/d(source depth) along the back-projected ray
    du_dz = K.fx * (back[:, 0] * d1_safe - p1[:, 0] * back[:, 2]) / d1_safe ** 2
    dv_dz = K.fy * (back[:, 1] * d1_safe - p1[:, 1] * back[:, 2]) / d1_safe ** 2
    u = np.rint(pu).astype(np.int64)
    v = np.rint(pv).astype(np.int64)
    land = front & (u >= 0) & (u < W) & (v >= 0) & (v < H)

    out_depth = np.zeros((H, W))
    source = np.full((H, W, 3), -1, dtype=np.int64)
    transport = np.zeros((H, W, 3))
    cand = np.flatnonzero(land)
    if len(cand) == 0:
        return WarpResult(out_depth, np.zeros((H, W), dtype=bool), source, transport,
                          np.zeros((H, W, 3)), np.zeros((H, W, 2)))

    # plane through the sample and a horizontal and a vertical neighbor
    j = _neighbor(front, W, ys[cand], xs[cand], 0, 1, H)
    j = np.where(j < 0, _neighbor(front, W, ys[cand], xs[cand], 0, -1, H), j)
    k = _neighbor(front, W, ys[cand], xs[cand], 1, 0, H)
    k = np.where(k < 0, _neighbor(front, W, ys[cand], xs[cand], -1, 0, H), k)
    a11 = pu[j] - pu[cand]
    a12 = pv[j] - pv[cand]
    a21 = pu[k] - pu[cand]
    a22 = pv[k] - pv[cand]
    det = a11 * a22 - a12 * a21
    off_u = u[cand] - pu[cand]
    off_v = v[cand] - pv[cand]
    tri = (j >= 0) & (k >= 0) & (np.abs(det) > 1e-9)
    # a sample sitting on the center needs no interpolation
    tri &= np.maximum(np.abs(off_u), np.abs(off_v)) > 1e-9
    det_safe = np.where(tri, det, 1.0)
    # barycentric weights of the center: solve A^T w = offset
    w1 = np.where(tri, (a22 * off_u - a21 * off_v) / det_safe, 0.0)
    w2 = np.where(tri, (a11 * off_v - a12 * off_u) / det_safe, 0.0)
    j = np.where(tri, j, cand)
    k = np.where(tri, k, cand)
    interp = d1[cand] + w1 * (d1[j] - d1[cand]) + w2 * (d1[k] - d1[cand])

    tgt = v[cand] * W + u[cand]
    # nearest depth per target, ties to the lowest source index
    order = np.lexsort((cand, interp, tgt))
    tgt_s = tgt[order]
    first = np.r_[True, tgt_s[1:] != tgt_s[:-1]]
    win = order[first]
    wt = tgt[win]
    out_depth.reshape(-1)[wt] = interp[win]

    # slope of the interpolating plane, held with each feeding sample's motion
    i_, j_, k_ = cand[win], j[win], k[win]
    g_u = np.zeros(len(win))
    g_v = np.zeros(len(win))
    has = tri[win]
    if np.any(has):
        A11, A12, A21, A22 = a11[win][has], a12[win][has], a21[win][has], a22[win][has]
        r1 = d1[j_[has]] - d1[i_[has]]
        r2 = d1[k_[has]] - d1[i_[has]]
        dd = det[win][has]
        g_u[has] = (A22 * r1 - A12 * r2) / dd
        g_v[has] = (A11 * r2 - A21 * r1) / dd
    lam = np.stack([1.0 - w1[win] - w2[win], w1[win], w2[win]], axis=1)
    feeders = np.stack([i_, j_, k_], axis=1)
    coef = back[feeders, 2] - g_u[:, None] * du_dz[feeders] - g_v[:, None] * dv_dz[feeders]
    tr = lam * coef
    # a collapsed triangle feeds everything through the sample itself
    solo = ~has
    tr[solo] = np.c_[back[i_[solo], 2], np.zeros((solo.sum(), 2))]
    lam[solo] = (1.0, 0.0, 0.0)
    feeders[solo, 1:] = -1
    source.reshape(-1, 3)[wt] = feeders
    transport.reshape(-1, 3)[wt] = tr
    weights = np.zeros((H, W, 3))
    weights.reshape(-1, 3)[wt] = lam
    slope = np.zeros((H, W, 2))
    slope.reshape(-1, 2)[wt] = np.stack([g_u, g_v], axis=1)
    mask = np.zeros((H, W), dtype=bool)
    mask.reshape(-1)[wt] = True
    return WarpResult(out_depth, mask, source, transport, weights, slope)


def warp_camera_gradients(warp: WarpResult, depth2: np.ndarray, K: CameraIntrinsics,
                          pose2: CameraPose, d_warped: np.ndarray):
    """Pull ``d_warped`` (cotangent of the warped depth) back to the camera.

    Returns ``(d_intrinsics[4], d_pose[6])`` with the pose in the same left
    tangent convention as the renderer. The source depths are held fixed and
    the landing pixel of each sample is piecewise constant.
    """
    H, W = warp.depth.shape
    sel = warp.mask & (d_warped != 0)
    d_K = np.zeros(4)
    d_pose = np.zeros(6)
    if not np.any(sel):
        return d_K, d_pose
    src = warp.source[sel]                      # (M, 3)
    lam = warp.weights[sel]
    g = warp.slope[sel]
    cot = np.asarray(d_warped, dtype=np.float64)[sel]
    used = src >= 0
    idx = np.where(used, src, 0)
    ys, xs = np.divmod(idx, W)
    z = np.asarray(depth2, dtype=np.float64).reshape(-1)[idx]
    R, t = pose2.rotation, pose2.translation
    rays = np.stack([(xs - K.cx) / K.fx, (ys - K.cy) / K.fy, np.ones_like(z)], axis=-1)
    P = z[..., None] * (rays @ R) - R.T @ t
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]

    # interp = sum_s lam_s (Z_s - g . p_s) to first order around each sample
    w = np.where(used, cot[:, None] * lam, 0.0)
    gu, gv = g[:, 0:1], g[:, 1:2]
    G = np.empty(P.shape)
    G[..., 0] = -w * gu * K.fx / Z
    G[..., 1] = -w * gv * K.fy / Z
    G[..., 2] = w * (1.0 + gu * K.fx * X / Z ** 2 + gv * K.fy * Y / Z ** 2)

    # P = z R^T ray - R^T t under left perturbation: dP = z R^T [ray]x omega - R^T v
    a = G @ R.T                                  # rows of R G
    d_pose[:3] = np.sum(z[..., None] * np.cross(a, rays), axis=(0, 1))
    d_pose[3:] = -np.sum(a, axis=(0, 1))

    # through the back-projected rays ...
    d_K[0] = np.sum(-z * a[..., 0] * (xs - K.cx) / K.fx ** 2)
    d_K[1] = np.sum(-z * a[..., 1] * (ys - K.cy) / K.fy ** 2)
    d_K[2] = np.sum(-z * a[..., 0] / K.fx)
    d_K[3] = np.sum(-z * a[..., 1] / K.fy)
    # ... and through the reprojection into view 1
    d_K[0] += np.sum(-w * gu * X / Z)
    d_K[1] += np.sum(-w * gv * Y / Z)
    d_K[2] += np.sum(-w * gu)
    d_K[3] += np.sum(-w * gv)
    return d_K, d_pose


def geometric_loss(depth1: np.ndarray, warp: WarpResult, extra_mask: Optional[np.ndarray] = None):
    """Masked mean ``|D_warp - D1|``.

    Returns ``(value, d_depth1, d_depth2, empty)``. The gradient to view 2
    flows through the transport coefficients of the samples feeding each
    target; which pixel a sample lands on is piecewise constant.
    """
    depth1 = np.asarray(depth1, dtype=np.float64)
    if depth1.shape != warp.depth.shape:
        raise ValueError("depth shapes differ")
    mask = warp.mask if extra_mask is None else warp.mask & extra_mask
    d1_grad = np.zeros_like(depth1)
    d2_grad = np.zeros_like(depth1)
    count = int(mask.sum())
    if count == 0:
        return 0.0, d1_grad, d2_grad, True
    diff = warp.depth - depth1
    value = float(np.abs(diff[mask]).sum() / count)
    sgn = np.where(mask, np.sign(diff), 0.0) / count
    d1_grad = -sgn
    src = warp.source[mask]
    contrib = sgn[mask][:, None] * warp.transport[mask]
    used = src >= 0
    np.add.at(d2_grad.reshape(-1), src[used], contrib[used])
    return value, d1_grad, d2_grad, False


def normalized_depth(depth: np.ndarray, alpha: np.ndarray, min_alpha: float = 1e-12) -> np.ndarray:
    """Composited depth divided by accumulated alpha; 0 where nothing was drawn."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.where(alpha > min_alpha, np.asarray(depth) / np.maximum(alpha, min_alpha), 0.0)


@dataclass
class GeometricTerm:
    value: float
    empty: bool
    mask: np.ndarray        # (H, W) view-1 pixels compared
    d_depth1: np.ndarray
    d_alpha1: np.ndarray
    d_depth2: np.ndarray
    d_alpha2: np.ndarray
    d_intrinsics: np.ndarray = field(default_factory=lambda: np.zeros(4))
    d_pose: np.ndarray = field(default_factory=lambda: np.zeros(6))
    depth1: Optional[np.ndarray] = None     # alpha-normalized view-1 depth
    warped: Optional[np.ndarray] = None     # view-2 depth warped into view 1


def geometric_objective(depth1, alpha1, depth2, alpha2, K: CameraIntrinsics,
                        pose2: CameraPose, coverage: float = 0.5,
                        edge_tol: float = 0.05, warp_camera_grad: bool = True) -> GeometricTerm:
    """Depth-consistency term on rendered views, with gradients for the renderer.

    Depth is normalized by alpha before warping so partially transparent
    pixels are not pulled toward the camera. Only pixels with alpha above
    ``coverage`` and away from depth discontinuities take part in either view.
    The masks are recomputed on every call and carry no gradient.

    ``d_intrinsics`` and ``d_pose`` hold the warp's own dependence on the
    camera; they are zero when ``warp_camera_grad`` is off, in which case the
    camera only sees this term through the rendered depths.
    """
    n1 = normalized_depth(depth1, alpha1)
    n2 = normalized_depth(depth2, alpha2)
    a1 = np.asarray(alpha1, dtype=np.float64)
    a2 = np.asarray(alpha2, dtype=np.float64)
    ok1 = (a1 > coverage) & depth_edge_mask(n1, edge_tol)
    ok2 = (a2 > coverage) & depth_edge_mask(n2, edge_tol)
    warp = warp_depth(n2, K, pose2, ok2)
    value, g1, g2, empty = geometric_loss(n1, warp, ok1)
    # N = D / A  =>  dN/dD = 1/A, dN/dA = -N/A
    inv1 = np.where(a1 > 0, 1.0 / np.maximum(a1, 1e-12), 0.0)
    inv2 = np.where(a2 > 0, 1.0 / np.maximum(a2, 1e-12), 0.0)
    term = GeometricTerm(value=value, empty=empty, mask=warp.mask & ok1,
                         d_depth1=g1 * inv1, d_alpha1=-g1 * n1 * inv1,
                         d_depth2=g2 * inv2, d_alpha2=-g2 * n2 * inv2,
                         depth1=n1, warped=warp.depth)
    if warp_camera_grad and not empty:
        # the warped depth enters with the opposite sign of D1
        term.d_intrinsics, term.d_pose = warp_camera_gradients(warp, n2, K, pose2, -g1)
    return term


def normal_prior_loss(normals: np.ndarray, priors: np.ndarray):
    """Mean over surfels of ``|n - p|_1 + |1 - n.p|``; gradient is tangent to ``n``."""
    normals = np.asarray(normals, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    if len(normals) == 0:
        return 0.0, np.zeros_like(normals)
    diff = normals - priors
    dot = np.sum(normals * priors, axis=1)
    n = len(normals)
    value = float((np.abs(diff).sum(axis=1) + np.abs(1.0 - dot)).sum() / n)
    grad = (np.sign(diff) - np.sign(1.0 - dot)[:, None] * priors) / n
    grad -= np.sum(grad * normals, axis=1, keepdims=True) * normals
    return value, grad
