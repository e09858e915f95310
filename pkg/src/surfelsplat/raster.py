"""Tile-based forward splatting of surfels into RGB, depth and alpha.

Surfels are projected with the affine (EWA) approximation, sorted once per
view by camera depth, and alpha-composited front to back. Each tile keeps the
blend records (surfel ids, alphas, transmittance) that the backward pass
walks in reverse.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose
from .surfel import SurfelScene, build_frames

logger = logging.getLogger(__name__)

ALPHA_MAX = 0.99


@dataclass(frozen=True)
class RasterConfig:
    tile_size: int = 8
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    dilation: float = 0.3
    support_sigma: float = 3.0
    threads: int = 1

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        if not 0 < self.alpha_cutoff < 1:
            raise ValueError("alpha_cutoff must lie in (0, 1)")
        if not 0 < self.transmittance_min < 1:
            raise ValueError("transmittance_min must lie in (0, 1)")
        if self.dilation < 0:
            raise ValueError("dilation must be non-negative")
        if self.support_sigma <= 0:
            raise ValueError("support_sigma must be positive")

    def fingerprint(self) -> tuple:
        # threads and tile size do not change the output
        return (self.alpha_cutoff, self.transmittance_min, self.dilation, self.support_sigma)


@dataclass
class Projection:
    """Per-surfel projected quantities, cached for the backward pass."""

    mu_cam: np.ndarray      # (N, 3)
    uv: np.ndarray          # (N, 2)
    J: np.ndarray           # (N, 2, 3)
    cov_world: np.ndarray   # (N, 3, 3)
    cov_cam: np.ndarray     # (N, 3, 3)
    cov2d: np.ndarray       # (N, 2, 2) before dilation
    conic: np.ndarray       # (N, 2, 2) inverse of the dilated covariance
    radius: np.ndarray      # (N,) pixel support radius
    valid: np.ndarray       # (N,) bool
    n1: np.ndarray
    n2: np.ndarray
    m_norm: np.ndarray
    nonfinite: int = 0

    @property
    def depth(self) -> np.ndarray:
        return self.mu_cam[:, 2]


@dataclass
class TileRecord:
    y0: int
    y1: int
    x0: int
    x1: int
    ids: np.ndarray         # (M,) surfel indices in blend order
    alpha: np.ndarray       # (M, P) effective alpha (0 where skipped)
    trans: np.ndarray       # (M, P) transmittance before each contributor
    active: np.ndarray      # (M, P) bool
    clamped: np.ndarray     # (M, P) bool, alpha hit ALPHA_MAX


@dataclass
class RenderOutput:
    color: np.ndarray       # (H, W, 3)
    depth: np.ndarray       # (H, W)
    alpha: np.ndarray       # (H, W)
    projection: Projection
    tiles: List[TileRecord]
    fingerprint: str
    warnings: List[str] = field(default_factory=list)

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]

    def _tile_of(self, y: int, x: int) -> TileRecord:
        for tile in self.tiles:
            if tile.y0 <= y < tile.y1 and tile.x0 <= x < tile.x1:
                return tile
        raise IndexError(f"pixel ({y}, {x}) outside the image")

    def contributors(self, y: int, x: int):
        """Blend records of one pixel: ``(ids, alphas, transmittances)``."""
        tile = self._tile_of(y, x)
        col = (y - tile.y0) * (tile.x1 - tile.x0) + (x - tile.x0)
        act = tile.active[:, col]
        return tile.ids[act], tile.alpha[act, col], tile.trans[act, col]

    def contributor_table(self, pad: int = -1) -> np.ndarray:
        """(H, W, K) surfel ids per pixel in blend order, right-padded."""
        H, W = self.height, self.width
        per_pixel = np.zeros((H, W), dtype=np.int64)
        entries = []
        for tile in self.tiles:
            p, m = np.nonzero(tile.active.T)
            tw = tile.x1 - tile.x0
            ys = tile.y0 + p // tw
            xs = tile.x0 + p % tw
            np.add.at(per_pixel, (ys, xs), 1)
            entries.append((ys, xs, tile.ids[m]))
        depth = int(per_pixel.max()) if per_pixel.size else 0
        table = np.full((H, W, max(depth, 1)), pad, dtype=np.int64)
        for ys, xs, ids in entries:
            if len(ids) == 0:
                continue
            flat = ys * W + xs
            # entries are grouped by pixel in blend order; slot = rank within group
            starts = np.r_[0, np.flatnonzero(np.diff(flat)) + 1]
            slot = np.arange(len(flat)) - np.repeat(starts, np.diff(np.r_[starts, len(flat)]))
            table[ys, xs, slot] = ids
        return table


def render_fingerprint(scene: SurfelScene, K: CameraIntrinsics, pose: CameraPose,
                       cfg: RasterConfig) -> str:
    h = hashlib.blake2b(digest_size=16)
    for arr in (scene.colors, scene.centers, scene.scales, scene.normals, scene.opacities,
                K.params, pose.rotation, pose.translation):
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    h.update(repr((K.width, K.height, K.near, K.far, cfg.fingerprint())).encode())
    return h.hexdigest()


def splat_alpha(cov2d, mu, opacity: float, pixel, dilation: float = 0.3) -> float:
    """Opacity-weighted 2D Gaussian at one pixel, clamped to [0, ALPHA_MAX]."""
    A = np.asarray(cov2d, dtype=np.float64) + dilation * np.eye(2)
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    q = float(d @ np.linalg.solve(A, d))
    return float(np.clip(opacity * np.exp(-0.5 * q), 0.0, ALPHA_MAX))


def project_scene(scene: SurfelScene, K: CameraIntrinsics, pose: CameraPose,
                  cfg: RasterConfig) -> Projection:
    W = pose.rotation
    mu_cam = scene.centers @ W.T + pose.translation
    x, y, d = mu_cam[:, 0], mu_cam[:, 1], mu_cam[:, 2]
    valid = d > K.near
    d_safe = np.where(valid, d, 1.0)

    uv = np.stack([K.fx * x / d_safe + K.cx, K.fy * y / d_safe + K.cy], axis=1)
    J = np.zeros((len(d), 2, 3))
    J[:, 0, 0] = K.fx / d_safe
    J[:, 0, 2] = -K.fx * x / d_safe ** 2
    J[:, 1, 1] = K.fy / d_safe
    J[:, 1, 2] = -K.fy * y / d_safe ** 2

    n1, n2, m_norm = build_frames(scene.normals)
    sx2 = scene.scales[:, 0] ** 2
    sy2 = scene.scales[:, 1] ** 2
    cov_world = (sx2[:, None, None] * n1[:, :, None] * n1[:, None, :]
                 + sy2[:, None, None] * n2[:, :, None] * n2[:, None, :])
    cov_cam = W @ cov_world @ W.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))

    a = cov2d[:, 0, 0] + cfg.dilation
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + cfg.dilation
    det = a * c - b * b
    finite = np.isfinite(a) & np.isfinite(b) & np.isfinite(c) & np.isfinite(uv).all(axis=1)
    nonfinite = int(np.count_nonzero(valid & ~finite))
    valid &= finite & (det > 0)
    det_safe = np.where(valid, det, 1.0)
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det_safe
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det_safe
    conic[:, 1, 1] = a / det_safe

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = cfg.support_sigma * np.sqrt(np.where(valid, lam_max, 0.0))

    # off-screen: no pixel center inside the support box
    u, v = uv[:, 0], uv[:, 1]
    x_lo, x_hi = np.ceil(u - radius), np.floor(u + radius)
    y_lo, y_hi = np.ceil(v - radius), np.floor(v + radius)
    on_screen = (x_hi >= 0) & (x_lo <= K.width - 1) & (y_hi >= 0) & (y_lo <= K.height - 1)
    valid &= on_screen & (x_lo <= x_hi) & (y_lo <= y_hi)

    return Projection(mu_cam=mu_cam, uv=uv, J=J, cov_world=cov_world, cov_cam=cov_cam,
                      cov2d=cov2d, conic=conic, radius=radius, valid=valid,
                      n1=n1, n2=n2, m_norm=m_norm, nonfinite=nonfinite)


def blend_order(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Valid surfel ids sorted by depth, ties broken by index."""
    idx = np.flatnonzero(valid)
    return idx[np.lexsort((idx, depth[idx]))]


def _tile_grid(height: int, width: int, size: int):
    for y0 in range(0, height, size):
        for x0 in range(0, width, size):
            yield y0, min(y0 + size, height), x0, min(x0 + size, width)


def _rasterize_tile(bounds, order, proj: Projection, opacities: np.ndarray,
                    cfg: RasterConfig) -> TileRecord:
    y0, y1, x0, x1 = bounds
    u, v = proj.uv[order, 0], proj.uv[order, 1]
    r = proj.radius[order]
    hit = (u + r >= x0) & (u - r <= x1 - 1) & (v + r >= y0) & (v - r <= y1 - 1)
    ids = order[hit]

    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.reshape(-1).astype(np.float64)
    py = ys.reshape(-1).astype(np.float64)
    dx = px[None, :] - proj.uv[ids, 0][:, None]
    dy = py[None, :] - proj.uv[ids, 1][:, None]
    Q = proj.conic[ids]
    q = Q[:, 0, 0, None] * dx * dx + 2.0 * Q[:, 0, 1, None] * dx * dy + Q[:, 1, 1, None] * dy * dy
    raw = opacities[ids][:, None] * np.exp(-0.5 * q)
    clamped = raw > ALPHA_MAX
    alpha = np.minimum(raw, ALPHA_MAX)
    keep = (q <= cfg.support_sigma ** 2) & (alpha >= cfg.alpha_cutoff)
    alpha = np.where(keep, alpha, 0.0)

    trans = np.empty_like(alpha)
    if len(ids):
        trans[0] = 1.0
        np.cumprod(1.0 - alpha[:-1], axis=0, out=trans[1:])
    active = keep & (trans >= cfg.transmittance_min)
    alpha = np.where(active, alpha, 0.0)
    # rows with no active pixel only ever add exact zeros downstream
    used = active.any(axis=1)
    if not used.all():
        ids, alpha, trans = ids[used], alpha[used], trans[used]
        active, clamped = active[used], clamped[used]
    return TileRecord(y0, y1, x0, x1, ids, alpha, trans, active, clamped & active)


def render(scene: SurfelScene, K: CameraIntrinsics, pose: CameraPose,
           cfg: Optional[RasterConfig] = None) -> RenderOutput:
    """Composite the scene into ``(H, W, 3)`` color, depth and alpha images."""
    cfg = cfg or RasterConfig()
    H, W = K.height, K.width
    proj = project_scene(scene, K, pose, cfg)
    order = blend_order(proj.depth, proj.valid)
    warnings = []
    if proj.nonfinite:
        warnings.append(f"skipped {proj.nonfinite} surfels with non-finite projections")
    if len(order) == 0:
        warnings.append("no visible surfels; output is background only")
        logger.warning("render: no visible surfels")

    bounds = list(_tile_grid(H, W, cfg.tile_size))
    work = lambda b: _rasterize_tile(b, order, proj, scene.opacities, cfg)  # noqa: E731
    if cfg.threads != 1 and len(bounds) > 1:
        workers = cfg.threads if cfg.threads > 0 else None
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tiles = list(pool.map(work, bounds))
    else:
        tiles = [work(b) for b in bounds]

    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    colors = scene.colors
    d = proj.depth
    for t in tiles:
        w = t.alpha * t.trans
        h, wd = t.y1 - t.y0, t.x1 - t.x0
        # axis-0 sums accumulate contributors in blend order for every pixel,
        # so the result does not depend on the tile shape (a matmul would)
        color[t.y0:t.y1, t.x0:t.x1] = (w[:, :, None] * colors[t.ids][:, None, :]).sum(axis=0).reshape(h, wd, 3)
        depth[t.y0:t.y1, t.x0:t.x1] = (w * d[t.ids][:, None]).sum(axis=0).reshape(h, wd)
        alpha[t.y0:t.y1, t.x0:t.x1] = w.sum(axis=0).reshape(h, wd)

    return RenderOutput(color=color, depth=depth, alpha=alpha, projection=proj, tiles=tiles,
                        fingerprint=render_fingerprint(scene, K, pose, cfg), warnings=warnings)


def composite_reference(alphas, values):
    """Sequential front-to-back compositing of one pixel stack.

    Returns ``(value, accumulated_alpha)``; a plain loop used as a test oracle.
    """
    T = 1.0
    acc = np.zeros_like(np.asarray(values[0], dtype=np.float64)) if len(values) else 0.0
    for a, val in zip(alphas, values):
        acc = acc + np.asarray(val, dtype=np.float64) * a * T
        T *= 1.0 - a
    return acc, 1.0 - T
