"""Synthetic two-view problems and depth-driven surfel initialization.

Presets are analytic surfaces expressed in the view-1 camera frame. They are
ray-cast on a pixel grid into surfels, then both views are rendered with the
same rasterizer used for optimization, so observations are exactly
reproducible from the ground-truth scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, CameraPose, se3_exp
from .losses import warp_depth
from .raster import RasterConfig, render
from .surfel import SurfelScene

PRESETS = ("plane", "two-planes", "sphere-patch", "textured-box-corner")
TEXTURES = ("checker", "perlin", "image")


class DegenerateSceneError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSceneSpec:
    preset: str = "two-planes"
    texture: str = "perlin"
    texture_path: Optional[str] = None
    texture_scale: float = 1.5
    width: int = 48
    height: int = 48
    resolution: int = 48            # surfels per image row at stride 1
    focal_scale: float = 1.0        # truth f = focal_scale * image size
    baseline: tuple = (0.25, 0.0, 0.0)
    rotation_deg: tuple = (0.0, 3.0, 0.0)
    depth_noise: float = 0.0        # relative, applied to the initial scene
    normal_noise: float = 0.0       # radians
    opacity: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {PRESETS}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; choose from {TEXTURES}")
        if self.texture == "image" and not self.texture_path:
            raise ValueError("image texture needs texture_path")
        if self.resolution < 8 or self.width < 8 or self.height < 8:
            raise ValueError("resolution and image size must be at least 8")

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSceneSpec":
        data = dict(data)
        for key in ("baseline", "rotation_deg"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["baseline"] = list(self.baseline)
        out["rotation_deg"] = list(self.rotation_deg)
        return out


@dataclass
class SyntheticBundle:
    spec: SyntheticSceneSpec
    scene_truth: SurfelScene
    scene_init: SurfelScene
    K_truth: CameraIntrinsics
    T_truth: CameraPose
    I1: np.ndarray
    I2: np.ndarray
    D1: np.ndarray
    D2: np.ndarray
    A1: np.ndarray = field(default=None)
    A2: np.ndarray = field(default=None)
    overlap: float = 0.0


# -- textures ---------------------------------------------------------------

def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


class PerlinNoise3D:
    """Classic gradient noise on a seeded permutation lattice."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        perm = rng.permutation(256)
        self.perm = np.concatenate([perm, perm])
        g = rng.normal(size=(256, 3))
        self.grads = g / np.linalg.norm(g, axis=1, keepdims=True)

    def _hash(self, ix, iy, iz):
        p = self.perm
        return p[p[p[ix & 255] + (iy & 255)] + (iz & 255)]

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        base = np.floor(pts).astype(np.int64)
        frac = pts - base
        fx, fy, fz = (_fade(frac[:, k]) for k in range(3))
        total = np.zeros(len(pts))
        for dx in (0, 1):
            wx = fx if dx else 1 - fx
            for dy in (0, 1):
                wy = fy if dy else 1 - fy
                for dz in (0, 1):
                    wz = fz if dz else 1 - fz
                    h = self._hash(base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz)
                    offset = frac - np.array([dx, dy, dz])
                    total += wx * wy * wz * np.sum(self.grads[h] * offset, axis=1)
        return total


def _texture_colors(spec: SyntheticSceneSpec, points: np.ndarray, pixels: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    scale = spec.texture_scale
    if spec.texture == "checker":
        cells = np.floor(points * scale * 2.0).astype(np.int64)
        parity = (cells.sum(axis=1) % 2).astype(np.float64)
        tint = rng.uniform(0.2, 0.8, (2, 3))
        return tint[0] * (1 - parity[:, None]) + tint[1] * parity[:, None]
    if spec.texture == "perlin":
        out = np.empty((len(points), 3))
        for ch in range(3):
            noise = PerlinNoise3D(int(rng.integers(1 << 31)))
            val = noise(points * scale) + 0.5 * noise(points * scale * 2.0 + 17.0)
            out[:, ch] = 0.5 + 0.9 * val
        return np.clip(out, 0.0, 1.0)
    from .io import read_image
    img = read_image(spec.texture_path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    H, W = img.shape[:2]
    u = np.clip(np.rint(pixels[:, 0] / spec.width * (W - 1)).astype(int), 0, W - 1)
    v = np.clip(np.rint(pixels[:, 1] / spec.height * (H - 1)).astype(int), 0, H - 1)
    return np.clip(img[v, u, :3], 0.0, 1.0)


# -- geometry ---------------------------------------------------------------

# Surfaces are kept generic: surfels at exactly equal depth flip their blend
# order under arbitrarily small parameter changes. On a plane with normal n,
# grid samples (du, dv) apart tie when n_x du + n_y dv = 0, so the in-plane
# tilt ratios avoid small-integer fractions, and the sphere sits off-axis to
# break its mirror symmetry.
_BOX_TILT = se3_exp(np.array([0.12, -0.15, 0.05, 0.0, 0.0, 0.0])).rotation


def _plane_hit(rays, point, normal):
    denom = rays @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (point @ normal) / denom
    t = np.where((np.abs(denom) > 1e-9) & (t > 0), t, np.inf)
    return t


def _raycast(preset: str, rays: np.ndarray):
    """Hit depth (ray z is 1, so t equals depth) and unit normal per ray."""
    n = len(rays)
    if preset == "plane":
        normal = np.array([0.25, -0.137, -1.0])
        normal /= np.linalg.norm(normal)
        t = _plane_hit(rays, np.array([0.0, 0.0, 3.0]), normal)
        return t, np.tile(normal, (n, 1))
    if preset == "two-planes":
        back_n = np.array([0.1, 0.163, -1.0])
        back_n /= np.linalg.norm(back_n)
        t_back = _plane_hit(rays, np.array([0.0, 0.0, 3.6]), back_n)
        front_n = np.array([-0.2, 0.137, -1.0])
        front_n /= np.linalg.norm(front_n)
        t_front = _plane_hit(rays, np.array([0.0, 0.0, 2.4]), front_n)
        hit = rays * t_front[:, None]
        # front card covers the left part of the view
        inside = (hit[:, 0] < -0.05) & (np.abs(hit[:, 1]) < 0.55)
        t_front = np.where(inside, t_front, np.inf)
        use_front = t_front < t_back
        t = np.where(use_front, t_front, t_back)
        normals = np.where(use_front[:, None], front_n, back_n)
        return t, normals
    if preset == "sphere-patch":
        center = np.array([0.083, -0.061, 4.2])
        radius = 1.6
        # |t r - c|^2 = R^2
        a = np.sum(rays * rays, axis=1)
        b = -2.0 * rays @ center
        c = center @ center - radius ** 2
        disc = b * b - 4 * a * c
        t_sphere = np.where(disc >= 0, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), np.inf)
        back_n = np.array([0.12, -0.0917, -1.0])
        back_n /= np.linalg.norm(back_n)
        t_back = _plane_hit(rays, np.array([0.0, 0.0, 4.6]), back_n)
        use_sphere = t_sphere < t_back
        t = np.where(use_sphere, t_sphere, t_back)
        pts = rays * np.where(np.isfinite(t), t, 0.0)[:, None]
        sn = (pts - center) / radius
        normals = np.where(use_sphere[:, None], sn, back_n)
        return t, normals
    # inside corner of a box: nearest of three walls, turned off-axis
    walls = [
        (np.array([0.9, 0.0, 0.0]), _BOX_TILT @ np.array([-1.0, 0.0, 0.0])),
        (np.array([0.0, 0.8, 0.0]), _BOX_TILT @ np.array([0.0, -1.0, 0.0])),
        (np.array([0.0, 0.0, 3.4]), _BOX_TILT @ np.array([0.0, 0.0, -1.0])),
    ]
    ts = np.stack([_plane_hit(rays, p, nrm) for p, nrm in walls], axis=1)
    k = np.argmin(ts, axis=1)
    t = ts[np.arange(n), k]
    normals = np.stack([nrm for _, nrm in walls])[k]
    return t, normals


def _orient_toward_camera(normals: np.ndarray, points: np.ndarray) -> np.ndarray:
    flip = np.sum(normals * points, axis=1) > 0
    normals = np.where(flip[:, None], -normals, normals)
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def truth_intrinsics(spec: SyntheticSceneSpec) -> CameraIntrinsics:
    return CameraIntrinsics(spec.focal_scale * spec.width, spec.focal_scale * spec.height,
                            0.5 * spec.width, 0.5 * spec.height, spec.width, spec.height)


def truth_pose(spec: SyntheticSceneSpec) -> CameraPose:
    omega = np.radians(np.asarray(spec.rotation_deg, dtype=np.float64))
    R = se3_exp(np.concatenate([omega, np.zeros(3)])).rotation
    # camera 2 center sits at ``baseline`` in the view-1 frame
    center = np.asarray(spec.baseline, dtype=np.float64)
    return CameraPose(R, -R @ center)


def footprint_scale(depth: np.ndarray, stride: float, focal: float, factor: float = 0.6):
    return factor * depth * stride / focal


def build_truth_scene(spec: SyntheticSceneSpec, K: CameraIntrinsics,
                      rng: np.random.Generator) -> SurfelScene:
    n = spec.resolution
    stride_x = spec.width / n
    stride_y = spec.height / round(n * spec.height / spec.width)
    # a thin margin keeps the image borders fully covered
    us = np.arange(-2.0 * stride_x, spec.width + 2.0 * stride_x, stride_x)
    vs = np.arange(-2.0 * stride_y, spec.height + 2.0 * stride_y, stride_y)
    uu, vv = np.meshgrid(us, vs)
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    rays = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy,
                     np.ones(len(pixels))], axis=1)
    t, normals = _raycast(spec.preset, rays)
    hit = np.isfinite(t) & (t > K.near)
    rays, t, normals, pixels = rays[hit], t[hit], normals[hit], pixels[hit]
    points = rays * t[:, None]
    normals = _orient_toward_camera(normals, points)
    colors = _texture_colors(spec, points, pixels, rng)
    s = footprint_scale(t, max(stride_x, stride_y), math.sqrt(K.fx * K.fy))
    return SurfelScene(colors=colors, centers=points, scales=np.stack([s, s], axis=1),
                       normals=normals, opacities=np.full(len(t), spec.opacity))


def init_surfels_from_depth(image: np.ndarray, depth: np.ndarray, K: CameraIntrinsics,
                            stride: int = 1, opacity: float = 0.9,
                            scale_factor: float = 0.4) -> SurfelScene:
    """One surfel per sampled valid pixel, back-projected through ``K``.

    Normals come from central differences of the back-projected point map and
    face the camera; scales are isotropic and cover the pixel footprint.
    ``scale_factor`` trades coverage against blur: at 0.4 the rendered alpha
    stays above 0.95 while neighboring surfels bleed little into each pixel.
    """
    depth = np.asarray(depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    H, W = depth.shape
    valid = np.isfinite(depth) & (depth > 0)
    if not valid.any():
        raise ValueError("depth map has no valid pixels")
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    rays = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=2)
    points = rays * np.where(valid, depth, 0.0)[..., None]

    dPu = np.gradient(points, axis=1)
    dPv = np.gradient(points, axis=0)
    normals = np.cross(dPu, dPv)
    length = np.linalg.norm(normals, axis=2)
    fallback = -rays / np.linalg.norm(rays, axis=2, keepdims=True)
    # neighbors across invalid pixels give garbage derivatives
    nb_ok = valid.copy()
    nb_ok[:, 1:] &= valid[:, :-1]
    nb_ok[:, :-1] &= valid[:, 1:]
    nb_ok[1:, :] &= valid[:-1, :]
    nb_ok[:-1, :] &= valid[1:, :]
    good = nb_ok & (length > 1e-12)
    normals = np.where(good[..., None], normals / np.maximum(length, 1e-300)[..., None], fallback)

    sel = np.zeros_like(valid)
    sel[::stride, ::stride] = True
    sel &= valid
    pts = points[sel]
    nrm = _orient_toward_camera(normals[sel], pts)
    d = depth[sel]
    s = footprint_scale(d, stride, math.sqrt(K.fx * K.fy), scale_factor)
    return SurfelScene(colors=np.clip(image[sel][:, :3], 0.0, 1.0), centers=pts,
                       scales=np.stack([s, s], axis=1), normals=nrm,
                       opacities=np.full(len(d), opacity))


def perturb_scene(scene: SurfelScene, depth_noise: float, normal_noise: float,
                  rng: np.random.Generator) -> SurfelScene:
    """Scale centers along their view-1 rays and jitter normals."""
    if depth_noise == 0 and normal_noise == 0:
        return scene
    factor = 1.0 + depth_noise * rng.standard_normal(len(scene))
    centers = scene.centers * factor[:, None]
    normals = scene.normals + normal_noise * rng.standard_normal(scene.normals.shape)
    normals = _orient_toward_camera(normals, centers)
    return scene.replace(centers=centers, normals=normals)


def overlap_fraction(D1, D2, K, T, valid2=None) -> float:
    warp = warp_depth(D2, K, T, valid2)
    covered = warp.mask & (D1 > 0)
    return float(covered.sum()) / max(int((D1 > 0).sum()), 1)


def generate_synthetic(spec: SyntheticSceneSpec,
                       cfg: Optional[RasterConfig] = None) -> SyntheticBundle:
    cfg = cfg or RasterConfig()
    rng = np.random.default_rng(spec.seed)
    K = truth_intrinsics(spec)
    T = truth_pose(spec)
    scene = build_truth_scene(spec, K, rng)
    if len(scene) == 0:
        raise DegenerateSceneError("preset produced no surfels inside the view")
    view1 = render(scene, K, CameraPose.identity(), cfg)
    view2 = render(scene, K, T, cfg)
    overlap = overlap_fraction(view1.depth, view2.depth, K, T, view2.alpha > 0.5)
    if overlap <= 0.0:
        raise DegenerateSceneError(f"views do not overlap (overlap fraction {overlap:.3f})")
    init = perturb_scene(scene, spec.depth_noise, spec.normal_noise, rng)
    return SyntheticBundle(spec=spec, scene_truth=scene, scene_init=init, K_truth=K,
                           T_truth=T, I1=view1.color, I2=view2.color, D1=view1.depth,
                           D2=view2.depth, A1=view1.alpha, A2=view2.alpha, overlap=overlap)
