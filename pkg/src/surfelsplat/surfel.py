"""Gaussian surfels: flat, rank-2 Gaussian primitives with a normal.

A surfel carries 12 scalars (color, center, two in-plane scales, a unit
normal, opacity). Its world-space covariance is ``R diag(sx^2, sy^2, 0) R^T``
with ``R = [n1 n2 n]`` a right-handed frame built around the normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

_POLE_THRESHOLD = 0.9


@dataclass(frozen=True)
class GaussianSurfel:
    color: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    normal: np.ndarray
    opacity: float

    def __post_init__(self):
        for name in ("color", "center", "scale", "normal"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "opacity", float(self.opacity))
        if self.color.shape != (3,) or self.center.shape != (3,):
            raise ValueError("color and center must be 3-vectors")
        if self.scale.shape != (2,) or self.normal.shape != (3,):
            raise ValueError("scale must be a 2-vector and normal a 3-vector")
        if not np.all(self.scale > 0):
            raise ValueError(f"scales must be positive, got {self.scale}")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("normal must have unit length")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color channels must lie in [0, 1]")


@dataclass(frozen=True)
class SurfelFrame:
    n1: np.ndarray
    n2: np.ndarray
    n: np.ndarray

    @property
    def R(self) -> np.ndarray:
        return np.stack([self.n1, self.n2, self.n], axis=1)


def tangent_seed(normals: np.ndarray) -> np.ndarray:
    """Reference axis crossed with the normal to get n1 (z, or y near the poles).

    The y seed makes the frame of n = (0, 0, 1) the identity.
    """
    seed = np.zeros_like(normals)
    near_pole = np.abs(normals[..., 2]) >= _POLE_THRESHOLD
    seed[..., 2] = np.where(near_pole, 0.0, 1.0)
    seed[..., 1] = np.where(near_pole, 1.0, 0.0)
    return seed


def build_frames(normals: np.ndarray):
    """Vectorized frame construction.

    Args:
        normals: (N, 3) unit normals.

    Returns:
        ``(n1, n2, m_norm)`` where ``m_norm`` is the length of the unnormalized
        ``seed x n`` (needed by the backward pass).
    """
    normals = np.asarray(normals, dtype=np.float64)
    seed = tangent_seed(normals)
    m = np.cross(seed, normals)
    m_norm = np.linalg.norm(m, axis=-1)
    n1 = m / m_norm[..., None]
    n2 = np.cross(normals, n1)
    return n1, n2, m_norm


def build_frame(n) -> SurfelFrame:
    n = np.asarray(n, dtype=np.float64)
    if n.shape != (3,) or not np.all(np.isfinite(n)):
        raise ValueError(f"normal must be a finite 3-vector, got {n}")
    length = np.linalg.norm(n)
    if length == 0.0:
        raise ValueError("normal must be nonzero")
    n = n / length
    n1, n2, _ = build_frames(n[None])
    return SurfelFrame(n1=n1[0], n2=n2[0], n=n)


def covariances(scales: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """World covariances for a batch of surfels, shape (N, 3, 3)."""
    n1, n2, _ = build_frames(normals)
    sx2 = scales[:, 0] ** 2
    sy2 = scales[:, 1] ** 2
    return (sx2[:, None, None] * n1[:, :, None] * n1[:, None, :]
            + sy2[:, None, None] * n2[:, :, None] * n2[:, None, :])


def covariance_world(surfel: GaussianSurfel) -> np.ndarray:
    return covariances(surfel.scale[None], surfel.normal[None])[0]


def covariance_from_frame(R: np.ndarray, scale) -> np.ndarray:
    D = np.diag([scale[0] ** 2, scale[1] ** 2, 0.0])
    return R @ D @ R.T


def _frozen(arr, shape_tail, name) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    if out.ndim != 1 + len(shape_tail) or out.shape[1:] != tuple(shape_tail):
        raise ValueError(f"{name} has shape {out.shape}, expected (N, {shape_tail})")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SurfelScene:
    """Ordered surfel set in structure-of-arrays layout.

    Index order is stable: gradients and prior normals are addressed by it.
    """

    colors: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    normals: np.ndarray
    opacities: np.ndarray
    prior_normals: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "colors", _frozen(self.colors, (3,), "colors"))
        object.__setattr__(self, "centers", _frozen(self.centers, (3,), "centers"))
        object.__setattr__(self, "scales", _frozen(self.scales, (2,), "scales"))
        object.__setattr__(self, "normals", _frozen(self.normals, (3,), "normals"))
        op = np.array(self.opacities, dtype=np.float64).reshape(-1)
        op.setflags(write=False)
        object.__setattr__(self, "opacities", op)
        n = len(self.centers)
        if not (len(self.colors) == len(self.scales) == len(self.normals) == len(op) == n):
            raise ValueError("surfel attribute arrays have mismatched lengths")
        if self.prior_normals is not None:
            object.__setattr__(self, "prior_normals",
                               _frozen(self.prior_normals, (3,), "prior_normals"))
            if len(self.prior_normals) != n:
                raise ValueError("prior_normals length mismatch")

    def __len__(self) -> int:
        return len(self.centers)

    def __getitem__(self, i: int) -> GaussianSurfel:
        return GaussianSurfel(self.colors[i], self.centers[i], self.scales[i],
                              self.normals[i], self.opacities[i])

    @classmethod
    def from_surfels(cls, surfels: Iterable[GaussianSurfel],
                     prior_normals: Optional[Sequence] = None) -> "SurfelScene":
        surfels = list(surfels)
        if not surfels:
            return cls.empty()
        return cls(
            colors=np.stack([s.color for s in surfels]),
            centers=np.stack([s.center for s in surfels]),
            scales=np.stack([s.scale for s in surfels]),
            normals=np.stack([s.normal for s in surfels]),
            opacities=np.array([s.opacity for s in surfels]),
            prior_normals=None if prior_normals is None else np.asarray(prior_normals),
        )

    @classmethod
    def empty(cls) -> "SurfelScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                   np.zeros((0, 3)), np.zeros(0))

    def replace(self, **changes) -> "SurfelScene":
        values = {
            "colors": self.colors, "centers": self.centers, "scales": self.scales,
            "normals": self.normals, "opacities": self.opacities,
            "prior_normals": self.prior_normals,
        }
        values.update(changes)
        return SurfelScene(**values)

    def permuted(self, order) -> "SurfelScene":
        order = np.asarray(order)
        return SurfelScene(
            self.colors[order], self.centers[order], self.scales[order],
            self.normals[order], self.opacities[order],
            None if self.prior_normals is None else self.prior_normals[order],
        )

    def validate(self, tol: float = 1e-9) -> None:
        if np.any(self.scales <= 0):
            raise ValueError("non-positive surfel scale")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > tol):
            raise ValueError("non-unit surfel normal")
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacity outside [0, 1]")
