"""Pinhole camera geometry: depth unprojection, projection, view merging.

All arithmetic here is float64. Pixel convention: ``u`` is the column index,
``v`` the row index, both zero-based at pixel centres. Invalid depth is coded
as ``depth <= 0`` and an invalid point as a NaN triple.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import BehindCameraError, EmptySceneError, InvalidArgumentError, InvalidCameraError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.all(np.isfinite(self.R)) or not np.all(np.isfinite(self.t)):
            raise InvalidCameraError("camera pose contains non-finite values")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > _ORTHO_TOL:
            raise InvalidCameraError("R is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > _ORTHO_TOL:
            raise InvalidCameraError("det(R) != +1")

    def as_numbers(self) -> list[float]:
        """The 16 numbers fx fy cx cy R(row-major) t used by the manifest."""
        return [float(self.fx), float(self.fy), float(self.cx), float(self.cy),
                *map(float, self.R.ravel()), *map(float, self.t)]

    @classmethod
    def from_numbers(cls, numbers: Sequence[float]) -> "CameraModel":
        if len(numbers) != 16:
            raise InvalidArgumentError(f"expected 16 camera numbers, got {len(numbers)}")
        return cls(numbers[0], numbers[1], numbers[2], numbers[3],
                   np.array(numbers[4:13]).reshape(3, 3), np.array(numbers[13:16]))


def look_at_rotation(forward: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for an OpenCV camera (x right, y down, z forward)."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    n = np.linalg.norm(right)
    if n < 1e-9:
        raise InvalidArgumentError("forward direction is parallel to up")
    right /= n
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def pixel_rays(cam: CameraModel, height: int, width: int) -> np.ndarray:
    """Camera-frame rays K^-1 [u, v, 1] for every pixel, shape (H, W, 3), z == 1."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    x = (u - cam.cx) / cam.fx
    y = (v - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def unproject(depth: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Lift a depth map to a world-frame point map of shape (H, W, 3).

    Each valid pixel becomes ``R @ (D(u, v) * K^-1 [u, v, 1]) + t``; pixels
    with non-positive or non-finite depth become NaN triples.
    """
    if cam.fx == 0 or cam.fy == 0:
        raise InvalidCameraError("K is not invertible (zero focal length)")
    cam.validate()
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2 or depth.size == 0:
        raise InvalidArgumentError(f"depth must be a non-empty 2-D grid, got shape {depth.shape}")
    H, W = depth.shape
    valid = np.isfinite(depth) & (depth > 0)
    cam_pts = pixel_rays(cam, H, W) * np.where(valid, depth, 0.0)[..., None]
    world = cam_pts @ cam.R.T + cam.t
    world[~valid] = np.nan
    return world


def project(point, cam: CameraModel) -> tuple[float, float, float]:
    """Inverse of :func:`unproject` for a single world point -> (u, v, depth)."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(p)):
        raise InvalidArgumentError("point must be finite")
    pc = cam.R.T @ (p - cam.t)
    if pc[2] <= 1e-9:
        raise BehindCameraError(f"point is behind the camera (z_cam={pc[2]:.3g})")
    return (cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy, float(pc[2]))


def project_many(points: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Vectorised :func:`project`; returns (N, 3) of (u, v, depth). No behind-camera check."""
    pc = (np.asarray(points, dtype=np.float64) - cam.t) @ cam.R
    return np.stack([cam.fx * pc[:, 0] / pc[:, 2] + cam.cx,
                     cam.fy * pc[:, 1] / pc[:, 2] + cam.cy, pc[:, 2]], axis=1)


def valid_mask(point_map: np.ndarray) -> np.ndarray:
    return ~np.any(np.isnan(point_map), axis=-1)


def merge_views(views: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate valid points of all views (view order, then row-major)."""
    if len(views) == 0:
        raise InvalidArgumentError("merge_views needs at least one view")
    chunks = [pm.reshape(-1, 3)[valid_mask(pm).ravel()] for pm in views]
    return np.concatenate(chunks, axis=0).astype(np.float64, copy=False)


@dataclass(frozen=True)
class NormStats:
    centroid: np.ndarray
    scale: float
    degenerate: bool = False


def normalize_views(views: Sequence[np.ndarray]) -> tuple[list[np.ndarray], NormStats]:
    """Shift the union of valid points to its centroid and divide by the max axis extent."""
    pts = merge_views(views)
    if len(pts) == 0:
        raise EmptySceneError("scene has no valid points")
    centroid = pts.mean(axis=0)
    extent = float((pts.max(axis=0) - pts.min(axis=0)).max())
    degenerate = extent <= 0.0
    scale = 1.0 if degenerate else extent
    stats = NormStats(centroid=centroid, scale=scale, degenerate=degenerate)
    # NaN propagates through the arithmetic, so invalid pixels stay invalid.
    return [(np.asarray(pm, dtype=np.float64) - centroid) / scale for pm in views], stats


def denormalize_views(views: Sequence[np.ndarray], stats: NormStats) -> list[np.ndarray]:
    return [np.asarray(pm, dtype=np.float64) * stats.scale + stats.centroid for pm in views]


def voxel_coverage(points: np.ndarray, cell: float) -> set[tuple[int, int, int]]:
    """Distinct integer voxel keys ``floor(p / cell)`` touched by ``points``."""
    if not cell > 0:
        raise InvalidArgumentError(f"cell must be positive, got {cell}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    keys = np.floor(pts / cell).astype(np.int64)
    return set(map(tuple, np.unique(keys, axis=0).tolist()))
