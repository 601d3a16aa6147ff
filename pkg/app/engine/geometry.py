"""
Rigid-body math and the pinhole camera model.

Points are numpy arrays with a trailing axis of size 3 (a single point has
shape (3,), a point set (N, 3)). Pixel (i, j) has its center at
(u, v) = (j + 0.5, i + 0.5).
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.spatial.transform import Rotation

from app.core.errors import InvalidPose, NonPositiveDepth

ORTHONORMAL_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R @ x + T (rotation unitless, translation in meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = _frozen(self.rotation)
        translation = _frozen(self.translation).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise InvalidPose(f"Expected 3x3 rotation and 3-vector translation, got {rotation.shape} and {translation.shape}")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise InvalidPose("Pose contains non-finite values")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidPose("Rotation is not orthonormal")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > ORTHONORMAL_TOL:
            raise InvalidPose(f"Rotation determinant is {det:.12f}, expected +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    @classmethod
    def about_axis(cls, axis: str, degrees: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.from_euler(axis, degrees, degrees=True).as_matrix(), translation)

    @classmethod
    def random(cls, rng: np.random.Generator, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(Rotation.random(random_state=rng).as_matrix(), translation)

    def to_dict(self) -> dict:
        return {"R": self.rotation.reshape(-1).tolist(), "T": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(np.asarray(data["R"], dtype=np.float64).reshape(3, 3), data["T"])


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics; focal lengths and principal point in pixels."""

    model_config = ConfigDict(frozen=True)

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @model_validator(mode="after")
    def _check(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("raster size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the raster")
        return self

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)


def as_points(q) -> np.ndarray:
    points = np.asarray(q, dtype=np.float64)
    if points.shape[-1] != 3:
        raise ValueError(f"Expected points with trailing dimension 3, got shape {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("Points must be finite")
    return points


def apply_pose(p: Pose, q) -> np.ndarray:
    """R·q + T for a point (3,) or a point set (N, 3)."""
    points = as_points(q)
    return points @ p.rotation.T + p.translation


def compose(p1: Pose, p2: Pose) -> Pose:
    """Pose equivalent to applying p2 first, then p1."""
    rotation = p1.rotation @ p2.rotation
    return Pose(nearest_rotation(rotation), p1.rotation @ p2.translation + p1.translation)


def invert(p: Pose) -> Pose:
    rotation_t = p.rotation.T
    return Pose(rotation_t, -rotation_t @ p.translation)


def nearest_rotation(matrix) -> np.ndarray:
    """Closest proper rotation in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Frobenius norm of the rotation difference."""
    return float(np.linalg.norm(np.asarray(r1) - np.asarray(r2)))


def project(k: CameraIntrinsics, q) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Camera-frame point(s) to (u, v, d); u, v in pixels, d in meters."""
    points = as_points(q)
    z = points[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("Cannot project a point with z <= 0")
    u = k.fx * points[..., 0] / z + k.cx
    v = k.fy * points[..., 1] / z + k.cy
    return u, v, z.copy() if isinstance(z, np.ndarray) else z


def backproject(k: CameraIntrinsics, u, v, d) -> np.ndarray:
    """Pixel coordinates plus depth back to camera-frame point(s)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise NonPositiveDepth("Cannot backproject a pixel with depth <= 0")
    x = (u - k.cx) * d / k.fx
    y = (v - k.cy) * d / k.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def pixel_centers(height: int, width: int, origin: Tuple[int, int] = (0, 0)) -> Tuple[np.ndarray, np.ndarray]:
    """(u, v) grids of pixel centers; `origin` is the (row, col) of the raster in the full image."""
    rows = np.arange(height, dtype=np.float64) + origin[0] + 0.5
    cols = np.arange(width, dtype=np.float64) + origin[1] + 0.5
    v, u = np.meshgrid(rows, cols, indexing="ij")
    return u, v


def backproject_raster(k: CameraIntrinsics, depth: np.ndarray, valid: np.ndarray,
                       origin: Tuple[int, int] = (0, 0)) -> np.ndarray:
    """Per-pixel camera coordinates (H, W, 3); zero where the pixel is invalid."""
    u, v = pixel_centers(depth.shape[0], depth.shape[1], origin)
    points = np.zeros(depth.shape + (3,), dtype=np.float64)
    if np.any(valid):
        points[valid] = backproject(k, u[valid], v[valid], depth[valid])
    return points
