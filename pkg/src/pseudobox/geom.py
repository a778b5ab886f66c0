"""Camera model, pose algebra, and projection.

Coordinate conventions used throughout the package:

- World frame: right-handed, z up, meters.
- Camera frame: +z forward (optical axis), +x right, +y down.
- Pose maps world to camera:  x_cam = R @ x_world + t.
- Image frame: u right, v down, pixels, origin at the top-left.
- 2D box membership is closed on all four edges.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, NonPositiveDepth

# Depth below this counts as "behind the camera" for projection.
MIN_PROJECTION_DEPTH = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. No lens distortion is modeled."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=float
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid world-to-camera transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, point_world: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point_world, dtype=float) + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Pose equivalent to applying `other` first, then self."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass(frozen=True)
class Point3:
    """World-frame point, meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.z)):
            raise ValueError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @staticmethod
    def from_array(a) -> "Point3":
        a = np.asarray(a, dtype=float).reshape(3)
        return Point3(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Pixel2:
    """Continuous pixel coordinates."""

    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("pixel coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box, pixels."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("2D box must have positive extent")

    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """Calibrated camera at one timestamp."""

    frame_id: int
    intrinsics: CameraIntrinsics
    pose: Pose


def project(pose: Pose, point: Point3, k: CameraIntrinsics) -> Pixel2:
    """Project a world point into the image.

    Raises BehindCamera when the camera-frame depth is <= 1e-6 m.
    """
    p_cam = pose.apply(point.as_array())
    z = p_cam[2]
    if z <= MIN_PROJECTION_DEPTH:
        raise BehindCamera(f"point has camera-frame depth {z:.3g} m")
    return Pixel2(k.fx * p_cam[0] / z + k.cx, k.fy * p_cam[1] / z + k.cy)


def backproject(pose: Pose, pixel: Pixel2, depth: float, k: CameraIntrinsics) -> Point3:
    """Invert `project` along the pixel's viewing ray at the given camera-frame depth."""
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    p_cam = np.array(
        [(pixel.u - k.cx) / k.fx * depth, (pixel.v - k.cy) / k.fy * depth, depth], dtype=float
    )
    return Point3.from_array(pose.rotation.T @ (p_cam - pose.translation))


def pixel_in_box(p: Pixel2, b: Box2D) -> bool:
    """Closed-box membership: edges and corners count as inside."""
    return b.u_min <= p.u <= b.u_max and b.v_min <= p.v <= b.v_max


def project_array(pose: Pose, points_world: np.ndarray, k: CameraIntrinsics):
    """Batch projection without the behind-camera check.

    Returns (uv, z): uv has shape (n, 2) and z shape (n,). Entries with
    z <= MIN_PROJECTION_DEPTH carry meaningless uv values; callers must
    filter on z themselves.
    """
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    p_cam = pts @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    safe_z = np.where(np.abs(z) > MIN_PROJECTION_DEPTH, z, 1.0)
    uv = np.empty((len(pts), 2), dtype=float)
    uv[:, 0] = k.fx * p_cam[:, 0] / safe_z + k.cx
    uv[:, 1] = k.fy * p_cam[:, 1] / safe_z + k.cy
    return uv, z
