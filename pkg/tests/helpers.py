"""Shared builders for randomized test inputs."""

from __future__ import annotations

import numpy as np

from pseudobox.geom import CameraFrame, CameraIntrinsics, Pose


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation from a normalized quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_pose(rng: np.random.Generator, translation_scale: float = 5.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-translation_scale, translation_scale, size=3))


def simple_intrinsics(fx=100.0, fy=100.0, cx=960.0, cy=640.0, width=1920, height=1280) -> CameraIntrinsics:
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def look_at_pose(camera_center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose for a camera at `camera_center` looking at `target`."""
    c = np.asarray(camera_center, dtype=float)
    f = np.asarray(target, dtype=float) - c
    f = f / np.linalg.norm(f)
    u = np.asarray(up, dtype=float)
    r = np.cross(f, u)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    return Pose(rot, -rot @ c)


def camera_frame(frame_id: int, pose: Pose, k: CameraIntrinsics | None = None) -> CameraFrame:
    return CameraFrame(frame_id=frame_id, intrinsics=k or simple_intrinsics(), pose=pose)
