"""Synthetic driving scenes with exact ground truth.

The camera drives a curved path while box-shaped objects sit (or drive)
around it. Points are sampled on object surfaces once, in the object
frame, then followed through every camera frame with backface culling,
image-bounds checks, and optional occlusion by the other boxes. The
resulting bundle carries exact 2D boxes, noisy pixel tracks, and full
truth, so every downstream stage can be verified against it.

Determinism: one generator seeded from cfg.seed, drawn in a fixed order
(per-object sizes and placements, the moving-object permutation, per-object
surface points, then one batch of pixel noise over the sorted
observations). Identical configs produce identical bundles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxfit import OrientedBox3D
from .cluster import TrackedBox2D
from .errors import ConfigError
from .geom import Box2D, CameraFrame, CameraIntrinsics, Pixel2, Point3, Pose
from .sceneio import SceneBundle, SceneTruth, TruthObject
from .triangulate import ObservationTrack

__all__ = ["SimConfig", "simulate", "sample_box_surface"]

_MIN_CORNER_DEPTH = 0.1


@dataclass(frozen=True)
class SimConfig:
    """Scene layout, trajectories, sampling, and noise."""

    seed: int = 0
    n_objects: int = 15
    n_frames: int = 50
    camera_speed_m: float = 1.0
    path_curvature: float = 0.01  # heading change per frame, radians
    camera_height_m: float = 1.6
    ahead_range: tuple = (6.0, 35.0)
    lateral_range: tuple = (3.0, 14.0)
    width_range: tuple = (1.6, 2.2)
    height_range: tuple = (1.3, 2.0)
    length_range: tuple = (3.6, 6.0)
    min_separation_m: float = 2.0
    points_per_object: int = 400
    pixel_noise_px: float = 0.5
    moving_fraction: float = 0.0
    moving_speed_m: float = 1.2
    occlusion: bool = True
    allow_view_overlap: bool = False
    focal_px: float = 1000.0
    image_width: int = 1920
    image_height: int = 1280

    def __post_init__(self):
        if self.n_objects < 1 or self.n_frames < 1 or self.points_per_object < 1:
            raise ConfigError("object, frame, and point counts must be >= 1")
        if self.pixel_noise_px < 0:
            raise ConfigError("pixel noise must be >= 0")
        if not (0.0 <= self.moving_fraction <= 1.0):
            raise ConfigError("moving_fraction must be in [0, 1]")
        if self.camera_speed_m < 0 or self.moving_speed_m < 0:
            raise ConfigError("speeds must be >= 0")
        if self.min_separation_m < 0:
            raise ConfigError("min_separation_m must be >= 0")
        for name in ("ahead_range", "lateral_range", "width_range",
                     "height_range", "length_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi")
        if self.focal_px <= 0 or self.image_width < 2 or self.image_height < 2:
            raise ConfigError("camera parameters out of range")
        if self.camera_height_m <= 0:
            raise ConfigError("camera_height_m must be positive")


# Faces of the unit box surface that keypoints live on: four sides plus the
# top, as (fixed axis, sign). The bottom touches the ground and is skipped.
_FACES = [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0), (2, 1.0)]


def sample_box_surface(rng, n: int, size: tuple):
    """n points on a box's sides and top, area-weighted, in the box frame.

    The box frame is centered at the box center with x along length,
    y along width, z up. Returns (points (n, 3), outward normals (n, 3)).
    """
    w, h, l = size
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face_idx = rng.choice(len(_FACES), size=n, p=areas / areas.sum())
    coords = rng.random((n, 2))
    half = np.array([l / 2, w / 2, h / 2])
    points = np.empty((n, 3))
    normals = np.zeros((n, 3))
    for fi, (axis, sign) in enumerate(_FACES):
        sel = face_idx == fi
        if not np.any(sel):
            continue
        free = [a for a in range(3) if a != axis]
        points[sel, axis] = sign * half[axis]
        points[sel, free[0]] = (coords[sel, 0] - 0.5) * 2 * half[free[0]]
        points[sel, free[1]] = (coords[sel, 1] - 0.5) * 2 * half[free[1]]
        normals[sel, axis] = sign
    return points, normals


def _camera_path(cfg: SimConfig):
    headings = cfg.path_curvature * np.arange(cfg.n_frames)
    centers = np.zeros((cfg.n_frames, 3))
    centers[:, 2] = cfg.camera_height_m
    for t in range(1, cfg.n_frames):
        h = headings[t - 1]
        centers[t, 0] = centers[t - 1, 0] + cfg.camera_speed_m * math.cos(h)
        centers[t, 1] = centers[t - 1, 1] + cfg.camera_speed_m * math.sin(h)
    return centers, headings


def _frame_for(t: int, center, heading: float, k: CameraIntrinsics) -> CameraFrame:
    ch, sh = math.cos(heading), math.sin(heading)
    # rows: camera right, down, forward, in world coordinates
    rot = np.array([[sh, -ch, 0.0], [0.0, 0.0, -1.0], [ch, sh, 0.0]])
    return CameraFrame(
        frame_id=t, intrinsics=k, pose=Pose(rotation=rot, translation=-rot @ center)
    )


def _yaw_rot(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class _SimObject:
    track_id: int
    size: tuple  # (w, h, l)
    yaw: float
    center0: np.ndarray  # world center at frame 0
    velocity: np.ndarray  # world meters per frame
    local_points: np.ndarray
    local_normals: np.ndarray

    def center_at(self, t: int) -> np.ndarray:
        return self.center0 + t * self.velocity

    def box_at(self, t: int) -> OrientedBox3D:
        return OrientedBox3D(
            center=Point3.from_array(self.center_at(t)),
            size=self.size,
            yaw=self.yaw,
            score=1.0,
            class_label="car",
            track_id=self.track_id,
        )

    def world_points_at(self, t: int) -> np.ndarray:
        return self.center_at(t) + self.local_points @ _yaw_rot(self.yaw).T

    def world_normals(self) -> np.ndarray:
        return self.local_normals @ _yaw_rot(self.yaw).T

    def corners_at(self, t: int) -> np.ndarray:
        w, h, l = self.size
        sx = np.array([1, 1, 1, 1, -1, -1, -1, -1]) * l / 2
        sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * w / 2
        sz = np.array([1, -1, 1, -1, 1, -1, 1, -1]) * h / 2
        local = np.stack([sx, sy, sz], axis=1)
        return self.center_at(t) + local @ _yaw_rot(self.yaw).T


def _paths_bev(obj_like, n_frames: int) -> np.ndarray:
    center0, velocity = obj_like
    t = np.arange(n_frames)[:, None]
    return center0[None, :2] + t * velocity[None, :2]


def _bearing_cones(path, half_diag, cam_bev, headings, fov_half):
    """Per-frame (bearing, half-width) of an object as seen by the camera.

    Frames where the object is outside the camera's forward cone (with its
    angular radius as margin) get width NaN, meaning "cannot overlap".
    """
    rel = path - cam_bev
    rng = np.hypot(rel[:, 0], rel[:, 1])
    bearing = np.arctan2(rel[:, 1], rel[:, 0])
    with np.errstate(invalid="ignore"):
        half_w = np.arcsin(np.minimum(1.0, half_diag / np.maximum(rng, 1e-9)))
    off_axis = np.abs(_wrap_pi(bearing - headings))
    visible = (rng > half_diag) & (off_axis <= fov_half + half_w)
    half_w = np.where(visible, half_w, np.nan)
    return bearing, half_w


def _wrap_pi(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _cone_overlap_excessive(b1, w1, b2, w2) -> bool:
    """True when the two objects share bearings for too much of the time
    either one is in view; that is when one object's box starts collecting
    the other's points."""
    vis1, vis2 = ~np.isnan(w1), ~np.isnan(w2)
    both = vis1 & vis2
    if not np.any(both):
        return False
    gap = np.abs(_wrap_pi(b1[both] - b2[both]))
    ov = w1[both] + w2[both] - gap
    narrow = 2.0 * np.minimum(w1[both], w2[both])
    # grazing contact moves few points into the other box; only count
    # frames where most of the narrower cone is swallowed
    coverage = np.clip(ov / np.maximum(narrow, 1e-12), 0.0, 1.0)
    contested = int(np.count_nonzero(coverage >= 0.6))
    shorter = max(1, min(int(vis1.sum()), int(vis2.sum())))
    return contested > max(3, int(0.3 * shorter))


def _place_objects(cfg: SimConfig, rng, cam_centers, headings):
    moving = np.zeros(cfg.n_objects, dtype=bool)
    n_moving = int(math.floor(cfg.moving_fraction * cfg.n_objects + 0.5))
    moving[rng.permutation(cfg.n_objects)[:n_moving]] = True

    objects = []
    placed_paths = []
    placed_cones = []
    cam_bev = cam_centers[:, :2]
    fov_half = math.atan((cfg.image_width / 2) / cfg.focal_px)
    for i in range(cfg.n_objects):
        w = float(rng.uniform(*cfg.width_range))
        h = float(rng.uniform(*cfg.height_range))
        l = float(rng.uniform(*cfg.length_range))
        half_diag = math.hypot(l, w) / 2
        for attempt in range(2000):
            tf = int(rng.integers(0, cfg.n_frames))
            ahead = float(rng.uniform(*cfg.ahead_range))
            side = 1.0 if rng.random() < 0.5 else -1.0
            lateral = side * float(rng.uniform(*cfg.lateral_range))
            yaw = float(rng.uniform(-math.pi, math.pi))
            hd = headings[tf]
            fwd = np.array([math.cos(hd), math.sin(hd)])
            right = np.array([math.sin(hd), -math.cos(hd)])
            at_tf = cam_bev[tf] + ahead * fwd + lateral * right
            velocity = np.zeros(3)
            if moving[i]:
                velocity = cfg.moving_speed_m * np.array(
                    [math.cos(yaw), math.sin(yaw), 0.0]
                )
            center0 = np.array([at_tf[0], at_tf[1], h / 2]) - tf * velocity
            path = _paths_bev((center0, velocity), cfg.n_frames)
            # same-frame clearance against every placed object and the camera
            ok = True
            for other, other_path in zip(objects, placed_paths):
                other_hd = math.hypot(other.size[2], other.size[0]) / 2
                gap = np.linalg.norm(path - other_path, axis=1).min()
                if gap < cfg.min_separation_m + half_diag + other_hd:
                    ok = False
                    break
            if ok and np.linalg.norm(path - cam_bev, axis=1).min() < half_diag + 1.0:
                ok = False
            # keep static objects mostly angularly disjoint from the
            # camera's viewpoint: brief crossings are harmless, but an
            # object that hides inside another's box for long stretches
            # loses its points to that box's bigger cluster. If a crowded
            # scene leaves no such pose, fall back to separation only
            # rather than refuse the scene.
            want_cone = (
                not cfg.allow_view_overlap and not moving[i] and attempt < 1200
            )
            if ok and want_cone:
                cone = _bearing_cones(path, half_diag, cam_bev, headings, fov_half)
                for other_cone in placed_cones:
                    if other_cone is None:
                        continue
                    if _cone_overlap_excessive(
                        cone[0], cone[1], other_cone[0], other_cone[1]
                    ):
                        ok = False
                        break
            if ok:
                pts, nrm = sample_box_surface(rng, cfg.points_per_object, (w, h, l))
                objects.append(
                    _SimObject(
                        track_id=i, size=(w, h, l), yaw=yaw, center0=center0,
                        velocity=velocity, local_points=pts, local_normals=nrm,
                    )
                )
                placed_paths.append(path)
                if cfg.allow_view_overlap or moving[i]:
                    placed_cones.append(None)
                else:
                    placed_cones.append(
                        _bearing_cones(path, half_diag, cam_bev, headings, fov_half)
                    )
                break
        else:
            raise ConfigError(
                f"could not place object {i} with {cfg.min_separation_m} m separation"
            )
    return objects


def _segment_hits_box(cam, pts, center, yaw, size) -> np.ndarray:
    """True where the open segment cam->point crosses the box interior."""
    w, h, l = size
    rot = _yaw_rot(-yaw)
    a = rot @ (cam - center)
    b = (pts - center) @ rot.T
    d = b - a
    half = np.array([l / 2, w / 2, h / 2])
    t_lo = np.zeros(len(pts))
    t_hi = np.ones(len(pts))
    inside = np.ones(len(pts), dtype=bool)
    for axis in range(3):
        da = d[:, axis]
        parallel = np.abs(da) < 1e-12
        # parallel rays outside the slab can never enter
        inside &= ~(parallel & (np.abs(a[axis]) > half[axis]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half[axis] - a[axis]) / da
            t2 = (half[axis] - a[axis]) / da
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        t_lo = np.where(parallel, t_lo, np.maximum(t_lo, lo))
        t_hi = np.where(parallel, t_hi, np.minimum(t_hi, hi))
    return inside & (t_hi - t_lo > 1e-9)


def simulate(cfg: SimConfig) -> SceneBundle:
    """Build a deterministic scene bundle from the config."""
    rng = np.random.default_rng(cfg.seed)
    k = CameraIntrinsics(
        fx=cfg.focal_px, fy=cfg.focal_px,
        cx=cfg.image_width / 2, cy=cfg.image_height / 2,
        width=cfg.image_width, height=cfg.image_height,
    )
    cam_centers, headings = _camera_path(cfg)
    frames = tuple(
        _frame_for(t, cam_centers[t], headings[t], k) for t in range(cfg.n_frames)
    )
    objects = _place_objects(cfg, rng, cam_centers, headings)

    boxes2d = []
    raw_obs = {}  # point_id -> list of (frame_id, u, v), frame-ascending
    for t, frame in enumerate(frames):
        rot, trans = frame.pose.rotation, frame.pose.translation
        cam = cam_centers[t]
        world_by_obj = [obj.world_points_at(t) for obj in objects]
        for i, obj in enumerate(objects):
            pts = world_by_obj[i]
            p_cam = pts @ rot.T + trans
            z = p_cam[:, 2]
            vis = z > _MIN_CORNER_DEPTH
            with np.errstate(divide="ignore", invalid="ignore"):
                u = k.fx * p_cam[:, 0] / z + k.cx
                v = k.fy * p_cam[:, 1] / z + k.cy
            vis &= (u >= 0) & (u <= k.width) & (v >= 0) & (v <= k.height)
            facing = (obj.world_normals() * (pts - cam)).sum(axis=1) < 0
            vis &= facing
            if cfg.occlusion:
                for j, blocker in enumerate(objects):
                    if j == i or not np.any(vis):
                        continue
                    hit = _segment_hits_box(
                        cam, pts, blocker.center_at(t), blocker.yaw, blocker.size
                    )
                    vis &= ~hit
            base = i * cfg.points_per_object
            for idx in np.flatnonzero(vis):
                raw_obs.setdefault(base + int(idx), []).append(
                    (t, float(u[idx]), float(v[idx]))
                )

            corners = obj.corners_at(t) @ rot.T + trans
            if np.all(corners[:, 2] > _MIN_CORNER_DEPTH):
                cu = k.fx * corners[:, 0] / corners[:, 2] + k.cx
                cv = k.fy * corners[:, 1] / corners[:, 2] + k.cy
                u_min, u_max = max(0.0, cu.min()), min(float(k.width), cu.max())
                v_min, v_max = max(0.0, cv.min()), min(float(k.height), cv.max())
                if u_min < u_max and v_min < v_max:
                    boxes2d.append(
                        TrackedBox2D(
                            track_id=i, frame_id=t, class_label="car",
                            box=Box2D(u_min, v_min, u_max, v_max),
                        )
                    )

    flat = [
        (pid, f, u, v)
        for pid in sorted(raw_obs)
        for f, u, v in raw_obs[pid]
    ]
    noise = rng.normal(0.0, cfg.pixel_noise_px, size=(len(flat), 2))
    tracks = {}
    for (pid, f, u, v), (du, dv) in zip(flat, noise):
        tracks.setdefault(pid, []).append((f, Pixel2(u + du, v + dv)))
    obs_tracks = tuple(
        ObservationTrack(point_id=pid, observations=tuple(obs))
        for pid, obs in sorted(tracks.items())
    )

    truth_objects = tuple(
        TruthObject(
            track_id=obj.track_id,
            class_label="car",
            boxes=tuple((t, obj.box_at(t)) for t in range(cfg.n_frames)),
        )
        for obj in objects
    )
    point_to_track, point_positions = {}, {}
    for i, obj in enumerate(objects):
        world0 = obj.world_points_at(0)
        for j in range(cfg.points_per_object):
            pid = i * cfg.points_per_object + j
            point_to_track[pid] = i
            point_positions[pid] = Point3.from_array(world0[j])

    return SceneBundle(
        frames=frames,
        tracks2d=tuple(boxes2d),
        obs_tracks=obs_tracks,
        truth=SceneTruth(
            objects=truth_objects,
            point_to_track=point_to_track,
            point_positions=point_positions,
        ),
    )
