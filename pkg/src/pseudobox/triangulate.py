"""World-point recovery from pixel correspondence tracks.

Poses and intrinsics are inputs and stay fixed; only the 3D points move.
That makes the reprojection least-squares problem separable, so each point
is refined as an independent 3-parameter problem: DLT initialization
followed by damped Gauss-Newton on the squared pixel residual.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityFailure,
    ConfigError,
    DegenerateGeometry,
    InsufficientViews,
)
from .geom import MIN_PROJECTION_DEPTH, CameraFrame, Pixel2, Point3

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "PSEUDOBOX_NUM_THREADS"

_DAMPING_CAP = 1e10
_DAMPING_FLOOR = 1e-12
_TINY = 1e-300


@dataclass(frozen=True)
class ObservationTrack:
    """Pixel observations of one world point across frames.

    Well-formed tracks observe each frame at most once; loaders validate
    that. Construction tolerates duplicates so consumers can reject them
    with a precise error (triangulate_dlt raises InsufficientViews when
    fewer than two distinct frames remain).
    """

    point_id: int
    observations: tuple  # of (frame_id, Pixel2)

    def __post_init__(self):
        obs = tuple(self.observations)
        if len(obs) < 1:
            raise ValueError("track needs at least one observation")
        object.__setattr__(self, "observations", obs)


@dataclass(frozen=True)
class WorldPoint:
    """A reconstructed point with its fit quality."""

    point_id: int
    position: Point3
    residual_rms: float
    n_views: int

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("world point needs at least two views")
        if not (np.isfinite(self.residual_rms) and self.residual_rms >= 0):
            raise ValueError("residual_rms must be finite and non-negative")


@dataclass(frozen=True)
class BaConfig:
    """Solver knobs for triangulation refinement and the parallax gate."""

    max_iterations: int = 60
    cost_tolerance: float = 1e-10
    initial_damping: float = 1e-3
    damping_scale: float = 10.0
    min_views: int = 2
    max_residual_px: float = 3.0
    parallax_min_baseline_m: float = 0.5

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if not (self.cost_tolerance > 0):
            raise ConfigError("cost_tolerance must be positive")
        if not (self.initial_damping > 0 and self.damping_scale > 1):
            raise ConfigError("damping must be positive with scale > 1")
        if self.min_views < 2:
            raise ConfigError("min_views must be >= 2")
        if not (self.max_residual_px > 0):
            raise ConfigError("max_residual_px must be positive")
        if not (self.parallax_min_baseline_m > 0):
            raise ConfigError("parallax_min_baseline_m must be positive")


@dataclass
class RefineTrace:
    """Accepted-cost history per point, for solver diagnostics and tests.

    costs[i, 0] is the initial cost of point i; costs[i, k] the cost after
    sweep k (unchanged when the sweep's step was rejected).
    """

    point_ids: list = field(default_factory=list)
    costs: np.ndarray | None = None
    accepted: np.ndarray | None = None


def parallax_gate(frames: list, cfg: BaConfig) -> bool:
    """True when the camera baseline is wide enough to reconstruct.

    The gate fails (returns False) iff the maximum pairwise camera-center
    distance is strictly below cfg.parallax_min_baseline_m.
    """
    if not frames:
        raise ValueError("parallax_gate needs at least one frame")
    centers = np.stack([f.pose.camera_center() for f in frames])
    diffs = centers[:, None, :] - centers[None, :, :]
    max_baseline = float(np.sqrt((diffs**2).sum(axis=2)).max())
    return not (max_baseline < cfg.parallax_min_baseline_m)


def _projection_rows(frame: CameraFrame) -> np.ndarray:
    k = frame.intrinsics.matrix()
    rt = np.hstack([frame.pose.rotation, frame.pose.translation.reshape(3, 1)])
    return k @ rt  # 3x4


def triangulate_dlt(track: ObservationTrack, frames: list) -> Point3:
    """Linear least-squares ray intersection (homogeneous DLT).

    Raises InsufficientViews with fewer than two usable observations in
    distinct frames, DegenerateGeometry for near-parallel rays, and
    CheiralityFailure when the solution has positive depth in fewer than
    two observing cameras.
    """
    frame_by_id = {f.frame_id: f for f in frames}
    usable = [(frame_by_id[fid], px) for fid, px in track.observations if fid in frame_by_id]
    if len(usable) < 2 or len({f.frame_id for f, _ in usable}) < 2:
        raise InsufficientViews(
            f"track {track.point_id} has {len(usable)} usable observation(s) in distinct frames"
        )

    # Parallel viewing rays put the intersection at infinity.
    dirs = []
    for frame, px in usable:
        k = frame.intrinsics
        ray_cam = np.array([(px.u - k.cx) / k.fx, (px.v - k.cy) / k.fy, 1.0])
        d = frame.pose.rotation.T @ ray_cam
        dirs.append(d / np.linalg.norm(d))
    dirs = np.stack(dirs)
    cross = np.cross(dirs[:, None, :], dirs[None, :, :])
    max_sin = float(np.sqrt((cross**2).sum(axis=2)).max())
    if max_sin < 1e-8:
        raise DegenerateGeometry(f"track {track.point_id}: viewing rays parallel within 1e-8 rad")

    rows = []
    for frame, px in usable:
        p = _projection_rows(frame)
        rows.append(px.u * p[2] - p[0])
        rows.append(px.v * p[2] - p[1])
    a = np.stack(rows)
    _, _, vt = np.linalg.svd(a)
    hom = vt[-1]
    if abs(hom[3]) < 1e-12 * max(1.0, np.abs(hom[:3]).max()):
        raise DegenerateGeometry(f"track {track.point_id}: solution at infinity")
    pos = hom[:3] / hom[3]

    in_front = sum(1 for frame, _ in usable if frame.pose.apply(pos)[2] > MIN_PROJECTION_DEPTH)
    if in_front < 2:
        raise CheiralityFailure(
            f"track {track.point_id}: positive depth in only {in_front} view(s)"
        )
    return Point3.from_array(pos)


def reprojection_residual_jacobian(frame: CameraFrame, position: np.ndarray, observed: Pixel2):
    """Residual (projection - observation) and its Jacobian wrt the point.

    Returns (r, J) with shapes (2,) and (2, 3). Raises no error for
    non-positive depth; callers must check depth first.
    """
    k = frame.intrinsics
    r_mat = frame.pose.rotation
    p_cam = frame.pose.apply(position)
    x, y, z = p_cam
    r = np.array([k.fx * x / z + k.cx - observed.u, k.fy * y / z + k.cy - observed.v])
    jac = np.empty((2, 3))
    jac[0] = k.fx / z * (r_mat[0] - (x / z) * r_mat[2])
    jac[1] = k.fy / z * (r_mat[1] - (y / z) * r_mat[2])
    return r, jac


def reprojection_cost(position: Point3, track: ObservationTrack, frames: list) -> float:
    """0.5 * sum of squared pixel residuals over the track's observations."""
    frame_by_id = {f.frame_id: f for f in frames}
    total = 0.0
    pos = position.as_array()
    for fid, px in track.observations:
        r, _ = reprojection_residual_jacobian(frame_by_id[fid], pos, px)
        total += float(r @ r)
    return 0.5 * total


def _num_threads() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")


class _Batch:
    """Padded per-point view arrays for the vectorized solver."""

    def __init__(self, points, tracks_by_id, frame_by_id, max_views):
        n = len(points)
        t = max_views
        self.pos = np.stack([p.position.as_array() for p in points])
        self.point_ids = np.array([p.point_id for p in points], dtype=np.int64)
        self.rot = np.zeros((n, t, 3, 3))
        self.trans = np.zeros((n, t, 3))
        self.fx = np.ones((n, t))
        self.fy = np.ones((n, t))
        self.obs = np.zeros((n, t, 2))
        self.mask = np.zeros((n, t), dtype=bool)
        for i, p in enumerate(points):
            for j, (fid, px) in enumerate(tracks_by_id[p.point_id].observations):
                frame = frame_by_id[fid]
                self.rot[i, j] = frame.pose.rotation
                self.trans[i, j] = frame.pose.translation
                self.fx[i, j] = frame.intrinsics.fx
                self.fy[i, j] = frame.intrinsics.fy
                # cx/cy cancel in the residual once folded into the target.
                self.obs[i, j, 0] = px.u - frame.intrinsics.cx
                self.obs[i, j, 1] = px.v - frame.intrinsics.cy
                self.mask[i, j] = True
        self.n_views = self.mask.sum(axis=1)

    def residuals(self, pos):
        """Masked residuals (n, t, 2), camera depths (n, t), validity."""
        p_cam = np.einsum("ntij,nj->nti", self.rot, pos, optimize=False) + self.trans
        z = p_cam[:, :, 2]
        ok = np.where(self.mask, z > MIN_PROJECTION_DEPTH, True)
        safe_z = np.where(np.abs(z) > MIN_PROJECTION_DEPTH, z, 1.0)
        res = np.zeros_like(self.obs)
        res[:, :, 0] = self.fx * p_cam[:, :, 0] / safe_z - self.obs[:, :, 0]
        res[:, :, 1] = self.fy * p_cam[:, :, 1] / safe_z - self.obs[:, :, 1]
        res[~self.mask] = 0.0
        return res, p_cam, ok.all(axis=1)

    def cost(self, res):
        return 0.5 * np.einsum("ntk,ntk->n", res, res, optimize=False)

    def jacobian(self, p_cam):
        z = np.where(np.abs(p_cam[:, :, 2]) > MIN_PROJECTION_DEPTH, p_cam[:, :, 2], 1.0)
        jac = np.empty(self.rot.shape[:2] + (2, 3))
        jac[:, :, 0, :] = (self.fx / z)[..., None] * (
            self.rot[:, :, 0, :] - (p_cam[:, :, 0] / z)[..., None] * self.rot[:, :, 2, :]
        )
        jac[:, :, 1, :] = (self.fy / z)[..., None] * (
            self.rot[:, :, 1, :] - (p_cam[:, :, 1] / z)[..., None] * self.rot[:, :, 2, :]
        )
        jac[~self.mask] = 0.0
        return jac


def _solve3(h, g):
    """Batched 3x3 solve via the adjugate; returns (delta, singular_mask)."""
    det = (
        h[:, 0, 0] * (h[:, 1, 1] * h[:, 2, 2] - h[:, 1, 2] * h[:, 2, 1])
        - h[:, 0, 1] * (h[:, 1, 0] * h[:, 2, 2] - h[:, 1, 2] * h[:, 2, 0])
        + h[:, 0, 2] * (h[:, 1, 0] * h[:, 2, 1] - h[:, 1, 1] * h[:, 2, 0])
    )
    scale = np.abs(h).max(axis=(1, 2))
    singular = ~np.isfinite(det) | (np.abs(det) <= 1e-14 * np.maximum(scale, 1.0) ** 3)
    adj = np.empty_like(h)
    adj[:, 0, 0] = h[:, 1, 1] * h[:, 2, 2] - h[:, 1, 2] * h[:, 2, 1]
    adj[:, 0, 1] = h[:, 0, 2] * h[:, 2, 1] - h[:, 0, 1] * h[:, 2, 2]
    adj[:, 0, 2] = h[:, 0, 1] * h[:, 1, 2] - h[:, 0, 2] * h[:, 1, 1]
    adj[:, 1, 0] = h[:, 1, 2] * h[:, 2, 0] - h[:, 1, 0] * h[:, 2, 2]
    adj[:, 1, 1] = h[:, 0, 0] * h[:, 2, 2] - h[:, 0, 2] * h[:, 2, 0]
    adj[:, 1, 2] = h[:, 0, 2] * h[:, 1, 0] - h[:, 0, 0] * h[:, 1, 2]
    adj[:, 2, 0] = h[:, 1, 0] * h[:, 2, 1] - h[:, 1, 1] * h[:, 2, 0]
    adj[:, 2, 1] = h[:, 0, 1] * h[:, 2, 0] - h[:, 0, 0] * h[:, 2, 1]
    adj[:, 2, 2] = h[:, 0, 0] * h[:, 1, 1] - h[:, 0, 1] * h[:, 1, 0]
    safe_det = np.where(singular, 1.0, det)
    delta = np.einsum("nij,nj->ni", adj, g, optimize=False) / safe_det[:, None]
    delta[singular] = 0.0
    return delta, singular


def _refine_chunk(points, tracks_by_id, frame_by_id, cfg, max_views):
    """Run damped Gauss-Newton on one chunk of points.

    Returns (results, costs_history, accepted_history) where results is a
    list of (point_id, position, residual_rms, n_views, keep).
    """
    batch = _Batch(points, tracks_by_id, frame_by_id, max_views)
    n = len(points)
    pos = batch.pos.copy()
    lam = np.full(n, cfg.initial_damping)
    res, p_cam, valid = batch.residuals(pos)
    cost = batch.cost(res)
    # Points starting behind a camera never get a usable residual: drop.
    dropped = ~valid
    active = valid.copy()
    singular_at_cap = np.zeros(n, dtype=bool)

    costs_hist = [cost.copy()]
    accepted_hist = []

    for _ in range(cfg.max_iterations):
        if not active.any():
            break
        jac = batch.jacobian(p_cam)
        jtj = np.einsum("ntki,ntkj->nij", jac, jac, optimize=False)
        grad = np.einsum("ntki,ntk->ni", jac, res, optimize=False)
        h = jtj + lam[:, None, None] * np.eye(3)
        delta, singular = _solve3(h, -grad)

        trial = pos + np.where(active[:, None] & ~singular[:, None], delta, 0.0)
        trial_res, trial_cam, trial_valid = batch.residuals(trial)
        trial_cost = batch.cost(trial_res)

        accepted = active & ~singular & trial_valid & (trial_cost < cost)
        rejected = active & ~accepted

        if accepted.any():
            rel_dec = np.zeros(n)
            rel_dec[accepted] = (cost[accepted] - trial_cost[accepted]) / np.maximum(
                cost[accepted], _TINY
            )
            pos[accepted] = trial[accepted]
            cost[accepted] = trial_cost[accepted]
            res[accepted] = trial_res[accepted]
            p_cam[accepted] = trial_cam[accepted]
            lam[accepted] = np.maximum(lam[accepted] / cfg.damping_scale, _DAMPING_FLOOR)
            converged = accepted & (rel_dec < cfg.cost_tolerance)
            active &= ~converged

        lam[rejected] *= cfg.damping_scale
        capped = rejected & (lam > _DAMPING_CAP)
        singular_at_cap |= capped & singular
        active &= ~capped

        costs_hist.append(cost.copy())
        accepted_hist.append(accepted.copy())

    dropped |= singular_at_cap
    rms = np.sqrt(2.0 * cost / np.maximum(batch.n_views, 1))
    results = []
    for i, p in enumerate(points):
        keep = (not dropped[i]) and rms[i] <= cfg.max_residual_px
        results.append(
            (p.point_id, pos[i].copy(), float(rms[i]), int(batch.n_views[i]), bool(keep))
        )
    return results, np.stack(costs_hist, axis=1), (
        np.stack(accepted_hist, axis=1) if accepted_hist else np.zeros((n, 0), dtype=bool)
    )


def refine_points(points, tracks, frames, cfg: BaConfig, trace: list | None = None):
    """Refine each point independently against its observation track.

    Points whose final RMS pixel residual exceeds cfg.max_residual_px, or
    that sit behind a camera, or whose normal equations stay singular at
    the damping cap, are dropped. The output is sorted by point_id and is
    a pure function of (inputs, config). Pass a list as `trace` to receive
    a RefineTrace with per-sweep accepted costs.

    Honors the PSEUDOBOX_NUM_THREADS env var by chunking points across a
    thread pool; results are independent per point and byte-identical for
    any thread count.
    """
    tracks_by_id = {t.point_id: t for t in tracks}
    frame_by_id = {f.frame_id: f for f in frames}
    usable = []
    for p in points:
        track = tracks_by_id.get(p.point_id)
        if track is None or len(track.observations) < cfg.min_views:
            logger.info("point %d dropped: fewer than min_views observations", p.point_id)
            continue
        usable.append(p)
    if not usable:
        if trace is not None:
            trace.append(RefineTrace(point_ids=[], costs=np.zeros((0, 1)), accepted=np.zeros((0, 0), dtype=bool)))
        return []

    usable.sort(key=lambda p: p.point_id)
    # Pad to the global maximum so per-point arrays never depend on chunking.
    max_views = max(len(tracks_by_id[p.point_id].observations) for p in usable)

    n_threads = _num_threads()
    if n_threads == 1 or len(usable) < 2 * n_threads:
        chunks = [usable]
    else:
        size = (len(usable) + n_threads - 1) // n_threads
        chunks = [usable[i : i + size] for i in range(0, len(usable), size)]

    if len(chunks) == 1:
        outputs = [_refine_chunk(chunks[0], tracks_by_id, frame_by_id, cfg, max_views)]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            outputs = list(
                pool.map(
                    lambda c: _refine_chunk(c, tracks_by_id, frame_by_id, cfg, max_views), chunks
                )
            )

    results = [r for out in outputs for r in out[0]]
    results.sort(key=lambda r: r[0])
    kept = [
        WorldPoint(point_id=pid, position=Point3.from_array(p), residual_rms=rms, n_views=nv)
        for pid, p, rms, nv, keep in results
        if keep
    ]
    n_dropped = len(results) - len(kept)
    if n_dropped:
        logger.info("refine_points dropped %d of %d points", n_dropped, len(results))

    if trace is not None:
        order = np.argsort([r[0] for out in outputs for r in out[0]], kind="stable")
        ids = [r[0] for out in outputs for r in out[0]]
        sweeps = max(out[1].shape[1] for out in outputs)
        costs = np.concatenate(
            [np.pad(out[1], ((0, 0), (0, sweeps - out[1].shape[1])), mode="edge") for out in outputs]
        )
        acc_sweeps = max(out[2].shape[1] for out in outputs)
        acc = np.concatenate(
            [
                np.pad(out[2], ((0, 0), (0, acc_sweeps - out[2].shape[1])), mode="constant")
                for out in outputs
            ]
        )
        trace.append(
            RefineTrace(
                point_ids=[ids[i] for i in order], costs=costs[order], accepted=acc[order]
            )
        )
    return kept
