"""7-DoF box fitting from object point clusters.

BEV is the world x-y plane with z up. Two BEV fitters are provided: the
minimum-area enclosing rectangle (baseline) and an edge-distance fitter
that picks the yaw minimizing the summed distance from each point to its
nearest rectangle edge, with extents kept tight at every yaw. Height comes
from the z extremes.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .cluster import ObjectCluster
from .errors import ConfigError, DegenerateCluster
from .geom import Point3

_HALF_PI = math.pi / 2
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def wrap_angle(angle: float) -> float:
    """Wrap to [-pi, pi)."""
    return float((angle + math.pi) % (2 * math.pi) - math.pi)


def wrap_half_turn(angle: float) -> float:
    """Wrap to [0, pi); used for fitted yaws, which carry a 180° ambiguity."""
    return float(angle % math.pi)


@dataclass(frozen=True)
class OrientedBox3D:
    """7-DoF box: center, (w, h, l) size, yaw about world z.

    Yaw is the direction of the l-axis in the BEV plane, in [0, pi) for
    fitted labels and [-pi, pi) for evaluated predictions. has_3d = False
    marks 2D-only labels whose geometry is a placeholder and whose 3D loss
    downstream consumers must ignore. `complete` records the length-range
    completeness check; anchor_frame_id is the frame whose camera depth
    stands in for the object's depth in range selection.
    """

    center: Point3
    size: tuple  # (w, h, l) meters
    yaw: float
    score: float
    class_label: str = "object"
    track_id: int | None = None
    has_3d: bool = True
    complete: bool = True
    anchor_frame_id: int | None = None

    def __post_init__(self):
        w, h, l = self.size
        if self.has_3d and not (w > 0 and h > 0 and l > 0):
            raise ValueError("3D boxes need strictly positive size")
        if not self.has_3d and not (w >= 0 and h >= 0 and l >= 0):
            raise ValueError("size must be non-negative")
        if not (np.isfinite(self.yaw) and -math.pi <= self.yaw < math.pi):
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi)")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def z_min(self) -> float:
        return self.center.z - self.size[1] / 2

    @property
    def z_max(self) -> float:
        return self.center.z + self.size[1] / 2

    def bev_corners(self) -> np.ndarray:
        """Counterclockwise (4, 2) BEV corners; l runs along the yaw axis."""
        w, _, l = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        axis_l = np.array([c, s])
        axis_w = np.array([-s, c])
        center = np.array([self.center.x, self.center.y])
        half_l, half_w = l / 2, w / 2
        return np.stack(
            [
                center + half_l * axis_l + half_w * axis_w,
                center - half_l * axis_l + half_w * axis_w,
                center - half_l * axis_l - half_w * axis_w,
                center + half_l * axis_l - half_w * axis_w,
            ]
        )


@dataclass(frozen=True)
class BevRectangle:
    """Rectangle in BEV: yaw plus extents along the rotated u (yaw) and v axes."""

    yaw: float
    u_min: float
    u_max: float
    v_min: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError("rectangle extents must be non-empty")

    @property
    def extent_u(self) -> float:
        return self.u_max - self.u_min

    @property
    def extent_v(self) -> float:
        return self.v_max - self.v_min

    @property
    def area(self) -> float:
        return self.extent_u * self.extent_v

    def center_xy(self) -> np.ndarray:
        cu = (self.u_min + self.u_max) / 2
        cv = (self.v_min + self.v_max) / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([cu * c - cv * s, cu * s + cv * c])


@dataclass(frozen=True)
class FitConfig:
    """Orientation search, completeness bounds, augmentation, and scoring."""

    coarse_step: float = math.radians(0.25)
    refine_tolerance: float = math.radians(0.01)
    sigma0: float = 3.0
    sigma1: float = 10.0
    cutoff_fraction_range: tuple = (0.1, 0.4)
    score_point_norm: int = 100
    score_residual_scale_px: float = 3.0

    def __post_init__(self):
        if not (0 < self.coarse_step <= math.pi / 36):
            raise ConfigError("coarse_step must be in (0, 5 degrees]")
        if not (self.refine_tolerance > 0):
            raise ConfigError("refine_tolerance must be positive")
        if not (0 < self.sigma0 < self.sigma1):
            raise ConfigError("need 0 < sigma0 < sigma1")
        lo, hi = self.cutoff_fraction_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError("cutoff_fraction_range must satisfy 0 <= lo <= hi <= 1")
        if self.score_point_norm < 1:
            raise ConfigError("score_point_norm must be >= 1")
        if not (self.score_residual_scale_px > 0):
            raise ConfigError("score_residual_scale_px must be positive")


def _as_bev(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected an (n, 2) array of BEV points")
    return arr


def _tight_rect(bev: np.ndarray, yaw: float) -> BevRectangle:
    c, s = math.cos(yaw), math.sin(yaw)
    u = bev[:, 0] * c + bev[:, 1] * s
    v = -bev[:, 0] * s + bev[:, 1] * c
    return BevRectangle(
        yaw=yaw, u_min=float(u.min()), u_max=float(u.max()),
        v_min=float(v.min()), v_max=float(v.max()),
    )


def fit_min_area_rect(bev_points) -> BevRectangle:
    """Minimum-area enclosing rectangle via rotating calipers on the hull.

    The optimum has one side flush with a hull edge, so only hull-edge
    angles are candidates. Yaw is reported in [0, pi/2).
    """
    bev = _as_bev(bev_points)
    if bev.shape[0] < 3:
        raise DegenerateCluster("minimum-area rectangle needs >= 3 points")
    try:
        hull = ConvexHull(bev)
    except QhullError as exc:
        raise DegenerateCluster(f"degenerate BEV points: {exc}") from exc

    verts = bev[hull.vertices]
    edges = np.roll(verts, -1, axis=0) - verts
    angles = np.mod(np.arctan2(edges[:, 1], edges[:, 0]), _HALF_PI)

    best = None
    for a in angles:
        rect = _tight_rect(bev, float(a))
        if best is None or rect.area < best.area:
            best = rect
    return best


def edge_distance_objective(bev_points, yaws) -> np.ndarray:
    """Sum over points of the distance to the nearest edge of the tight
    rectangle at each yaw.

    With tight extents every point lies inside the rectangle, where the
    nearest-edge-segment distance reduces to the smallest margin to the
    four sides.
    """
    bev = _as_bev(bev_points)
    yaws = np.atleast_1d(np.asarray(yaws, dtype=float))
    ca, sa = np.cos(yaws), np.sin(yaws)
    u = bev[:, 0:1] * ca[None, :] + bev[:, 1:2] * sa[None, :]
    v = -bev[:, 0:1] * sa[None, :] + bev[:, 1:2] * ca[None, :]
    du = np.minimum(u - u.min(axis=0), u.max(axis=0) - u)
    dv = np.minimum(v - v.min(axis=0), v.max(axis=0) - v)
    return np.minimum(du, dv).sum(axis=0)


def _golden_refine(bev, lo, hi, tol, best):
    """Golden-section minimization tracking the best evaluated point."""

    def f(x):
        nonlocal best
        val = float(edge_distance_objective(bev, x)[0])
        if (val, x) < best:
            best = (val, x)
        return val

    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while (b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return best


def fit_orientation_edge(bev_points, cfg: FitConfig) -> BevRectangle:
    """Yaw search for the minimum summed nearest-edge distance.

    Coarse grid over [0, pi) followed by golden-section refinement around
    the best cells; the baseline rectangle's yaw is also seeded so the
    result never scores worse than the baseline under this objective.
    """
    bev = _as_bev(bev_points)
    baseline = fit_min_area_rect(bev)  # also rejects degenerate input

    m = int(math.ceil(math.pi / cfg.coarse_step))
    grid = np.arange(m) * cfg.coarse_step
    grid_j = edge_distance_objective(bev, grid)

    best = (float(grid_j.min()), float(grid[int(grid_j.argmin())]))
    seed = wrap_half_turn(baseline.yaw)
    j0 = float(edge_distance_objective(bev, seed)[0])
    if (j0, seed) < best:
        best = (j0, seed)
    best = _golden_refine(
        bev, seed - cfg.coarse_step, seed + cfg.coarse_step, cfg.refine_tolerance, best
    )

    # The landscape has several basins, some narrower than the coarse step.
    # |dJ/dyaw| <= sum(r_i) + n * max(r_i) (r_i about the centroid; tight
    # extents make J translation-invariant), which bounds how far J can dip
    # inside any interval. Split intervals whose bound beats the incumbent
    # until they are certified or narrower than the floor, then polish.
    centered = bev - bev.mean(axis=0)
    radii = np.hypot(centered[:, 0], centered[:, 1])
    lipschitz = float(radii.sum() + len(radii) * radii.max())
    floor = min(cfg.refine_tolerance, 3.5e-5)

    heap = []
    for k in range(m):
        a = float(grid[k])
        fa = float(grid_j[k])
        fb = float(grid_j[(k + 1) % m])  # J has period pi
        lb = min(fa, fb) - lipschitz * cfg.coarse_step / 2
        heapq.heappush(heap, (lb, a, a + cfg.coarse_step, fa, fb))
    while heap:
        lb, a, b, fa, fb = heapq.heappop(heap)
        if lb >= best[0]:
            break
        mid = 0.5 * (a + b)
        fm = float(edge_distance_objective(bev, mid)[0])
        if (fm, mid) < best:
            best = (fm, mid)
        half = (b - a) / 2
        if half > floor:
            heapq.heappush(heap, (min(fa, fm) - lipschitz * half / 2, a, mid, fa, fm))
            heapq.heappush(heap, (min(fm, fb) - lipschitz * half / 2, mid, b, fm, fb))

    best = _golden_refine(bev, best[1] - 2 * floor, best[1] + 2 * floor, floor / 10, best)
    return _tight_rect(bev, wrap_half_turn(best[1]))


def fit_box7(
    cluster: ObjectCluster,
    cfg: FitConfig,
    *,
    residual_rms_px: float = 0.0,
    class_label: str = "object",
    anchor_frame_id: int | None = None,
) -> OrientedBox3D:
    """Fit a 7-DoF box to a cluster.

    BEV comes from the edge-distance fitter; h spans the z extremes and
    c_z is their midpoint; l is the longer BEV extent with yaw aligned to
    it, canonicalized to [0, pi). The score combines cluster size against
    score_point_norm with an exponential residual falloff.
    """
    pts = cluster.points_array()
    if pts.shape[0] < 3:
        raise DegenerateCluster("box fitting needs >= 3 points")
    rect = fit_orientation_edge(pts[:, :2], cfg)

    z_min, z_max = float(pts[:, 2].min()), float(pts[:, 2].max())
    h = z_max - z_min
    if h <= 0:
        raise DegenerateCluster("cluster has no vertical extent")

    if rect.extent_u >= rect.extent_v:
        l, w, yaw = rect.extent_u, rect.extent_v, rect.yaw
    else:
        l, w, yaw = rect.extent_v, rect.extent_u, rect.yaw + _HALF_PI
    yaw = wrap_half_turn(yaw)

    cx, cy = rect.center_xy()
    score = min(1.0, cluster.n_points / cfg.score_point_norm) * math.exp(
        -max(residual_rms_px, 0.0) / cfg.score_residual_scale_px
    )
    return OrientedBox3D(
        center=Point3(float(cx), float(cy), (z_min + z_max) / 2),
        size=(w, h, l),
        yaw=yaw,
        score=score,
        class_label=class_label,
        track_id=cluster.matched_track_id,
        has_3d=True,
        complete=True,
        anchor_frame_id=anchor_frame_id,
    )


def completeness_filter(box: OrientedBox3D, cfg: FitConfig) -> bool:
    """True iff the fitted length falls in the closed [sigma0, sigma1] band."""
    if not box.has_3d:
        raise ValueError("completeness is defined for 3D boxes only")
    return cfg.sigma0 <= box.size[2] <= cfg.sigma1


def cutoff_augment(cluster: ObjectCluster, seed: int, cfg: FitConfig) -> ObjectCluster:
    """Remove the points beyond a random vertical cutting plane.

    Draws a removal fraction from cfg.cutoff_fraction_range and a plane
    azimuth, then drops the round(fraction * n) points with the largest
    projection onto that azimuth. Re-draws up to 16 times if the cut would
    empty the cluster; gives the input back unchanged (augmented flag left
    as-is) when every draw fails.
    """
    n = cluster.n_points
    if n == 0:
        raise ValueError("cannot augment an empty cluster")
    rng = np.random.default_rng(seed)
    pts = cluster.points_array()
    ids = np.asarray(cluster.point_ids, dtype=np.int64)
    lo, hi = cfg.cutoff_fraction_range
    for _ in range(16):
        fraction = float(rng.uniform(lo, hi))
        azimuth = float(rng.uniform(0.0, 2 * math.pi))
        k = int(math.floor(fraction * n + 0.5))
        if k == 0:
            return cluster
        if k >= n:
            continue
        proj = pts[:, 0] * math.cos(azimuth) + pts[:, 1] * math.sin(azimuth)
        order = np.lexsort((ids, proj))
        kept = np.sort(order[: n - k])
        return ObjectCluster.from_points(
            [(int(ids[i]), cluster.points[i]) for i in kept],
            cluster.source,
            matched_track_id=cluster.matched_track_id,
            augmented=True,
        )
    return replace(cluster)
