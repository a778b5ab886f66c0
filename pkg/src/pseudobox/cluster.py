"""Two-stage point clustering that turns reconstructed points into per-track
object clusters.

Stage one (LPC) picks, for every 2D box, the largest chain-connected blob of
points that project inside it. Stage two (GPC) re-clusters the union of all
LPC picks in world space, drops small components, and matches the survivors
back to tracks by in-box reprojection counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _graph_components

from .errors import ConfigError
from .geom import MIN_PROJECTION_DEPTH, Box2D, CameraFrame, Point3, project_array

__all__ = [
    "ClusterConfig",
    "ClusterSource",
    "ObjectCluster",
    "TrackedBox2D",
    "connected_components",
    "double_cluster",
    "gpc",
    "lpc",
    "match_clusters",
]


class ClusterSource(str, Enum):
    LPC = "lpc"
    GPC = "gpc"


@dataclass(frozen=True)
class TrackedBox2D:
    """One tracked object's 2D box in one frame."""

    track_id: int
    frame_id: int
    box: Box2D
    class_label: str = "object"


@dataclass(frozen=True)
class ObjectCluster:
    """A set of world points believed to belong to one object.

    Points are stored sorted by point id; `augmented` marks clusters whose
    points were deliberately cut down to mimic partial observation.
    """

    member_point_ids: frozenset
    point_ids: tuple
    points: tuple  # of Point3, parallel to point_ids
    source: ClusterSource
    matched_track_id: int | None = None
    augmented: bool = False

    def __post_init__(self):
        if len(self.point_ids) != len(self.points):
            raise ValueError("point_ids and points must be parallel")
        if frozenset(self.point_ids) != self.member_point_ids:
            raise ValueError("member_point_ids must equal the id tuple as a set")
        if len(self.member_point_ids) != len(self.point_ids):
            raise ValueError("cluster points must be deduplicated by id")

    @classmethod
    def from_points(cls, ids_points, source, matched_track_id=None, augmented=False):
        """Build from an iterable of (point_id, Point3), sorting by id."""
        pairs = sorted(ids_points, key=lambda ip: ip[0])
        ids = tuple(i for i, _ in pairs)
        return cls(
            member_point_ids=frozenset(ids),
            point_ids=ids,
            points=tuple(p for _, p in pairs),
            source=source,
            matched_track_id=matched_track_id,
            augmented=augmented,
        )

    @property
    def n_points(self) -> int:
        return len(self.points)

    def points_array(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3))
        return np.stack([p.as_array() for p in self.points])

    def with_match(self, track_id) -> "ObjectCluster":
        return replace(self, matched_track_id=track_id)


@dataclass(frozen=True)
class ClusterConfig:
    """Distance thresholds and the minimum cluster size."""

    delta1: float = 0.5
    delta2: float = 0.7
    theta: int = 100

    def __post_init__(self):
        if not (self.delta1 > 0 and self.delta2 > 0):
            raise ConfigError("distance thresholds must be positive")
        if self.theta < 1:
            raise ConfigError("theta must be >= 1")


def _expand_ranges(starts, counts):
    """Concatenate [s, s+c) integer ranges. starts/counts must be positive-length."""
    keep = counts > 0
    starts, counts = starts[keep], counts[keep]
    if starts.size == 0:
        return np.empty(0, dtype=np.int64)
    total = int(counts.sum())
    steps = np.ones(total, dtype=np.int64)
    steps[0] = starts[0]
    ends = np.cumsum(counts)
    steps[ends[:-1]] = starts[1:] - (starts[:-1] + counts[:-1]) + 1
    return np.cumsum(steps)


# The 13 lexicographically-positive cell offsets; together with within-cell
# pairs they cover every neighboring cell pair exactly once.
_HALF_OFFSETS = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) > (0, 0, 0)
]


def connected_components(points, eps: float) -> list:
    """Chain-connected components under a closed Euclidean threshold.

    Two points share a component iff a chain of input points connects them
    with consecutive squared distances <= eps**2. Input is a list of
    (point_id, Point3) with unique ids; output is a list of id sets ordered
    by smallest member id.
    """
    if not (eps > 0):
        raise ValueError("eps must be positive")
    ids = [i for i, _ in points]
    if len(set(ids)) != len(ids):
        raise ValueError("point ids must be unique")
    n = len(ids)
    if n == 0:
        return []
    coords = np.stack([p.as_array() for _, p in points])

    cells = np.floor(coords / eps).astype(np.int64)
    unique_cells, inv = np.unique(cells, axis=0, return_inverse=True)
    order = np.argsort(inv, kind="stable")
    sorted_cell = inv[order]
    cell_count = np.bincount(inv, minlength=len(unique_cells))
    cell_start = np.concatenate([[0], np.cumsum(cell_count)[:-1]])

    cell_index = {tuple(c): k for k, c in enumerate(unique_cells)}
    eps_sq = eps * eps
    left_parts, right_parts = [], []

    # Within-cell pairs: each point pairs with later points of its own cell.
    pos = np.empty(n, dtype=np.int64)
    pos[order] = np.arange(n)
    own_start = pos + 1
    own_count = cell_start[inv] + cell_count[inv] - 1 - pos
    lefts = np.repeat(np.arange(n), np.maximum(own_count, 0))
    rights = order[_expand_ranges(own_start, own_count)]
    left_parts.append(lefts)
    right_parts.append(rights)

    # Cross-cell pairs, one direction per neighbor offset.
    for off in _HALF_OFFSETS:
        nb = np.full(len(unique_cells), -1, dtype=np.int64)
        for k, c in enumerate(unique_cells):
            j = cell_index.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
            if j is not None:
                nb[k] = j
        nb_of_point = nb[inv]
        has = nb_of_point >= 0
        if not has.any():
            continue
        pts = np.arange(n)[has]
        nbc = nb_of_point[has]
        counts = cell_count[nbc]
        left_parts.append(np.repeat(pts, counts))
        right_parts.append(order[_expand_ranges(cell_start[nbc], counts)])

    left = np.concatenate(left_parts)
    right = np.concatenate(right_parts)
    if left.size:
        diff = coords[left] - coords[right]
        close = np.einsum("ij,ij->i", diff, diff) <= eps_sq
        left, right = left[close], right[close]

    graph = sp.coo_matrix(
        (np.ones(left.size, dtype=np.int8), (left, right)), shape=(n, n)
    )
    _, labels = _graph_components(graph, directed=False)

    groups = {}
    for idx, lab in enumerate(labels):
        groups.setdefault(lab, set()).add(ids[idx])
    return sorted(groups.values(), key=min)


def lpc(world_points, frame: CameraFrame, box: TrackedBox2D, cfg: ClusterConfig) -> ObjectCluster:
    """Largest in-box component for one (track, frame) pair.

    Filters world points that project inside the 2D box with positive
    depth, clusters them at delta1, and keeps the biggest component. Ties
    go to the component with smaller mean camera depth, then smaller
    minimum point id.
    """
    if box.frame_id != frame.frame_id:
        raise ValueError(f"box frame {box.frame_id} does not match frame {frame.frame_id}")
    if not world_points:
        return ObjectCluster.from_points([], ClusterSource.LPC)

    positions = np.stack([wp.position.as_array() for wp in world_points])
    uv, z = project_array(frame.pose, positions, frame.intrinsics)
    inside = (
        (z > MIN_PROJECTION_DEPTH)
        & (uv[:, 0] >= box.box.u_min)
        & (uv[:, 0] <= box.box.u_max)
        & (uv[:, 1] >= box.box.v_min)
        & (uv[:, 1] <= box.box.v_max)
    )
    if not inside.any():
        return ObjectCluster.from_points([], ClusterSource.LPC)

    kept = [world_points[i] for i in np.flatnonzero(inside)]
    depth_by_id = {wp.point_id: z[i] for wp, i in zip(kept, np.flatnonzero(inside))}
    comps = connected_components([(wp.point_id, wp.position) for wp in kept], cfg.delta1)

    def rank(comp):
        mean_depth = float(np.mean([depth_by_id[i] for i in comp]))
        return (-len(comp), mean_depth, min(comp))

    best = min(comps, key=rank)
    pos_by_id = {wp.point_id: wp.position for wp in kept}
    return ObjectCluster.from_points([(i, pos_by_id[i]) for i in best], ClusterSource.LPC)


def gpc(union_points, cfg: ClusterConfig) -> list:
    """World-frame re-clustering of the LPC union with a size floor.

    Components with fewer than theta points are discarded. Input is a list
    of (point_id, Point3), deduplicated by id.
    """
    comps = connected_components(union_points, cfg.delta2)
    pos_by_id = {i: p for i, p in union_points}
    clusters = []
    for comp in comps:
        if len(comp) < cfg.theta:
            continue
        clusters.append(
            ObjectCluster.from_points([(i, pos_by_id[i]) for i in comp], ClusterSource.GPC)
        )
    return clusters


def _inbox_counts(clusters, boxes, frames):
    """counts[c][track_id] = member reprojections inside that track's boxes."""
    frame_by_id = {f.frame_id: f for f in frames}
    boxes_by_frame = {}
    for b in boxes:
        boxes_by_frame.setdefault(b.frame_id, []).append(b)

    counts = [dict() for _ in clusters]
    arrays = [c.points_array() for c in clusters]
    for frame_id, frame_boxes in sorted(boxes_by_frame.items()):
        frame = frame_by_id.get(frame_id)
        if frame is None:
            continue
        for ci, pts in enumerate(arrays):
            if pts.shape[0] == 0:
                continue
            uv, z = project_array(frame.pose, pts, frame.intrinsics)
            ok = z > MIN_PROJECTION_DEPTH
            for b in frame_boxes:
                inside = (
                    ok
                    & (uv[:, 0] >= b.box.u_min)
                    & (uv[:, 0] <= b.box.u_max)
                    & (uv[:, 1] >= b.box.v_min)
                    & (uv[:, 1] <= b.box.v_max)
                )
                hits = int(inside.sum())
                if hits:
                    counts[ci][b.track_id] = counts[ci].get(b.track_id, 0) + hits
    return counts


def match_clusters(clusters, boxes, frames) -> list:
    """Assign each cluster to the track whose boxes contain most reprojections.

    Strict maximum over tracks (ties to the smaller track id); a track takes
    at most one cluster, keeping the higher in-box count (ties to the cluster
    with the smaller minimum point id). Zero-count clusters stay unmatched.
    """
    counts = _inbox_counts(clusters, boxes, frames)
    best = []
    for ci, per_track in enumerate(counts):
        if not per_track:
            best.append(None)
            continue
        track = min(per_track, key=lambda t: (-per_track[t], t))
        best.append((track, per_track[track]))

    by_track = {}
    for ci, choice in enumerate(best):
        if choice is None:
            continue
        track, count = choice
        key = (-count, min(clusters[ci].member_point_ids))
        incumbent = by_track.get(track)
        if incumbent is None or key < incumbent[0]:
            by_track[track] = (key, ci)

    winner_of = {ci: track for track, (_, ci) in by_track.items()}
    return [
        c.with_match(winner_of[ci]) if ci in winner_of else c.with_match(None)
        for ci, c in enumerate(clusters)
    ]


def double_cluster(world_points, frames, boxes, cfg: ClusterConfig) -> dict:
    """Full LPC + union + GPC + matching pass.

    Returns a map from track_id to its matched cluster; tracks whose points
    scatter or thin out simply do not appear.
    """
    if not boxes:
        return {}
    frame_by_id = {f.frame_id: f for f in frames}
    union = {}
    for b in sorted(boxes, key=lambda b: (b.track_id, b.frame_id)):
        frame = frame_by_id.get(b.frame_id)
        if frame is None:
            continue
        local = lpc(world_points, frame, b, cfg)
        for pid, pt in zip(local.point_ids, local.points):
            union.setdefault(pid, pt)

    clusters = gpc(sorted(union.items()), cfg)
    matched = match_clusters(clusters, boxes, frames)
    return {c.matched_track_id: c for c in matched if c.matched_track_id is not None}
