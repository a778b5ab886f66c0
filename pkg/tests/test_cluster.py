"""Clustering tests against a brute-force pairwise union-find oracle."""

import numpy as np
import pytest

from pseudobox.cluster import (
    ClusterConfig,
    ClusterSource,
    ObjectCluster,
    TrackedBox2D,
    connected_components,
    double_cluster,
    gpc,
    lpc,
    match_clusters,
)
from pseudobox.errors import ConfigError
from pseudobox.geom import Box2D, Point3, Pose, project
from pseudobox.simulate import SimConfig, simulate
from pseudobox.triangulate import WorldPoint

from helpers import camera_frame, look_at_pose, simple_intrinsics

K = simple_intrinsics(fx=1000.0, fy=1000.0)


def pts(coords, start_id=0):
    return [(start_id + i, Point3.from_array(np.asarray(c, float))) for i, c in enumerate(coords)]


def wp(point_id, xyz):
    return WorldPoint(
        point_id=point_id, position=Point3.from_array(np.asarray(xyz, float)),
        residual_rms=0.5, n_views=2,
    )


def brute_components(points, eps):
    """O(n^2) pairwise union-find, the correctness oracle."""
    ids = [i for i, _ in points]
    n = len(ids)
    if n == 0:
        return []
    coords = np.stack([p.as_array() for _, p in points])
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    eps2 = eps * eps

    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if d2[i, j] <= eps2:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj

    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(ids[i])
    return sorted(groups.values(), key=min)


def random_point_set(rng, n):
    """Mix of uniform scatter and tight blobs, the regime clustering sees."""
    coords = [rng.uniform(0, 10, size=(n // 2, 3))]
    remaining = n - n // 2
    while remaining > 0:
        k = min(remaining, int(rng.integers(5, 60)))
        center = rng.uniform(0, 10, size=3)
        coords.append(center + rng.normal(0, 0.15, size=(k, 3)))
        remaining -= k
    return pts(np.concatenate(coords))


# ------------------------------------------------------- connected components


def test_chain_through_middle_point_is_one_component():
    points = pts([(0, 0, 0), (0.4, 0, 0), (0.8, 0, 0)])
    assert connected_components(points, 0.5) == [{0, 1, 2}]


def test_gap_above_threshold_splits():
    points = pts([(0, 0, 0), (0.6, 0, 0)])
    assert connected_components(points, 0.5) == [{0}, {1}]


def test_threshold_is_closed():
    points = pts([(0, 0, 0), (0.5, 0, 0)])
    assert connected_components(points, 0.5) == [{0, 1}]


def test_empty_and_singleton():
    assert connected_components([], 0.5) == []
    assert connected_components(pts([(1, 2, 3)]), 0.5) == [{0}]


@pytest.mark.parametrize("seed", range(8))
@pytest.mark.parametrize("eps", [0.25, 0.5, 0.7])
def test_matches_brute_force_oracle(seed, eps):
    rng = np.random.default_rng(seed)
    points = random_point_set(rng, int(rng.integers(50, 400)))
    got = connected_components(points, eps)
    want = brute_components(points, eps)
    assert sorted(map(frozenset, got)) == sorted(map(frozenset, want))


def test_partition_and_separation_properties():
    rng = np.random.default_rng(42)
    points = random_point_set(rng, 300)
    eps = 0.5
    comps = connected_components(points, eps)

    all_ids = [i for i, _ in points]
    covered = sorted(i for c in comps for i in c)
    assert covered == sorted(all_ids), "components must cover every input id"
    assert len(covered) == len(set(covered)), "components must be disjoint"

    coords = {i: p.as_array() for i, p in points}
    label = {}
    for li, c in enumerate(comps):
        for i in c:
            label[i] = li
    for i in all_ids:
        for j in all_ids:
            if i < j and label[i] != label[j]:
                assert np.sum((coords[i] - coords[j]) ** 2) > eps * eps

    # Every member is reachable by a witness chain with steps <= eps.
    for c in comps:
        members = sorted(c)
        seen = {members[0]}
        frontier = [members[0]]
        while frontier:
            cur = frontier.pop()
            for j in members:
                if j not in seen and np.sum((coords[cur] - coords[j]) ** 2) <= eps * eps:
                    seen.add(j)
                    frontier.append(j)
        assert seen == c


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    points = random_point_set(rng, 200)
    base = connected_components(points, 0.5)
    shuffled = list(points)
    rng.shuffle(shuffled)
    again = connected_components(shuffled, 0.5)
    assert sorted(map(frozenset, base)) == sorted(map(frozenset, again))


def test_rejects_duplicate_ids_and_bad_eps():
    with pytest.raises(ValueError):
        connected_components([(0, Point3(0, 0, 0)), (0, Point3(1, 0, 0))], 0.5)
    with pytest.raises(ValueError):
        connected_components(pts([(0, 0, 0)]), 0.0)


# ------------------------------------------------------------------- LPC


def front_camera():
    """Camera at the origin looking down world +z."""
    return camera_frame(0, Pose(np.eye(3), np.zeros(3)), K)


def blob(center, n, rng, spread=0.03):
    return np.asarray(center, float) + rng.normal(0, spread, size=(n, 3))


def project_bbox(frame, coords, pad=2.0):
    us, vs = [], []
    for c in coords:
        px = project(frame.pose, Point3.from_array(c), frame.intrinsics)
        us.append(px.u)
        vs.append(px.v)
    return Box2D(min(us) - pad, min(vs) - pad, max(us) + pad, max(vs) + pad)


def test_lpc_picks_the_only_blob():
    rng = np.random.default_rng(0)
    frame = front_camera()
    coords = blob((0, 0, 10), 3, rng)
    points = [wp(i, c) for i, c in enumerate(coords)]
    box = TrackedBox2D(track_id=7, frame_id=0, box=project_bbox(frame, coords))
    out = lpc(points, frame, box, ClusterConfig())
    assert out.member_point_ids == {0, 1, 2}
    assert out.source is ClusterSource.LPC


def test_lpc_biggest_component_wins():
    rng = np.random.default_rng(1)
    frame = front_camera()
    fg = blob((0, 0, 10), 50, rng)
    bg = blob((0.3, 0.3, 40), 20, rng)  # projects into the same box, far in 3D
    points = [wp(i, c) for i, c in enumerate(np.concatenate([fg, bg]))]
    box = TrackedBox2D(0, 0, project_bbox(frame, np.concatenate([fg, bg])))
    out = lpc(points, frame, box, ClusterConfig())
    assert out.member_point_ids == set(range(50))


def test_lpc_size_tie_breaks_by_nearer_mean_depth():
    rng = np.random.default_rng(2)
    frame = front_camera()
    near = blob((0, 0, 10), 10, rng)
    far = blob((0.3, 0.3, 40), 10, rng)
    points = [wp(i, c) for i, c in enumerate(np.concatenate([far, near]))]
    box = TrackedBox2D(0, 0, project_bbox(frame, np.concatenate([far, near])))
    out = lpc(points, frame, box, ClusterConfig())
    assert out.member_point_ids == set(range(10, 20)), "nearer blob must win the tie"


def test_lpc_full_tie_breaks_by_smallest_point_id():
    frame = front_camera()
    # Two 2-point blobs at the same depth, symmetric around the axis.
    left = [(-1.0, 0.0, 10.0), (-1.0, 0.1, 10.0)]
    right = [(1.0, 0.0, 10.0), (1.0, 0.1, 10.0)]
    coords = np.array(left + right)
    points = [wp(i, c) for i, c in enumerate(coords)]
    box = TrackedBox2D(0, 0, project_bbox(frame, coords))
    out = lpc(points, frame, box, ClusterConfig())
    assert out.member_point_ids == {0, 1}


def test_lpc_ignores_points_behind_camera_and_outside_box():
    rng = np.random.default_rng(3)
    frame = front_camera()
    visible = blob((0, 0, 10), 5, rng)
    behind = blob((0, 0, -10), 5, rng)
    aside = blob((5, 0, 10), 5, rng)  # projects far to the right
    coords = np.concatenate([visible, behind, aside])
    points = [wp(i, c) for i, c in enumerate(coords)]
    box = TrackedBox2D(0, 0, project_bbox(frame, visible))
    out = lpc(points, frame, box, ClusterConfig())
    assert out.member_point_ids == set(range(5))


def test_lpc_empty_when_nothing_projects_inside():
    frame = front_camera()
    points = [wp(0, (5.0, 5.0, 10.0))]
    box = TrackedBox2D(0, 0, Box2D(0.0, 0.0, 10.0, 10.0))
    out = lpc(points, frame, box, ClusterConfig())
    assert out.n_points == 0 and out.member_point_ids == frozenset()


def test_lpc_checks_frame_id():
    frame = front_camera()
    box = TrackedBox2D(track_id=0, frame_id=3, box=Box2D(0, 0, 10, 10))
    with pytest.raises(ValueError):
        lpc([wp(0, (0, 0, 10))], frame, box, ClusterConfig())


def test_lpc_stays_within_owner_points_on_simulated_scene():
    # Exact truth positions, exact boxes: the biggest in-box cluster should
    # belong to the box's own track almost everywhere. Residual misses are
    # nested projections, where a foreground object falls entirely inside a
    # background box and wins the depth tie-break.
    bundle = simulate(SimConfig(seed=1, n_objects=20, n_frames=30,
                                points_per_object=300))
    truth = bundle.truth
    world = [wp(pid, pos.as_array())
             for pid, pos in sorted(truth.point_positions.items())]
    owner = {}
    for pid, tid in truth.point_to_track.items():
        owner.setdefault(tid, set()).add(pid)
    frames = {f.frame_id: f for f in bundle.frames}
    cfg = ClusterConfig()
    clean = 0
    for b in bundle.tracks2d:
        out = lpc(world, frames[b.frame_id], b, cfg)
        if set(out.member_point_ids) <= owner[b.track_id]:
            clean += 1
    assert len(bundle.tracks2d) > 400
    assert clean / len(bundle.tracks2d) >= 0.95


# ------------------------------------------------------------------- GPC


def test_gpc_separates_far_blobs():
    rng = np.random.default_rng(4)
    a = blob((0, 0, 0), 150, rng)
    b = blob((5, 0, 0), 150, rng)
    clusters = gpc(pts(np.concatenate([a, b])), ClusterConfig())
    assert len(clusters) == 2
    assert {frozenset(c.member_point_ids) for c in clusters} == {
        frozenset(range(150)),
        frozenset(range(150, 300)),
    }
    assert all(c.source is ClusterSource.GPC for c in clusters)


def test_gpc_size_filter_boundary():
    rng = np.random.default_rng(5)
    assert gpc(pts(blob((0, 0, 0), 99, rng)), ClusterConfig()) == []
    kept = gpc(pts(blob((0, 0, 0), 100, rng)), ClusterConfig())
    assert len(kept) == 1 and kept[0].n_points == 100


@pytest.mark.parametrize("seed", range(4))
def test_gpc_matches_oracle_with_size_filter(seed):
    rng = np.random.default_rng(100 + seed)
    points = random_point_set(rng, 300)
    cfg = ClusterConfig(theta=20)
    got = {frozenset(c.member_point_ids) for c in gpc(points, cfg)}
    want = {
        frozenset(c) for c in brute_components(points, cfg.delta2) if len(c) >= cfg.theta
    }
    assert got == want


# ------------------------------------------------------------- matching


def row_cluster(n, x0=0.0, start_id=0, z=10.0, step=0.1):
    coords = [(x0 + i * step, 0.0, z) for i in range(n)]
    return ObjectCluster.from_points(
        [(start_id + i, Point3.from_array(np.asarray(c))) for i, c in enumerate(coords)],
        ClusterSource.GPC,
    )


def test_match_prefers_the_covering_track():
    rng = np.random.default_rng(6)
    frame_list = [front_camera()]
    coords = blob((0, 0, 10), 30, rng)
    cluster = ObjectCluster.from_points(
        [(i, Point3.from_array(c)) for i, c in enumerate(coords)], ClusterSource.GPC
    )
    boxes = [
        TrackedBox2D(1, 0, project_bbox(frame_list[0], coords)),
        TrackedBox2D(2, 0, Box2D(0.0, 0.0, 50.0, 50.0)),
    ]
    (out,) = match_clusters([cluster], boxes, frame_list)
    assert out.matched_track_id == 1


def test_match_is_a_strict_maximum():
    frame_list = [front_camera()]
    cluster = row_cluster(81)  # u = 960 + 10*i for i in 0..80
    box_a = TrackedBox2D(1, 0, Box2D(955.0, 600.0, 1355.0, 680.0))  # covers i 0..39
    box_b = TrackedBox2D(2, 0, Box2D(1356.0, 600.0, 1765.0, 680.0))  # covers i 40..80
    (out,) = match_clusters([cluster], [box_a, box_b], frame_list)
    assert out.matched_track_id == 2, "41 beats 40"


def test_match_conflict_keeps_higher_count_cluster():
    frame_list = [front_camera()]
    big = row_cluster(60, x0=-3.0, start_id=0)
    small = row_cluster(30, x0=1.0, start_id=1000)
    box = TrackedBox2D(5, 0, Box2D(0.0, 0.0, 1920.0, 1280.0))
    out = match_clusters([small, big], [box], frame_list)
    assert out[1].matched_track_id == 5
    assert out[0].matched_track_id is None, "loser stays unmatched"


def test_match_zero_count_stays_unmatched():
    frame_list = [front_camera()]
    cluster = row_cluster(10)
    box = TrackedBox2D(1, 0, Box2D(0.0, 0.0, 10.0, 10.0))
    (out,) = match_clusters([cluster], [box], frame_list)
    assert out.matched_track_id is None


# ------------------------------------------------------------- DoubleCluster


def test_double_cluster_two_static_blobs():
    rng = np.random.default_rng(7)
    blob_a = blob((-2, 0, 0), 150, rng)
    blob_b = blob((2, 0, 0), 150, rng)
    frames = [
        camera_frame(i, look_at_pose((0.5 * i - 1, -15, 1.6), (0, 0, 0)), K) for i in range(5)
    ]
    points = [wp(i, c) for i, c in enumerate(np.concatenate([blob_a, blob_b]))]
    boxes = []
    for f in frames:
        boxes.append(TrackedBox2D(1, f.frame_id, project_bbox(f, blob_a)))
        boxes.append(TrackedBox2D(2, f.frame_id, project_bbox(f, blob_b)))

    result = double_cluster(points, frames, boxes, ClusterConfig())
    assert set(result) == {1, 2}
    assert result[1].member_point_ids <= set(range(150))
    assert result[2].member_point_ids <= set(range(150, 300))
    assert result[1].n_points >= 100 and result[2].n_points >= 100


def test_double_cluster_empty_boxes():
    assert double_cluster([wp(0, (0, 0, 10))], [front_camera()], [], ClusterConfig()) == {}


# ------------------------------------------------------------- validation


def test_cluster_config_validation():
    with pytest.raises(ConfigError):
        ClusterConfig(delta1=0.0)
    with pytest.raises(ConfigError):
        ClusterConfig(delta2=-1.0)
    with pytest.raises(ConfigError):
        ClusterConfig(theta=0)


def test_object_cluster_validation():
    p = Point3(0, 0, 0)
    with pytest.raises(ValueError):
        ObjectCluster(
            member_point_ids=frozenset({0, 1}), point_ids=(0,), points=(p,),
            source=ClusterSource.LPC,
        )
    with pytest.raises(ValueError):
        ObjectCluster(
            member_point_ids=frozenset({0}), point_ids=(0, 0), points=(p, p),
            source=ClusterSource.LPC,
        )
