"""Detection metrics for yaw-only 7-DoF boxes.

IoU is exact: convex BEV polygon clipping times vertical interval overlap.
AP uses greedy score-ordered matching and continuous all-points
interpolation; APH weights true positives by heading similarity and APL by
longitudinal affinity, in both precision and recall. Object "depth" here
is range: Euclidean distance from the sensor origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .boxfit import OrientedBox3D
from .errors import ConfigError, InvalidBox, NonPositiveDepth
from .geom import Point3

_AREA_EPS = 1e-12


@dataclass(frozen=True)
class EvalConfig:
    """Thresholds, LET tolerance, and depth bucket edges."""

    iou_thresholds: tuple = (0.05, 0.5)
    let_longitudinal_tolerance: float = 0.10
    let_iou_threshold: float = 0.5
    depth_buckets: tuple = ((0.0, 30.0), (30.0, 50.0), (50.0, math.inf))

    def __post_init__(self):
        object.__setattr__(self, "iou_thresholds", tuple(self.iou_thresholds))
        object.__setattr__(
            self, "depth_buckets", tuple(tuple(b) for b in self.depth_buckets)
        )
        for t in self.iou_thresholds + (self.let_iou_threshold,):
            if not (0 < t <= 1):
                raise ConfigError(f"IoU threshold {t} outside (0, 1]")
        if not (self.let_longitudinal_tolerance > 0):
            raise ConfigError("let_longitudinal_tolerance must be positive")
        prev_hi = 0.0
        for lo, hi in self.depth_buckets:
            if not (lo < hi):
                raise ConfigError("bucket bounds must be increasing")
            if lo < prev_hi:
                raise ConfigError("buckets must be disjoint and ordered")
            prev_hi = hi


@dataclass(frozen=True)
class MatchResult:
    pred_index: int
    gt_index: int
    iou: float
    heading_similarity: float


@dataclass(frozen=True)
class DepthMetrics:
    delta_1: float
    delta_2: float
    delta_3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float


def _polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip a polygon by each edge of a convex CCW clip."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        polygon, output = output, []
        prev = polygon[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in polygon:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                # a parallel segment can only straddle through rounding, in
                # which case it lies on the edge line and adds no vertex
                if denom != 0.0:
                    t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                    output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _require_3d(box: OrientedBox3D):
    w, h, l = box.size
    if not box.has_3d or not (w > 0 and h > 0 and l > 0):
        raise InvalidBox("IoU needs 3D boxes with positive sizes")


def iou3d_yaw(a: OrientedBox3D, b: OrientedBox3D) -> float:
    """Exact 3D IoU for boxes that rotate about the vertical axis only."""
    _require_3d(a)
    _require_3d(b)
    z_overlap = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if z_overlap <= 0:
        return 0.0
    inter_poly = _clip_polygon(a.bev_corners(), b.bev_corners())
    if len(inter_poly) < 3:
        return 0.0
    inter_area = _polygon_area(inter_poly)
    if inter_area < _AREA_EPS:
        return 0.0
    inter = inter_area * z_overlap
    vol_a = a.size[0] * a.size[1] * a.size[2]
    vol_b = b.size[0] * b.size[1] * b.size[2]
    return float(inter / (vol_a + vol_b - inter))


def _center_array(box: OrientedBox3D) -> np.ndarray:
    return np.array([box.center.x, box.center.y, box.center.z])


def longitudinal_affinity(
    pred: OrientedBox3D, gt: OrientedBox3D, cfg: EvalConfig, sensor_origin=None
) -> float:
    """1 at zero along-ray error, falling to 0 at the tolerance fraction of
    the gt range."""
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, float)
    c_g = _center_array(gt) - origin
    gt_range = float(np.linalg.norm(c_g))
    if gt_range <= 0:
        raise ValueError("gt center coincides with the sensor origin")
    u_g = c_g / gt_range
    err = abs(float((_center_array(pred) - origin - c_g) @ u_g))
    return float(np.clip(1.0 - err / (cfg.let_longitudinal_tolerance * gt_range), 0.0, 1.0))


def let_iou(
    pred: OrientedBox3D, gt: OrientedBox3D, cfg: EvalConfig, sensor_origin=None
) -> tuple:
    """Longitudinal-error-tolerant IoU plus the longitudinal affinity.

    The prediction is slid along its own sensor ray onto the point nearest
    the gt center before computing IoU. Forgiving range error can never
    penalize, so the raw IoU is a floor on the result.
    """
    _require_3d(pred)
    _require_3d(gt)
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, float)
    c_p = _center_array(pred) - origin
    pred_range = float(np.linalg.norm(c_p))
    raw = iou3d_yaw(pred, gt)
    affinity = longitudinal_affinity(pred, gt, cfg, sensor_origin)
    if pred_range <= 0:
        return raw, affinity
    u_p = c_p / pred_range
    c_g = _center_array(gt) - origin
    aligned_center = origin + float(c_g @ u_p) * u_p
    aligned = OrientedBox3D(
        center=Point3.from_array(aligned_center),
        size=pred.size,
        yaw=pred.yaw,
        score=pred.score,
        class_label=pred.class_label,
        track_id=pred.track_id,
        has_3d=pred.has_3d,
        complete=pred.complete,
        anchor_frame_id=pred.anchor_frame_id,
    )
    return max(iou3d_yaw(aligned, gt), raw), affinity


def heading_similarity(pred_yaw: float, gt_yaw: float, flip_tolerant: bool) -> float:
    """1 at equal headings, linear falloff; flips count as exact when tolerated."""
    err = abs((pred_yaw - gt_yaw + math.pi) % (2 * math.pi) - math.pi)
    if flip_tolerant:
        err = min(err, abs(err - math.pi))
        sim = 1.0 - err / (math.pi / 2)
    else:
        sim = 1.0 - err / math.pi
    return float(np.clip(sim, 0.0, 1.0))


@dataclass
class _PredOutcome:
    pred_index: int
    score: float
    gt_index: int | None = None
    iou: float = 0.0
    affinity: float = 1.0


def _greedy_match(preds, gts, criterion, threshold, cfg, sensor_origin, need_affinity=False):
    """Score-descending greedy matching; each gt claimed at most once."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    outcomes = []
    for i in order:
        best_val, best_gt, best_aff = 0.0, None, 1.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            if criterion == "let":
                val, aff = let_iou(preds[i], gt, cfg, sensor_origin)
            else:
                val, aff = iou3d_yaw(preds[i], gt), 1.0
            if val >= threshold and (best_gt is None or val > best_val):
                best_val, best_gt, best_aff = val, j, aff
        out = _PredOutcome(pred_index=i, score=preds[i].score)
        if best_gt is not None:
            taken[best_gt] = True
            if criterion != "let" and need_affinity:
                best_aff = longitudinal_affinity(preds[i], gts[best_gt], cfg, sensor_origin)
            out.gt_index, out.iou, out.affinity = best_gt, best_val, best_aff
        outcomes.append(out)
    return outcomes


def match_predictions(
    preds, gts, criterion="iou", threshold=0.5, cfg=None, sensor_origin=None
) -> list:
    """Matched pairs only, in descending prediction-score order."""
    cfg = cfg or EvalConfig()
    results = []
    for out in _greedy_match(preds, gts, criterion, threshold, cfg, sensor_origin):
        if out.gt_index is None:
            continue
        results.append(
            MatchResult(
                pred_index=out.pred_index,
                gt_index=out.gt_index,
                iou=out.iou,
                heading_similarity=heading_similarity(
                    preds[out.pred_index].yaw, gts[out.gt_index].yaw, flip_tolerant=False
                ),
            )
        )
    return results


def _envelope_area(recalls, precisions) -> float:
    """Continuous all-points interpolation of a PR curve."""
    mrec = [0.0] + list(recalls) + [recalls[-1] if recalls else 0.0]
    mpre = [1.0] + list(precisions) + [0.0]
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    terms = []
    for i in range(1, len(mrec)):
        dr = mrec[i] - mrec[i - 1]
        if dr > 0:
            terms.append(dr * mpre[i])
    return math.fsum(terms)


def average_precision(
    preds,
    gts,
    criterion: str = "iou",
    threshold: float = 0.5,
    heading_weighted: bool = False,
    cfg: EvalConfig | None = None,
    *,
    affinity_weighted: bool = False,
    flip_tolerant: bool = False,
    sensor_origin=None,
) -> float:
    """AP over one class at one threshold.

    heading_weighted gives APH, affinity_weighted gives APL (both weight the
    true-positive mass in precision and recall alike). An empty task (no
    gts, no preds) scores 1.0; the report layer renders it as n/a.
    """
    if criterion not in ("iou", "let"):
        raise ValueError(f"unknown criterion {criterion!r}")
    cfg = cfg or EvalConfig()
    if not gts and not preds:
        return 1.0
    if not gts or not preds:
        return 0.0

    outcomes = _greedy_match(
        preds, gts, criterion, threshold, cfg, sensor_origin,
        need_affinity=affinity_weighted,
    )
    return _pr_area(
        outcomes, len(gts), preds, gts, heading_weighted, affinity_weighted, flip_tolerant
    )


def _pr_points(
    outcomes, n_gt, preds, gts, heading_weighted, affinity_weighted, flip_tolerant=False
):
    recalls, precisions = [], []
    tp_mass = 0.0
    for k, out in enumerate(outcomes, start=1):
        if out.gt_index is not None:
            weight = 1.0
            if heading_weighted:
                weight *= heading_similarity(
                    preds[out.pred_index].yaw, gts[out.gt_index].yaw, flip_tolerant
                )
            if affinity_weighted:
                weight *= out.affinity
            tp_mass += weight
        recalls.append(tp_mass / n_gt)
        precisions.append(tp_mass / k)
    return recalls, precisions


def _pr_area(
    outcomes, n_gt, preds, gts, heading_weighted, affinity_weighted, flip_tolerant=False
) -> float:
    recalls, precisions = _pr_points(
        outcomes, n_gt, preds, gts, heading_weighted, affinity_weighted, flip_tolerant
    )
    return _envelope_area(recalls, precisions)


def pr_curve(
    preds,
    gts,
    criterion: str = "iou",
    threshold: float = 0.5,
    cfg: EvalConfig | None = None,
    *,
    sensor_origin=None,
) -> list:
    """Unweighted (recall, precision) staircase, one point per prediction.

    Points come in descending prediction-score order, exactly the curve
    that average_precision integrates. Degenerate tasks give no points.
    """
    if criterion not in ("iou", "let"):
        raise ValueError(f"unknown criterion {criterion!r}")
    cfg = cfg or EvalConfig()
    if not gts or not preds:
        return []
    outcomes = _greedy_match(preds, gts, criterion, threshold, cfg, sensor_origin)
    recalls, precisions = _pr_points(outcomes, len(gts), preds, gts, False, False)
    return list(zip(recalls, precisions))


def depth_metrics(pairs) -> DepthMetrics:
    """Depth-estimation error statistics over (pred_depth, gt_depth) pairs."""
    if not pairs:
        raise ValueError("depth_metrics needs at least one pair")
    pred = np.array([p for p, _ in pairs], dtype=float)
    gt = np.array([g for _, g in pairs], dtype=float)
    if not (np.all(pred > 0) and np.all(gt > 0)):
        raise NonPositiveDepth("depths must be positive")
    ratio = np.maximum(pred / gt, gt / pred)
    diff = pred - gt
    return DepthMetrics(
        delta_1=float(np.mean(ratio < 1.25)),
        delta_2=float(np.mean(ratio < 1.25**2)),
        delta_3=float(np.mean(ratio < 1.25**3)),
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff**2 / gt)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
    )


def _box_range(box: OrientedBox3D, origin: np.ndarray) -> float:
    return float(np.linalg.norm(_center_array(box) - origin))


def bucket_report(
    preds,
    gts,
    cfg: EvalConfig | None = None,
    *,
    criterion: str = "iou",
    threshold: float | None = None,
    sensor_origin=None,
) -> list:
    """Per-depth-bucket AP/APH/APL from one global matching pass.

    Gts fall into buckets by range; matched predictions follow their gt,
    unmatched ones bucket by their own range. Buckets are half-open and a
    bucket with neither gts nor predictions reports None (n/a).
    """
    cfg = cfg or EvalConfig()
    if threshold is None:
        threshold = cfg.iou_thresholds[-1]
    origin = np.zeros(3) if sensor_origin is None else np.asarray(sensor_origin, float)
    outcomes = _greedy_match(
        preds, gts, criterion, threshold, cfg, sensor_origin, need_affinity=True
    )

    def bucket_of(depth):
        for bi, (lo, hi) in enumerate(cfg.depth_buckets):
            if lo <= depth < hi:
                return bi
        return None

    gt_bucket = [bucket_of(_box_range(g, origin)) for g in gts]
    rows = []
    for bi, (lo, hi) in enumerate(cfg.depth_buckets):
        bucket_gts = [j for j, b in enumerate(gt_bucket) if b == bi]
        bucket_outcomes = []
        for out in outcomes:
            if out.gt_index is not None:
                if gt_bucket[out.gt_index] == bi:
                    bucket_outcomes.append(out)
            elif bucket_of(_box_range(preds[out.pred_index], origin)) == bi:
                bucket_outcomes.append(out)

        row = {
            "range": (lo, hi),
            "n_gt": len(bucket_gts),
            "n_pred": len(bucket_outcomes),
            "ap": None,
            "aph": None,
            "apl": None,
        }
        if bucket_gts or bucket_outcomes:
            row["ap"] = _bucket_ap(bucket_outcomes, len(bucket_gts), preds, gts, False, False)
            row["aph"] = _bucket_ap(bucket_outcomes, len(bucket_gts), preds, gts, True, False)
            row["apl"] = _bucket_ap(bucket_outcomes, len(bucket_gts), preds, gts, False, True)
        rows.append(row)
    return rows


def _bucket_ap(outcomes, n_gt, preds, gts, heading_weighted, affinity_weighted) -> float:
    if n_gt == 0:
        return 0.0 if outcomes else 1.0
    if not outcomes:
        return 0.0
    return _pr_area(outcomes, n_gt, preds, gts, heading_weighted, affinity_weighted)
