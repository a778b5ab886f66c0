"""End-to-end label generation and the evaluation report.

run_global_ba chains the geometric stages: parallax gate, linear
triangulation, per-point refinement, double clustering, box fitting, and
depth-range selection. It emits exactly one label per 2D track; tracks
without a usable cluster become 2D-only labels rather than disappearing.
evaluate scores a label set against scene truth and returns a plain dict
that serializes to the report JSON as-is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .boxfit import FitConfig, OrientedBox3D, completeness_filter, fit_box7
from .cluster import ClusterConfig, double_cluster
from .errors import ConfigError, GateSkipped
from .evalmetrics import (
    EvalConfig,
    average_precision,
    bucket_report,
    depth_metrics,
)
from .geom import Point3
from .labelstore import PSEUDO_INITIAL, Label, LabelSet, select_by_depth
from .sceneio import SceneBundle
from .triangulate import BaConfig, WorldPoint, parallax_gate, refine_points, triangulate_dlt

__all__ = [
    "PipelineConfig",
    "fit_labels",
    "run_global_ba",
    "evaluate",
    "render_report_text",
    "save_report",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Every stage's knobs plus the label-store policy."""

    ba: BaConfig = field(default_factory=BaConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    initial_depth_range: tuple = (0.5, 200.0)
    retrain_depth_range: tuple = (0.5, 75.0)
    score_floor: float = 0.5

    def __post_init__(self):
        for name in ("initial_depth_range", "retrain_depth_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi):
                raise ConfigError(f"{name} must satisfy 0 <= min < max")
        if not (0.0 <= self.score_floor <= 1.0):
            raise ConfigError("score_floor must be in [0, 1]")


def _anchor_frames(tracks2d) -> dict:
    """track_id -> frame holding its largest 2D box (ties: earliest frame)."""
    best = {}
    for b in tracks2d:
        key = (-b.box.area(), b.frame_id)
        if b.track_id not in best or key < best[b.track_id][0]:
            best[b.track_id] = (key, b.frame_id)
    return {tid: frame_id for tid, (_, frame_id) in best.items()}


def _track_labels(tracks2d) -> dict:
    labels = {}
    for b in sorted(tracks2d, key=lambda b: (b.track_id, b.frame_id)):
        labels.setdefault(b.track_id, b.class_label)
    return labels


def _flat_label(track_id: int, class_label: str, anchor_frame_id: int | None) -> Label:
    box = OrientedBox3D(
        center=Point3(0.0, 0.0, 0.0),
        size=(0.0, 0.0, 0.0),
        yaw=0.0,
        score=0.0,
        class_label=class_label,
        track_id=track_id,
        has_3d=False,
        complete=False,
        anchor_frame_id=anchor_frame_id,
    )
    return Label(box=box, tag=PSEUDO_INITIAL)


def fit_labels(tracks2d, clusters_by_track: dict, residual_by_id: dict, fit_cfg: FitConfig) -> LabelSet:
    """One initial-generation label per 2D track.

    Tracks with a matched cluster get a fitted box whose score uses the
    mean refinement residual of the member points; the rest get 2D-only
    placeholder labels. The anchor frame is the track's largest 2D box
    (earliest frame on ties).
    """
    anchors = _anchor_frames(tracks2d)
    classes = _track_labels(tracks2d)
    labels = []
    for tid in sorted(classes):
        cluster = clusters_by_track.get(tid)
        if cluster is None:
            labels.append(_flat_label(tid, classes[tid], anchors.get(tid)))
            continue
        rms = float(np.mean([residual_by_id[pid] for pid in cluster.point_ids]))
        box = fit_box7(
            cluster,
            fit_cfg,
            residual_rms_px=rms,
            class_label=classes[tid],
            anchor_frame_id=anchors.get(tid),
        )
        box = replace(box, complete=completeness_filter(box, fit_cfg))
        labels.append(Label(box=box, tag=PSEUDO_INITIAL))
    return LabelSet(tuple(labels))


def run_global_ba(bundle: SceneBundle, cfg: PipelineConfig | None = None) -> LabelSet:
    """Geometry-only pseudo labels for every 2D track in the bundle.

    Raises GateSkipped (with the all-2D label set attached) when the
    camera never moves far enough to triangulate.
    """
    cfg = cfg or PipelineConfig()
    if not parallax_gate(list(bundle.frames), cfg.ba):
        anchors = _anchor_frames(bundle.tracks2d)
        classes = _track_labels(bundle.tracks2d)
        labels = LabelSet(
            tuple(
                _flat_label(tid, classes[tid], anchors.get(tid))
                for tid in sorted(classes)
            )
        )
        raise GateSkipped("camera baseline below the parallax gate", labels=labels)

    seeds = []
    for track in bundle.obs_tracks:
        if len(track.observations) < 2:
            continue
        try:
            position = triangulate_dlt(track, bundle.frames)
        except Exception:
            continue
        seeds.append(
            WorldPoint(
                point_id=track.point_id,
                position=position,
                residual_rms=0.0,
                n_views=len(track.observations),
            )
        )
    refined = refine_points(seeds, bundle.obs_tracks, bundle.frames, cfg.ba)
    residual_by_id = {p.point_id: p.residual_rms for p in refined}

    clusters = double_cluster(refined, bundle.frames, bundle.tracks2d, cfg.cluster)
    label_set = fit_labels(bundle.tracks2d, clusters, residual_by_id, cfg.fit)
    return select_by_depth(label_set, cfg.initial_depth_range, bundle.frames)


# ------------------------------------------------------------- evaluation


def _range_from(origin: np.ndarray, box: OrientedBox3D) -> float:
    return float(np.linalg.norm(box.center.as_array() - origin))


def _ap_block(preds, gts, threshold, cfg, origin, criterion) -> dict:
    common = dict(criterion=criterion, threshold=threshold, cfg=cfg, sensor_origin=origin)
    return {
        "ap": average_precision(preds, gts, **common),
        "aph": average_precision(preds, gts, heading_weighted=True, **common),
        "aph_flip": average_precision(
            preds, gts, heading_weighted=True, flip_tolerant=True, **common
        ),
        "apl": average_precision(preds, gts, affinity_weighted=True, **common),
    }


def evaluate(
    labels: LabelSet,
    truth,
    frames,
    cfg: EvalConfig | None = None,
) -> dict:
    """Score labels against scene truth; returns the JSON-ready report.

    Ground truth is each object's box at its first trajectory frame, the
    sensor origin is the earliest frame's camera center, and object depth
    pairs match labels to truth by track id.
    """
    cfg = cfg or EvalConfig()
    if not frames:
        raise ValueError("evaluate needs at least one camera frame")
    origin = sorted(frames, key=lambda f: f.frame_id)[0].pose.camera_center()

    gts = [o.first_box for o in truth.objects]
    preds = [lb.box for lb in labels if lb.box.has_3d]

    report = {
        "counts": {
            "n_gt": len(gts),
            "n_pred_3d": len(preds),
            "n_pred_2d": len(labels) - len(preds),
        },
        "thresholds": {},
        "let": {"threshold": cfg.let_iou_threshold},
        "buckets": [],
        "depth": {},
    }
    for thr in cfg.iou_thresholds:
        report["thresholds"][format(thr, "g")] = _ap_block(
            preds, gts, thr, cfg, origin, "iou"
        )
    report["let"].update(
        _ap_block(preds, gts, cfg.let_iou_threshold, cfg, origin, "let")
    )
    for row in bucket_report(preds, gts, cfg, sensor_origin=origin):
        lo, hi = row["range"]
        rendered = dict(row)
        rendered["range"] = f"[{format(lo, 'g')}, {format(hi, 'g')})"
        report["buckets"].append(rendered)

    truth_by_track = {o.track_id: o for o in truth.objects}
    pairs = {"with_pseudo_label": [], "without_pseudo_label": []}
    for lb in labels:
        obj = truth_by_track.get(lb.box.track_id)
        if obj is None or not lb.box.has_3d:
            continue
        side = (
            "with_pseudo_label"
            if lb.tag.kind == "pseudo_initial"
            else "without_pseudo_label"
        )
        pairs[side].append(
            (_range_from(origin, lb.box), _range_from(origin, obj.first_box))
        )
    for side, side_pairs in pairs.items():
        if not side_pairs:
            report["depth"][side] = None
            continue
        dm = depth_metrics(side_pairs)
        report["depth"][side] = {
            "n": len(side_pairs),
            "delta_1": dm.delta_1,
            "delta_2": dm.delta_2,
            "delta_3": dm.delta_3,
            "abs_rel": dm.abs_rel,
            "sq_rel": dm.sq_rel,
            "rmse": dm.rmse,
            "rmse_log": dm.rmse_log,
        }
    return report


def _num(v) -> str:
    if v is None:
        return "n/a"
    return format(v, ".4f")


def render_report_text(report: dict) -> str:
    """Fixed-width text rendering of an evaluation report."""
    lines = []
    c = report["counts"]
    lines.append(
        f"ground truth {c['n_gt']:4d}   labels 3d {c['n_pred_3d']:4d}   "
        f"labels 2d-only {c['n_pred_2d']:4d}"
    )
    lines.append("")
    lines.append("average precision by 3D IoU threshold")
    header = f"  {'thr':>6} {'ap':>8} {'aph':>8} {'aph-flip':>9} {'apl':>8}"
    lines.append(header)
    for thr, block in report["thresholds"].items():
        lines.append(
            f"  {thr:>6} {_num(block['ap']):>8} {_num(block['aph']):>8} "
            f"{_num(block['aph_flip']):>9} {_num(block['apl']):>8}"
        )
    let = report["let"]
    lines.append("")
    lines.append("longitudinal-tolerant matching")
    lines.append(header)
    lines.append(
        f"  {format(let['threshold'], 'g'):>6} {_num(let['ap']):>8} "
        f"{_num(let['aph']):>8} {_num(let['aph_flip']):>9} {_num(let['apl']):>8}"
    )
    lines.append("")
    lines.append("range buckets")
    lines.append(
        f"  {'range':<12} {'n_gt':>5} {'n_pred':>6} {'ap':>8} {'aph':>8} {'apl':>8}"
    )
    for row in report["buckets"]:
        lines.append(
            f"  {row['range']:<12} {row['n_gt']:>5} {row['n_pred']:>6} "
            f"{_num(row['ap']):>8} {_num(row['aph']):>8} {_num(row['apl']):>8}"
        )
    lines.append("")
    lines.append("object depth vs truth (range from sensor origin)")
    names = {
        "with_pseudo_label": "with pseudo label",
        "without_pseudo_label": "without pseudo label",
    }
    for side, shown in names.items():
        block = report["depth"].get(side)
        if block is None:
            lines.append(f"  {shown:<22} n/a")
            continue
        lines.append(
            f"  {shown:<22} n {block['n']:>4}   d1 {_num(block['delta_1'])}   "
            f"d2 {_num(block['delta_2'])}   d3 {_num(block['delta_3'])}   "
            f"abs_rel {_num(block['abs_rel'])}   rmse {_num(block['rmse'])}"
        )
    return "\n".join(lines) + "\n"


def save_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
