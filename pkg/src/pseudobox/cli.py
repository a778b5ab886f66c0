"""Command-line interface.

Subcommands mirror the pipeline stages (simulate, triangulate, cluster,
fit, run) plus the label-store operations (select, merge) and evaluation
(eval). Exit codes: 0 success, 2 bad configuration or arguments, 3 scene
skipped by the parallax gate (run still writes its 2D-only labels), and 4
degenerate or malformed input data.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

from .cluster import double_cluster
from .config import AppConfig, load_config
from .errors import (
    BehindCamera,
    CheiralityFailure,
    ConfigError,
    DegenerateCluster,
    DegenerateGeometry,
    GateSkipped,
    InsufficientViews,
    InvalidBox,
    NonPositiveDepth,
    SingularNormalEquations,
)
from .evalmetrics import pr_curve
from .labelstore import merge_keep_initial, merge_replace, select_by_depth
from .pipeline import evaluate, fit_labels, render_report_text, run_global_ba, save_report
from .sceneio import (
    load_bundle,
    load_clusters,
    load_labels,
    load_points,
    save_bundle,
    save_clusters,
    save_labels,
    save_points,
)
from .simulate import simulate
from .triangulate import WorldPoint, parallax_gate, refine_points, triangulate_dlt

_DATA_ERRORS = (
    BehindCamera,
    CheiralityFailure,
    DegenerateCluster,
    DegenerateGeometry,
    InsufficientViews,
    InvalidBox,
    NonPositiveDepth,
    SingularNormalEquations,
    ValueError,
    KeyError,
    OSError,
)


def _add_config_flags(sub):
    sub.add_argument("--config", metavar="TOML", help="configuration file")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pseudobox",
        description="3D pseudo bounding boxes from monocular video geometry",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic scene bundle")
    p.add_argument("--seed", type=int, required=True, help="scene seed (required)")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_flags(p)

    p = sub.add_parser("triangulate", help="reconstruct world points from tracks")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="POINTS_JSONL")
    _add_config_flags(p)

    p = sub.add_parser("cluster", help="double-cluster points against 2D tracks")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--points", required=True, metavar="POINTS_JSONL")
    p.add_argument("--out", required=True, metavar="CLUSTERS_JSONL")
    _add_config_flags(p)

    p = sub.add_parser("fit", help="fit 7-DoF boxes to matched clusters")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--points", required=True, metavar="POINTS_JSONL")
    p.add_argument("--clusters", required=True, metavar="CLUSTERS_JSONL")
    p.add_argument("--out", required=True, metavar="LABELS_JSONL")
    _add_config_flags(p)

    p = sub.add_parser("run", help="full pipeline: scene bundle to labels and report")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_flags(p)

    p = sub.add_parser("select", help="demote labels outside a depth range")
    p.add_argument("--labels", required=True, metavar="LABELS_JSONL")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--min-depth", type=float, required=True)
    p.add_argument("--max-depth", type=float, required=True)
    p.add_argument("--out", required=True, metavar="LABELS_JSONL")
    _add_config_flags(p)

    p = sub.add_parser("merge", help="combine label generations")
    p.add_argument("--strategy", choices=("keep_initial", "replace"), required=True)
    p.add_argument("--initial", metavar="LABELS_JSONL")
    p.add_argument("--predicted", required=True, metavar="LABELS_JSONL")
    p.add_argument("--score-floor", type=float, default=None)
    p.add_argument("--out", required=True, metavar="LABELS_JSONL")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score labels against scene truth")
    p.add_argument("--scene", required=True, metavar="DIR")
    p.add_argument("--labels", required=True, metavar="LABELS_JSONL")
    p.add_argument("--out", required=True, metavar="DIR")
    _add_config_flags(p)

    return parser


def _reconstruct(bundle, app: AppConfig):
    if not parallax_gate(list(bundle.frames), app.pipeline.ba):
        raise GateSkipped("camera baseline below the parallax gate")
    seeds = []
    for track in bundle.obs_tracks:
        if len(track.observations) < 2:
            continue
        try:
            position = triangulate_dlt(track, bundle.frames)
        except (InsufficientViews, DegenerateGeometry, CheiralityFailure):
            continue
        seeds.append(
            WorldPoint(
                point_id=track.point_id,
                position=position,
                residual_rms=0.0,
                n_views=len(track.observations),
            )
        )
    return refine_points(seeds, bundle.obs_tracks, bundle.frames, app.pipeline.ba)


def _write_eval_outputs(out_dir, labels, truth, frames, app: AppConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    report = evaluate(labels, truth, frames, app.pipeline.eval)
    save_report(os.path.join(out_dir, "report.json"), report)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_report_text(report))

    origin = sorted(frames, key=lambda f: f.frame_id)[0].pose.camera_center()
    gts = [o.first_box for o in truth.objects]
    preds = [lb.box for lb in labels if lb.box.has_3d]
    with open(os.path.join(out_dir, "pr_curves.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["criterion", "threshold", "recall", "precision"])
        cfg = app.pipeline.eval
        tasks = [("iou", thr) for thr in cfg.iou_thresholds]
        tasks.append(("let", cfg.let_iou_threshold))
        for criterion, thr in tasks:
            points = pr_curve(
                preds, gts, criterion=criterion, threshold=thr, cfg=cfg,
                sensor_origin=origin,
            )
            for recall, precision in points:
                writer.writerow(
                    [criterion, format(thr, "g"),
                     format(recall, ".17g"), format(precision, ".17g")]
                )


def _cmd_simulate(args, app: AppConfig) -> int:
    cfg = replace(app.sim, seed=args.seed)
    bundle = simulate(cfg)
    save_bundle(args.out, bundle)
    print(
        f"scene seed {cfg.seed}: {len(bundle.frames)} frames, "
        f"{len(bundle.tracks2d)} 2D boxes, {len(bundle.obs_tracks)} point tracks "
        f"-> {args.out}"
    )
    return 0


def _cmd_triangulate(args, app: AppConfig) -> int:
    bundle = load_bundle(args.scene)
    points = _reconstruct(bundle, app)
    save_points(args.out, points)
    print(f"{len(points)} world points -> {args.out}")
    return 0


def _cmd_cluster(args, app: AppConfig) -> int:
    bundle = load_bundle(args.scene)
    points = load_points(args.points)
    clusters = double_cluster(
        points, bundle.frames, bundle.tracks2d, app.pipeline.cluster
    )
    ordered = [clusters[tid] for tid in sorted(clusters)]
    save_clusters(args.out, ordered)
    print(f"{len(ordered)} matched clusters -> {args.out}")
    return 0


def _cmd_fit(args, app: AppConfig) -> int:
    bundle = load_bundle(args.scene)
    points = load_points(args.points)
    clusters = load_clusters(args.clusters, points)
    residual_by_id = {p.point_id: p.residual_rms for p in points}
    by_track = {
        c.matched_track_id: c for c in clusters if c.matched_track_id is not None
    }
    label_set = fit_labels(bundle.tracks2d, by_track, residual_by_id, app.pipeline.fit)
    save_labels(args.out, label_set)
    n3d = sum(1 for lb in label_set if lb.box.has_3d)
    print(f"{len(label_set)} labels ({n3d} with 3D boxes) -> {args.out}")
    return 0


def _cmd_run(args, app: AppConfig) -> int:
    bundle = load_bundle(args.scene)
    os.makedirs(args.out, exist_ok=True)
    labels_path = os.path.join(args.out, "labels.jsonl")
    try:
        labels = run_global_ba(bundle, app.pipeline)
    except GateSkipped as exc:
        save_labels(labels_path, exc.labels)
        print(f"gate skipped: {exc}; wrote 2D-only labels -> {labels_path}",
              file=sys.stderr)
        return 3
    save_labels(labels_path, labels)
    n3d = sum(1 for lb in labels if lb.box.has_3d)
    print(f"{len(labels)} labels ({n3d} with 3D boxes) -> {labels_path}")
    if bundle.truth is not None:
        _write_eval_outputs(args.out, labels, bundle.truth, bundle.frames, app)
        print(f"report -> {os.path.join(args.out, 'report.json')}")
    return 0


def _cmd_select(args, app: AppConfig) -> int:
    bundle = load_bundle(args.scene)
    labels = load_labels(args.labels)
    out = select_by_depth(labels, (args.min_depth, args.max_depth), bundle.frames)
    save_labels(args.out, out)
    demoted = sum(
        1
        for before, after in zip(labels, out)
        if before.box.has_3d and not after.box.has_3d
    )
    print(f"{len(out)} labels, {demoted} demoted to 2D -> {args.out}")
    return 0


def _cmd_merge(args, app: AppConfig) -> int:
    predicted = load_labels(args.predicted)
    if args.strategy == "keep_initial":
        if args.initial is None:
            raise ConfigError("merge --strategy keep_initial needs --initial")
        initial = load_labels(args.initial)
        floor = args.score_floor
        if floor is None:
            floor = app.pipeline.score_floor
        merged = merge_keep_initial(initial, predicted, score_floor=floor)
    else:
        if args.score_floor is not None:
            raise ConfigError("merge --strategy replace takes no --score-floor")
        merged = merge_replace(predicted)
    save_labels(args.out, merged)
    print(f"{len(merged)} labels -> {args.out}")
    return 0


def _cmd_eval(args, app: AppConfig) -> int:
    bundle = load_bundle(args.scene)
    if bundle.truth is None:
        raise ValueError(f"scene {args.scene} has no truth.jsonl to evaluate against")
    labels = load_labels(args.labels)
    _write_eval_outputs(args.out, labels, bundle.truth, bundle.frames, app)
    print(f"report -> {os.path.join(args.out, 'report.json')}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "triangulate": _cmd_triangulate,
    "cluster": _cmd_cluster,
    "fit": _cmd_fit,
    "run": _cmd_run,
    "select": _cmd_select,
    "merge": _cmd_merge,
    "eval": _cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        app = load_config(args.config, args.overrides)
        return _COMMANDS[args.command](args, app)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except GateSkipped as exc:
        print(f"gate skipped: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
