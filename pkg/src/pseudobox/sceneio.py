"""Scene bundles and their on-disk JSONL formats.

One file per entity kind: frames.jsonl, boxes2d.jsonl, observations.jsonl,
labels.jsonl, truth.jsonl (plus points.jsonl and clusters.jsonl for the
intermediate CLI stages). Records are one JSON object per line, floats
written with 17 significant digits so parse(serialize(x)) == x exactly,
and every file is sorted by its natural key so re-serialization is
byte-stable. Field names are frozen in docs/formats.md.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .boxfit import OrientedBox3D
from .cluster import ObjectCluster, ClusterSource, TrackedBox2D
from .geom import Box2D, CameraFrame, CameraIntrinsics, Pixel2, Point3, Pose
from .labelstore import GenerationTag, Label, LabelSet
from .triangulate import ObservationTrack, WorldPoint

__all__ = [
    "TruthObject",
    "SceneTruth",
    "SceneBundle",
    "dump_record",
    "save_frames",
    "load_frames",
    "save_boxes2d",
    "load_boxes2d",
    "save_observations",
    "load_observations",
    "save_points",
    "load_points",
    "save_clusters",
    "load_clusters",
    "save_labels",
    "load_labels",
    "save_truth",
    "load_truth",
    "save_bundle",
    "load_bundle",
]


@dataclass(frozen=True)
class TruthObject:
    """Ground truth for one object: its box in every simulated frame."""

    track_id: int
    class_label: str
    boxes: tuple  # of (frame_id, OrientedBox3D), sorted by frame_id

    def __post_init__(self):
        ordered = tuple(sorted(self.boxes, key=lambda fb: fb[0]))
        if len({f for f, _ in ordered}) != len(ordered):
            raise ValueError("one truth box per frame per object")
        object.__setattr__(self, "boxes", ordered)

    def box_at(self, frame_id: int) -> OrientedBox3D:
        for f, b in self.boxes:
            if f == frame_id:
                return b
        raise KeyError(f"track {self.track_id} has no truth box in frame {frame_id}")

    @property
    def first_box(self) -> OrientedBox3D:
        return self.boxes[0][1]


@dataclass(frozen=True)
class SceneTruth:
    """Object trajectories plus per-point attribution and true positions.

    point_positions hold each point's world position at its object's first
    frame; for moving objects the point travels with the box afterwards.
    """

    objects: tuple  # of TruthObject, sorted by track_id
    point_to_track: dict  # point_id -> track_id
    point_positions: dict  # point_id -> Point3

    def __post_init__(self):
        object.__setattr__(
            self, "objects", tuple(sorted(self.objects, key=lambda o: o.track_id))
        )
        if set(self.point_to_track) != set(self.point_positions):
            raise ValueError("attribution and positions must cover the same point ids")
        known = {o.track_id for o in self.objects}
        for pid, tid in self.point_to_track.items():
            if tid not in known:
                raise ValueError(f"point {pid} attributed to unknown track {tid}")

    def object_by_track(self, track_id: int) -> TruthObject:
        for o in self.objects:
            if o.track_id == track_id:
                return o
        raise KeyError(f"no truth object for track {track_id}")


@dataclass(frozen=True)
class SceneBundle:
    """Everything one scene provides to the pipeline."""

    frames: tuple  # of CameraFrame, sorted by frame_id
    tracks2d: tuple  # of TrackedBox2D, sorted by (track_id, frame_id)
    obs_tracks: tuple  # of ObservationTrack, sorted by point_id
    truth: SceneTruth | None = None

    def __post_init__(self):
        frames = tuple(sorted(self.frames, key=lambda f: f.frame_id))
        if len({f.frame_id for f in frames}) != len(frames):
            raise ValueError("duplicate frame ids")
        object.__setattr__(self, "frames", frames)
        frame_ids = {f.frame_id for f in frames}
        boxes = tuple(sorted(self.tracks2d, key=lambda b: (b.track_id, b.frame_id)))
        for b in boxes:
            if b.frame_id not in frame_ids:
                raise ValueError(f"2D box references unknown frame {b.frame_id}")
        object.__setattr__(self, "tracks2d", boxes)
        tracks = tuple(sorted(self.obs_tracks, key=lambda t: t.point_id))
        for t in tracks:
            for frame_id, _ in t.observations:
                if frame_id not in frame_ids:
                    raise ValueError(
                        f"point {t.point_id} observed in unknown frame {frame_id}"
                    )
        object.__setattr__(self, "obs_tracks", tracks)
        if self.truth is not None:
            covered = set(self.truth.point_to_track)
            for t in tracks:
                if t.point_id not in covered:
                    raise ValueError(f"truth does not attribute point {t.point_id}")


# ------------------------------------------------------------- JSON writing


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, float):
        if not math.isfinite(v):
            raise ValueError("non-finite float in record")
        return format(v, ".17g")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    raise TypeError(f"unsupported value type {type(v).__name__}")


def dump_record(record: dict) -> str:
    """One JSONL line: insertion-ordered keys, floats at 17 significant digits."""
    return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(v)}" for k, v in record.items()) + "}"


def _write_lines(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dump_record(rec))
            fh.write("\n")


def _read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: bad JSON ({exc})") from exc


# ------------------------------------------------------------------- frames


def save_frames(path, frames):
    records = []
    for f in sorted(frames, key=lambda f: f.frame_id):
        k = f.intrinsics
        records.append(
            {
                "frame_id": f.frame_id,
                "width": k.width,
                "height": k.height,
                "fx": float(k.fx),
                "fy": float(k.fy),
                "cx": float(k.cx),
                "cy": float(k.cy),
                "rotation": [float(x) for x in f.pose.rotation.reshape(9)],
                "translation": [float(x) for x in f.pose.translation],
            }
        )
    _write_lines(path, records)


def load_frames(path) -> list:
    frames = []
    for rec in _read_lines(path):
        frames.append(
            CameraFrame(
                frame_id=int(rec["frame_id"]),
                intrinsics=CameraIntrinsics(
                    fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                    width=int(rec["width"]), height=int(rec["height"]),
                ),
                pose=Pose(
                    rotation=np.array(rec["rotation"], dtype=float).reshape(3, 3),
                    translation=np.array(rec["translation"], dtype=float),
                ),
            )
        )
    return sorted(frames, key=lambda f: f.frame_id)


# ----------------------------------------------------------------- 2D boxes


def save_boxes2d(path, boxes):
    records = []
    for b in sorted(boxes, key=lambda b: (b.track_id, b.frame_id)):
        records.append(
            {
                "track_id": b.track_id,
                "frame_id": b.frame_id,
                "class_label": b.class_label,
                "u_min": float(b.box.u_min),
                "v_min": float(b.box.v_min),
                "u_max": float(b.box.u_max),
                "v_max": float(b.box.v_max),
            }
        )
    _write_lines(path, records)


def load_boxes2d(path) -> list:
    boxes = []
    for rec in _read_lines(path):
        boxes.append(
            TrackedBox2D(
                track_id=int(rec["track_id"]),
                frame_id=int(rec["frame_id"]),
                class_label=rec["class_label"],
                box=Box2D(rec["u_min"], rec["v_min"], rec["u_max"], rec["v_max"]),
            )
        )
    return sorted(boxes, key=lambda b: (b.track_id, b.frame_id))


# ------------------------------------------------------------- observations


def save_observations(path, obs_tracks):
    records = []
    for t in sorted(obs_tracks, key=lambda t: t.point_id):
        for frame_id, px in sorted(t.observations, key=lambda fo: fo[0]):
            records.append(
                {
                    "point_id": t.point_id,
                    "frame_id": frame_id,
                    "u": float(px.u),
                    "v": float(px.v),
                }
            )
    _write_lines(path, records)


def load_observations(path) -> list:
    by_point = {}
    for rec in _read_lines(path):
        by_point.setdefault(int(rec["point_id"]), []).append(
            (int(rec["frame_id"]), Pixel2(rec["u"], rec["v"]))
        )
    tracks = []
    for pid in sorted(by_point):
        obs = sorted(by_point[pid], key=lambda fo: fo[0])
        if len({f for f, _ in obs}) != len(obs):
            raise ValueError(f"point {pid} observed twice in one frame")
        tracks.append(ObservationTrack(point_id=pid, observations=tuple(obs)))
    return tracks


# ------------------------------------------------------ reconstructed points


def save_points(path, points):
    records = []
    for p in sorted(points, key=lambda p: p.point_id):
        records.append(
            {
                "point_id": p.point_id,
                "x": p.position.x,
                "y": p.position.y,
                "z": p.position.z,
                "residual_rms_px": float(p.residual_rms),
                "n_views": p.n_views,
            }
        )
    _write_lines(path, records)


def load_points(path) -> list:
    points = []
    for rec in _read_lines(path):
        points.append(
            WorldPoint(
                point_id=int(rec["point_id"]),
                position=Point3(rec["x"], rec["y"], rec["z"]),
                residual_rms=rec["residual_rms_px"],
                n_views=int(rec["n_views"]),
            )
        )
    return sorted(points, key=lambda p: p.point_id)


# ----------------------------------------------------------------- clusters


def save_clusters(path, clusters):
    records = []
    keyed = sorted(
        clusters, key=lambda c: (c.matched_track_id is None, c.matched_track_id or 0,
                                 c.point_ids)
    )
    for c in keyed:
        records.append(
            {
                "track_id": c.matched_track_id,
                "source": c.source.value,
                "augmented": c.augmented,
                "point_ids": list(c.point_ids),
            }
        )
    _write_lines(path, records)


def load_clusters(path, points) -> list:
    """Rebuild clusters against a reconstructed point list."""
    by_id = {p.point_id: p.position for p in points}
    clusters = []
    for rec in _read_lines(path):
        ids = [int(i) for i in rec["point_ids"]]
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise ValueError(f"cluster references unknown point ids {missing[:5]}")
        clusters.append(
            ObjectCluster.from_points(
                [(i, by_id[i]) for i in ids],
                source=ClusterSource(rec["source"]),
                matched_track_id=None if rec["track_id"] is None else int(rec["track_id"]),
                augmented=bool(rec["augmented"]),
            )
        )
    return clusters


# ------------------------------------------------------------------- labels


def _box_record(box: OrientedBox3D) -> dict:
    return {
        "cx": box.center.x,
        "cy": box.center.y,
        "cz": box.center.z,
        "w": float(box.size[0]),
        "h": float(box.size[1]),
        "l": float(box.size[2]),
        "yaw": float(box.yaw),
    }


def save_labels(path, labels: LabelSet):
    records = []
    for lb in labels:
        rec = {"track_id": lb.box.track_id, "tag": lb.tag.render(),
               "class_label": lb.box.class_label}
        rec.update(_box_record(lb.box))
        rec.update(
            {
                "score": float(lb.box.score),
                "has_3d": lb.box.has_3d,
                "complete": lb.box.complete,
                "anchor_frame_id": lb.box.anchor_frame_id,
            }
        )
        records.append(rec)
    _write_lines(path, records)


def load_labels(path) -> LabelSet:
    labels = []
    for rec in _read_lines(path):
        box = OrientedBox3D(
            center=Point3(rec["cx"], rec["cy"], rec["cz"]),
            size=(rec["w"], rec["h"], rec["l"]),
            yaw=rec["yaw"],
            score=rec["score"],
            class_label=rec["class_label"],
            track_id=int(rec["track_id"]),
            has_3d=bool(rec["has_3d"]),
            complete=bool(rec["complete"]),
            anchor_frame_id=None
            if rec["anchor_frame_id"] is None
            else int(rec["anchor_frame_id"]),
        )
        labels.append(Label(box=box, tag=GenerationTag.parse(rec["tag"])))
    return LabelSet(tuple(labels))


# -------------------------------------------------------------------- truth


def save_truth(path, truth: SceneTruth):
    records = []
    for obj in truth.objects:
        for frame_id, box in obj.boxes:
            rec = {"kind": "object_box", "track_id": obj.track_id,
                   "frame_id": frame_id, "class_label": obj.class_label}
            rec.update(_box_record(box))
            records.append(rec)
    for pid in sorted(truth.point_to_track):
        pos = truth.point_positions[pid]
        records.append(
            {
                "kind": "point",
                "point_id": pid,
                "track_id": truth.point_to_track[pid],
                "x": pos.x,
                "y": pos.y,
                "z": pos.z,
            }
        )
    _write_lines(path, records)


def load_truth(path) -> SceneTruth:
    boxes_by_track = {}
    labels_by_track = {}
    point_to_track, point_positions = {}, {}
    for rec in _read_lines(path):
        kind = rec.get("kind")
        if kind == "object_box":
            tid = int(rec["track_id"])
            box = OrientedBox3D(
                center=Point3(rec["cx"], rec["cy"], rec["cz"]),
                size=(rec["w"], rec["h"], rec["l"]),
                yaw=rec["yaw"],
                score=1.0,
                class_label=rec["class_label"],
                track_id=tid,
            )
            boxes_by_track.setdefault(tid, []).append((int(rec["frame_id"]), box))
            labels_by_track[tid] = rec["class_label"]
        elif kind == "point":
            pid = int(rec["point_id"])
            point_to_track[pid] = int(rec["track_id"])
            point_positions[pid] = Point3(rec["x"], rec["y"], rec["z"])
        else:
            raise ValueError(f"unknown truth record kind {kind!r}")
    objects = tuple(
        TruthObject(track_id=tid, class_label=labels_by_track[tid],
                    boxes=tuple(boxes_by_track[tid]))
        for tid in sorted(boxes_by_track)
    )
    return SceneTruth(objects=objects, point_to_track=point_to_track,
                      point_positions=point_positions)


# ------------------------------------------------------------------ bundles

FRAMES_FILE = "frames.jsonl"
BOXES2D_FILE = "boxes2d.jsonl"
OBSERVATIONS_FILE = "observations.jsonl"
TRUTH_FILE = "truth.jsonl"


def save_bundle(directory, bundle: SceneBundle):
    os.makedirs(directory, exist_ok=True)
    save_frames(os.path.join(directory, FRAMES_FILE), bundle.frames)
    save_boxes2d(os.path.join(directory, BOXES2D_FILE), bundle.tracks2d)
    save_observations(os.path.join(directory, OBSERVATIONS_FILE), bundle.obs_tracks)
    if bundle.truth is not None:
        save_truth(os.path.join(directory, TRUTH_FILE), bundle.truth)


def load_bundle(directory) -> SceneBundle:
    truth_path = os.path.join(directory, TRUTH_FILE)
    truth = load_truth(truth_path) if os.path.exists(truth_path) else None
    return SceneBundle(
        frames=tuple(load_frames(os.path.join(directory, FRAMES_FILE))),
        tracks2d=tuple(load_boxes2d(os.path.join(directory, BOXES2D_FILE))),
        obs_tracks=tuple(load_observations(os.path.join(directory, OBSERVATIONS_FILE))),
        truth=truth,
    )
