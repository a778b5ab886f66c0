"""Label sets and the operations between generation rounds.

A label is a 7-DoF box plus a generation tag: the geometric pipeline
emits "pseudo_initial" labels, and each retraining round re-emits
"predicted_<k>" labels. Sets are keyed by (track_id, tag) and kept in a
canonical order so serialization is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .boxfit import OrientedBox3D
from .errors import ConfigError

__all__ = [
    "PSEUDO_INITIAL",
    "GenerationTag",
    "Label",
    "LabelSet",
    "select_by_depth",
    "merge_keep_initial",
    "merge_replace",
]


@dataclass(frozen=True)
class GenerationTag:
    """Which generation produced a label.

    kind "pseudo_initial" has no iteration; kind "predicted" carries the
    zero-based retraining iteration.
    """

    kind: str
    iteration: int | None = None

    def __post_init__(self):
        if self.kind == "pseudo_initial":
            if self.iteration is not None:
                raise ValueError("pseudo_initial carries no iteration")
        elif self.kind == "predicted":
            if not (isinstance(self.iteration, int) and self.iteration >= 0):
                raise ValueError("predicted needs an iteration >= 0")
        else:
            raise ValueError(f"unknown tag kind {self.kind!r}")

    @staticmethod
    def predicted(iteration: int) -> "GenerationTag":
        return GenerationTag("predicted", iteration)

    def render(self) -> str:
        if self.kind == "pseudo_initial":
            return "pseudo_initial"
        return f"predicted_{self.iteration}"

    @staticmethod
    def parse(text: str) -> "GenerationTag":
        if text == "pseudo_initial":
            return PSEUDO_INITIAL
        if text.startswith("predicted_"):
            suffix = text[len("predicted_"):]
            if suffix.isdigit():
                return GenerationTag.predicted(int(suffix))
        raise ValueError(f"unrecognized generation tag {text!r}")

    def advance(self) -> "GenerationTag":
        """The tag a label gets after one more retraining round."""
        if self.kind == "pseudo_initial":
            return GenerationTag.predicted(0)
        return GenerationTag.predicted(self.iteration + 1)

    def sort_key(self) -> tuple:
        return (0, 0) if self.kind == "pseudo_initial" else (1, self.iteration)


PSEUDO_INITIAL = GenerationTag("pseudo_initial")


@dataclass(frozen=True)
class Label:
    box: OrientedBox3D
    tag: GenerationTag

    def __post_init__(self):
        if self.box.track_id is None:
            raise ValueError("labels must carry a track id")

    @property
    def key(self) -> tuple:
        return (self.box.track_id, self.tag)


@dataclass(frozen=True)
class LabelSet:
    """An immutable label collection, unique per (track_id, tag).

    Labels are stored sorted by (track_id, tag) regardless of input order.
    """

    labels: tuple

    def __post_init__(self):
        ordered = sorted(
            self.labels, key=lambda lb: (lb.box.track_id, lb.tag.sort_key())
        )
        seen = set()
        for lb in ordered:
            if lb.key in seen:
                raise ValueError(f"duplicate label key {lb.key}")
            seen.add(lb.key)
        object.__setattr__(self, "labels", tuple(ordered))

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def get(self, track_id: int, tag: GenerationTag) -> Label | None:
        for lb in self.labels:
            if lb.key == (track_id, tag):
                return lb
        return None

    def track_ids(self) -> set:
        return {lb.box.track_id for lb in self.labels}


def _reference_frame(label: Label, frame_by_id: dict):
    if label.box.anchor_frame_id in frame_by_id:
        return frame_by_id[label.box.anchor_frame_id]
    return frame_by_id[min(frame_by_id)]


def select_by_depth(labels: LabelSet, depth_range: tuple, frames) -> LabelSet:
    """Demote labels whose center depth falls outside the closed range.

    Depth is the distance along the reference camera's optical axis at the
    label's anchor frame (first frame when no anchor is set). Demoted
    labels keep their geometry but turn 2D-only; nothing is ever deleted.
    """
    lo, hi = depth_range
    if not (lo < hi):
        raise ConfigError(f"depth range must satisfy min < max, got {depth_range}")
    frame_by_id = {f.frame_id: f for f in frames}
    out = []
    for lb in labels:
        if not lb.box.has_3d:
            out.append(lb)
            continue
        if not frame_by_id:
            raise ValueError("select_by_depth needs frames when 3D labels are present")
        frame = _reference_frame(lb, frame_by_id)
        depth = float(frame.pose.apply(lb.box.center.as_array())[2])
        if lo <= depth <= hi:
            out.append(lb)
        else:
            out.append(Label(box=replace(lb.box, has_3d=False), tag=lb.tag))
    return LabelSet(tuple(out))


def merge_keep_initial(
    initial: LabelSet, predicted: LabelSet, score_floor: float = 0.5
) -> LabelSet:
    """Initial labels win; predictions only fill gaps, and only confident ones.

    Every initial label passes through verbatim. A predicted label joins
    the output iff its score is >= score_floor and its track id is absent
    from the initial set.
    """
    out = list(initial.labels)
    taken = initial.track_ids()
    for lb in predicted:
        if lb.box.score >= score_floor and lb.box.track_id not in taken:
            out.append(lb)
    return LabelSet(tuple(out))


def merge_replace(predicted_last: LabelSet) -> LabelSet:
    """Keep only the newest generation: geometry verbatim, tags advanced."""
    return LabelSet(tuple(Label(box=lb.box, tag=lb.tag.advance()) for lb in predicted_last))
