"""Ground-truth label assignment, recall@1, task recall, and box IoU."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import EmptySegment, NoGroundTruth, ValidationError
from .llm import fold_plural
from .retrieval import retrieve
from .store import GroundTruth, SceneStore, SegmentRecord
from .text_encoding import split_tokens

# Query encoders map a class name to a unit feature; evaluation is agnostic
# to whether the feature comes from the base model or a checkpoint.
QueryEncoder = Callable[[str], np.ndarray]

IOU_MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class TaskQuery:
    """A task description with the classes needed to complete it."""

    task_text: str
    relevant_classes: tuple[str, ...]
    scene_id: str

    def __post_init__(self):
        if not self.relevant_classes:
            raise ValidationError(f"task {self.task_text!r} has no relevant classes")


def load_tasks(path: Path) -> list[TaskQuery]:
    items = json.loads(Path(path).read_text(encoding="utf-8"))
    return [
        TaskQuery(
            task_text=obj["task"],
            relevant_classes=tuple(obj["relevant_classes"]),
            scene_id=obj["scene_id"],
        )
        for obj in items
    ]


@dataclass
class EvalReport:
    """Machine-readable evaluation result."""

    per_class_recall_at_1: dict[str, int] = field(default_factory=dict)
    recall_at_1: float | None = None
    per_task_recall: dict[str, float] = field(default_factory=dict)
    atr: float | None = None
    skipped: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "per_class_recall_at_1": self.per_class_recall_at_1,
            "recall_at_1": self.recall_at_1,
            "per_task_recall": self.per_task_recall,
            "atr": self.atr,
            "skipped": self.skipped,
            "config": self.config,
        }

    def write_json(self, path: Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), ensure_ascii=False, indent=2, sort_keys=True)
            + "\n",
            encoding="utf-8",
        )

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row_type", "key", "value"])
            for key in sorted(self.per_class_recall_at_1):
                writer.writerow(["class", key, self.per_class_recall_at_1[key]])
            for key in sorted(self.per_task_recall):
                writer.writerow(["task", key, self.per_task_recall[key]])
            if self.recall_at_1 is not None:
                writer.writerow(["summary", "recall_at_1", self.recall_at_1])
            if self.atr is not None:
                writer.writerow(["summary", "atr", self.atr])


def _class_key(name: str) -> str:
    """Canonical form for class-label matching: lowercase, plural-folded."""
    return " ".join(fold_plural(tok) for tok in split_tokens(name))


def assign_gt_label(
    segment: SegmentRecord, segment_points: np.ndarray, gt: GroundTruth
) -> str:
    """Majority label over nearest-ground-truth-point votes.

    Each segment point votes with the label of its Euclidean-nearest gt
    point; majority ties break to the lexicographically smallest label.
    """
    if segment_points.shape[0] == 0:
        raise EmptySegment(f"segment {segment.segment_id!r} has no points")
    if gt.points.shape[0] == 0:
        raise NoGroundTruth("ground truth has no points")
    seg = segment_points.astype(np.float64)
    ref = gt.points.astype(np.float64)
    votes: Counter[str] = Counter()
    # exact brute force, chunked to bound memory
    chunk = max(1, int(2e6) // max(1, ref.shape[0]))
    for start in range(0, seg.shape[0], chunk):
        block = seg[start : start + chunk]
        d2 = ((block[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)
        for idx in nearest:
            votes[gt.labels[int(idx)]] += 1
    return min(votes.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def recall_at_1(
    store: SceneStore,
    scene_id: str,
    gt: GroundTruth | None,
    classes: list[str],
    query_encoder: QueryEncoder,
    synonyms: dict[str, str] | None = None,
    top_k: int = 1,
) -> tuple[dict[str, int], float | None, list[str]]:
    """Per-class top-1 hits and their mean for one scene.

    A class hits when the retrieved segment's ground-truth label matches
    the class after lowercasing and plural folding (or via the optional
    synonym table). ``top_k`` > 1 counts a hit if any of the first k
    segments matches; the standard protocol keeps k = 1.
    """
    if not classes:
        raise ValidationError("classes must be nonempty")
    if gt is None:
        raise NoGroundTruth(f"scene {scene_id!r} has no ground truth")
    hits: dict[str, int] = {}
    skipped: list[str] = []
    segment_by_id = {s.segment_id: s for s in store.scene_segments(scene_id)}
    folded = {_class_key(a): _class_key(b) for a, b in (synonyms or {}).items()}
    for name in classes:
        result = retrieve(store, scene_id, query_encoder(name), top_k=top_k, query_class=name)
        if not result.ranked:
            skipped.append(f"{scene_id}:{name}")
            continue
        hit = False
        for seg_id, _ in result.ranked:
            segment = segment_by_id[seg_id]
            label = assign_gt_label(segment, store.points_of(segment), gt)
            hit = _class_key(label) == _class_key(name)
            if not hit and folded:
                hit = folded.get(_class_key(label)) == _class_key(name) or folded.get(
                    _class_key(name)
                ) == _class_key(label)
            if hit:
                break
        hits[name] = int(hit)
    mean = float(np.mean(list(hits.values()))) if hits else None
    return hits, mean, skipped


def average_task_recall(
    tasks: list[TaskQuery],
    store: SceneStore,
    gt_by_scene: dict[str, GroundTruth],
    query_encoder: QueryEncoder,
    config_echo: dict | None = None,
) -> EvalReport:
    """Mean over tasks of the fraction of relevant classes recalled."""
    report = EvalReport(config=config_echo or {})
    all_hits: list[int] = []
    for task in tasks:
        gt = gt_by_scene.get(task.scene_id)
        if gt is None:
            raise NoGroundTruth(f"scene {task.scene_id!r} has no ground truth")
        hits, _, skipped = recall_at_1(
            store, task.scene_id, gt, list(task.relevant_classes), query_encoder
        )
        report.skipped.extend(skipped)
        if not hits:
            report.skipped.append(f"task:{task.task_text}")
            continue
        for name, hit in hits.items():
            report.per_class_recall_at_1[f"{task.scene_id}:{name}"] = hit
            all_hits.append(hit)
        report.per_task_recall[task.task_text] = float(np.mean(list(hits.values())))
    if report.per_task_recall:
        report.atr = float(np.mean(list(report.per_task_recall.values())))
    if all_hits:
        report.recall_at_1 = float(np.mean(all_hits))
    return report


def iou_bbox(pred_box, gt_box) -> float:
    """Intersection over union of two axis-aligned pixel boxes.

    Degenerate zero-area boxes give 0.
    """
    ax0, ay0, ax1, ay1 = pred_box
    bx0, by0, bx1, by1 = gt_box
    if ax0 > ax1 or ay0 > ay1 or bx0 > bx1 or by0 > by1:
        raise ValidationError("boxes must satisfy x0 <= x1 and y0 <= y1")
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_bbox_match(pred_box, gt_box, threshold: float = IOU_MATCH_THRESHOLD) -> bool:
    """True when boxes overlap at or above the IoU threshold."""
    return iou_bbox(pred_box, gt_box) >= threshold
