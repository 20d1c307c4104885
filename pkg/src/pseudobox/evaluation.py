"""Pseudo-label quality against ground truth: greedy IoU matching and recall."""

from __future__ import annotations

import csv
import json
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import SceneMismatchError
from .geometry import bev_iou, box3d_iou

DEFAULT_THRESHOLDS = (0.25, 0.5, 0.7)
METRICS = {"3d": box3d_iou, "bev": bev_iou}


@dataclass(frozen=True)
class Match:
    class_label: str
    gt_index: int
    pred_index: int
    iou: float


def match_predictions(gt, pred, threshold: float = 0.0, metric: str = "3d") -> list[Match]:
    """Greedy one-to-one matching within each class, best IoU first.

    Pairs with IoU below ``threshold`` (and pairs that do not overlap at all)
    are never matched. Ties are broken by ``(gt index, pred index)``. The
    result is sorted by ``gt_index``.
    """
    iou_fn = METRICS[metric]
    pairs = []
    for gi, (gc, gb) in enumerate(gt):
        for pi, (pc, pb) in enumerate(pred):
            if gc != pc:
                continue
            iou = iou_fn(gb, pb)
            if iou > 0 and iou >= threshold:
                pairs.append((-iou, gi, pi))
    pairs.sort()
    used_g, used_p = set(), set()
    out = []
    for neg, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        out.append(Match(gt[gi][0], gi, pi, -neg))
    out.sort(key=lambda m: m.gt_index)
    return out


@dataclass
class ClassStats:
    matched: int
    total: int
    predicted: int
    recall: dict
    mean_iou: float | None

    def as_dict(self) -> dict:
        return {
            "matched": self.matched,
            "total": self.total,
            "predicted": self.predicted,
            "recall": {f"{t:g}": r for t, r in self.recall.items()},
            "mean_iou": self.mean_iou,
        }


@dataclass
class EvalReport:
    """Per-class and overall statistics plus one record per ground-truth object.

    ``matched`` counts ground-truth objects paired with any overlapping
    prediction; ``mean_iou`` averages over those pairs and is None when there
    are none. Records of unmatched objects carry ``pred_index = -1``.
    """

    thresholds: tuple[float, ...]
    metric: str
    per_class: dict[str, ClassStats]
    overall: ClassStats
    records: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "metric": self.metric,
            "thresholds": list(self.thresholds),
            "overall": self.overall.as_dict(),
            "per_class": {k: v.as_dict() for k, v in sorted(self.per_class.items())},
            "records": self.records,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["scene_id", "class", "gt_index", "pred_index", "iou"])
            for r in self.records:
                wr.writerow([r["scene_id"], r["class"], r["gt_index"], r["pred_index"], f"{r['iou']:.6f}"])


def _as_mapping(scenes) -> dict:
    if isinstance(scenes, Mapping):
        return dict(scenes)
    out = {}
    for sid, objs in scenes:
        if sid in out:
            raise SceneMismatchError(f"duplicate scene id {sid!r}")
        out[sid] = objs
    return out


def _stats(ious, total, predicted, thresholds) -> ClassStats:
    ious = np.asarray(ious, dtype=float)
    recall = {t: (float(np.count_nonzero(ious >= t)) / total if total else 0.0) for t in thresholds}
    # summed in a fixed order so reordering scenes cannot change the last bits
    mean = float(np.sum(np.sort(ious)) / len(ious)) if len(ious) else None
    return ClassStats(len(ious), total, predicted, recall, mean)


def evaluate(gt_scenes, pred_scenes, thresholds=DEFAULT_THRESHOLDS, metric: str = "3d") -> EvalReport:
    """Aggregate matching over scenes given as ``{scene_id: [(class, Box3D), ...]}``.

    Pairs of ``(scene_id, objects)`` are accepted too. Both sides must cover
    exactly the same scene ids. Recall at ``t`` counts matches with IoU at
    least ``t``; greedy matching visits pairs best-first, so this equals
    running the matcher with threshold ``t`` directly.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    thresholds = tuple(sorted(float(t) for t in thresholds))
    gt_map, pred_map = _as_mapping(gt_scenes), _as_mapping(pred_scenes)
    if set(gt_map) != set(pred_map):
        missing = sorted(set(gt_map) ^ set(pred_map))
        raise SceneMismatchError(f"scene ids differ between ground truth and predictions: {missing[:5]}")

    per_iou: dict[str, list] = {}
    per_total: dict[str, int] = {}
    per_pred: dict[str, int] = {}
    records = []
    for sid in sorted(gt_map):
        gt, pred = list(gt_map[sid]), list(pred_map[sid])
        for cls, _ in gt:
            per_total[cls] = per_total.get(cls, 0) + 1
            per_iou.setdefault(cls, [])
        for cls, _ in pred:
            per_pred[cls] = per_pred.get(cls, 0) + 1
        by_gt = {m.gt_index: m for m in match_predictions(gt, pred, 0.0, metric)}
        for gi, (cls, _) in enumerate(gt):
            m = by_gt.get(gi)
            if m is not None:
                per_iou[cls].append(m.iou)
            records.append(
                {
                    "scene_id": sid,
                    "class": cls,
                    "gt_index": gi,
                    "pred_index": -1 if m is None else m.pred_index,
                    "iou": 0.0 if m is None else m.iou,
                }
            )

    classes = sorted(set(per_total) | set(per_pred))
    per_class = {
        c: _stats(per_iou.get(c, []), per_total.get(c, 0), per_pred.get(c, 0), thresholds) for c in classes
    }
    all_ious = [x for c in classes for x in per_iou.get(c, [])]
    overall = _stats(all_ious, sum(per_total.values()), sum(per_pred.values()), thresholds)
    return EvalReport(thresholds, metric, per_class, overall, records)
