"""Average precision for boxes and masks.

A prediction counts as correct when its category matches and its IoU with
a not-yet-claimed ground truth is strictly greater than the threshold.
Predictions are swept in descending score order (ties by input order); each
claims the eligible ground truth it overlaps most.  The precision/recall
curve is integrated with 101-point interpolation, and AP is the mean over
the ten thresholds 0.50, 0.55, ..., 0.95.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data.coco import DEFECT, NORMAL, CocoDataset
from .data.rle import RleMask, rle_overlap

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.arange(101) / 100.0
CLASS_NAMES = {NORMAL: "normal", DEFECT: "defect"}


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    score: float
    region: object  # bbox tuple or RleMask


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    category_id: int
    region: object


def iou_box(a, b) -> float:
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_mask(a: RleMask, b: RleMask) -> float:
    inter, union = rle_overlap(a, b)
    return inter / union if union else 0.0


def iou_for(task: str) -> Callable:
    if task == "detection":
        return iou_box
    if task == "segmentation":
        return iou_mask
    raise ValueError(f"unknown task {task!r}")


def sort_predictions(preds: Sequence[Detection]) -> list[int]:
    """Indices ordered by descending score, ties by position."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))


def greedy_match(preds: Sequence[Detection], gts: Sequence[GroundTruth], eps: float, iou=iou_box) -> list[bool]:
    """Correctness flag per prediction; ``preds`` must already be score-sorted."""
    ious = {}
    by_image: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    claimed: set[int] = set()
    flags = []
    for i, p in enumerate(preds):
        best, best_iou = None, eps
        for j in by_image.get(p.image_id, ()):
            if j in claimed or gts[j].category_id != p.category_id:
                continue
            key = (i, j)
            if key not in ious:
                ious[key] = iou(p.region, gts[j].region)
            if ious[key] > best_iou:
                best, best_iou = j, ious[key]
        if best is not None:
            claimed.add(best)
        flags.append(best is not None)
    return flags


def precision_recall(flags: Sequence[bool], num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    seen = np.arange(1, len(flags) + 1)
    return tp / seen, tp / num_gt


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """Mean over r in {0, .01, ..., 1} of the best precision at recall >= r."""
    if precision.size == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < recall.size, envelope[np.minimum(idx, recall.size - 1)], 0.0)
    return float(sampled.mean())


def ap_from_flags(flags: Sequence[bool], num_gt: int) -> float | None:
    if num_gt == 0:
        return None
    return interpolated_ap(*precision_recall(flags, num_gt))


def ap_at(preds: Sequence[Detection], gts: Sequence[GroundTruth], eps: float, iou=iou_box) -> float | None:
    """AP at one IoU threshold, or None when there is no ground truth."""
    if not gts:
        return None
    ordered = [preds[i] for i in sort_predictions(preds)]
    return ap_from_flags(greedy_match(ordered, gts, eps, iou), len(gts))


@dataclass
class ApReport:
    task: str
    ap: float
    ap50: float
    ap75: float
    ap95: float
    per_class: dict[str, float]  # class name -> AP averaged over thresholds
    per_threshold: dict[str, float]  # "0.50" -> class-averaged AP@threshold
    per_class_threshold: dict[str, dict[str, float]] = field(default_factory=dict)

    def columns(self) -> dict[str, float]:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP95": self.ap95,
            "AP_normal": self.per_class.get("normal", math.nan),
            "AP_defect": self.per_class.get("defect", math.nan),
        }

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        return clean(
            {
                "task": self.task,
                "AP": self.ap,
                "AP50": self.ap50,
                "AP75": self.ap75,
                "AP95": self.ap95,
                "per_class": self.per_class,
                "per_threshold": self.per_threshold,
                "per_class_threshold": self.per_class_threshold,
            }
        )

    @classmethod
    def from_json(cls, d: dict) -> "ApReport":
        nan = lambda v: math.nan if v is None else v  # noqa: E731
        return cls(
            d["task"],
            nan(d["AP"]),
            nan(d["AP50"]),
            nan(d["AP75"]),
            nan(d["AP95"]),
            {k: nan(v) for k, v in d["per_class"].items()},
            {k: nan(v) for k, v in d["per_threshold"].items()},
            {k: {t: nan(v) for t, v in row.items()} for k, row in d.get("per_class_threshold", {}).items()},
        )


def _key(t: float) -> str:
    return f"{t:.2f}"


def ap_coco(preds: Sequence[Detection], gts: Sequence[GroundTruth], task: str = "segmentation") -> ApReport:
    """Per-class AP at each of the ten thresholds, macro-averaged over classes with ground truth."""
    iou = iou_for(task)
    per_class_thr: dict[str, dict[str, float]] = {}
    classes = sorted({g.category_id for g in gts} | {p.category_id for p in preds})
    for cat in classes:
        cgts = [g for g in gts if g.category_id == cat]
        if not cgts:
            continue
        cpreds = [p for p in preds if p.category_id == cat]
        ordered = [cpreds[i] for i in sort_predictions(cpreds)]
        cache: dict = {}

        def cached_iou(a, b, _c=cache):
            k = (id(a), id(b))
            if k not in _c:
                _c[k] = iou(a, b)
            return _c[k]

        name = CLASS_NAMES.get(cat, str(cat))
        per_class_thr[name] = {
            _key(t): ap_from_flags(greedy_match(ordered, cgts, t, cached_iou), len(cgts)) for t in IOU_THRESHOLDS
        }
    per_threshold = {}
    for t in IOU_THRESHOLDS:
        vals = [row[_key(t)] for row in per_class_thr.values()]
        per_threshold[_key(t)] = float(np.mean(vals)) if vals else math.nan
    per_class = {name: float(np.mean(list(row.values()))) for name, row in per_class_thr.items()}
    ap = float(np.mean(list(per_threshold.values())))
    return ApReport(
        task,
        ap,
        per_threshold["0.50"],
        per_threshold["0.75"],
        per_threshold["0.95"],
        per_class,
        per_threshold,
        per_class_thr,
    )


# ---------------------------------------------------------------------------
# file-level evaluation


class EvaluationError(ValueError):
    pass


def load_results(path) -> list[dict]:
    with open(path) as fh:
        results = json.load(fh)
    if not isinstance(results, list):
        raise EvaluationError(f"{path}: predictions file must hold a list")
    return results


def evaluate_files(results: list[dict], dataset: CocoDataset, task: str) -> ApReport:
    image_ids = {im.id for im in dataset.images}
    preds = []
    for i, r in enumerate(results):
        if r["image_id"] not in image_ids:
            raise EvaluationError(f"prediction {i} references image_id {r['image_id']} absent from annotations")
        if task == "detection":
            if r.get("bbox") is None:
                continue
            region = tuple(r["bbox"])
        else:
            region = RleMask.from_json(r["segmentation"])
        preds.append(Detection(r["image_id"], r["category_id"], float(r["score"]), region))
    gts = [
        GroundTruth(a.image_id, a.category_id, a.bbox if task == "detection" else a.segmentation)
        for a in dataset.annotations
    ]
    return ap_coco(preds, gts, task)


def ground_truth_as_results(dataset: CocoDataset) -> list[dict]:
    return [
        {
            "image_id": a.image_id,
            "category_id": a.category_id,
            "score": 1.0,
            "bbox": list(a.bbox),
            "segmentation": a.segmentation.to_json(),
        }
        for a in dataset.annotations
    ]


def render_table(reports: Sequence[ApReport]) -> str:
    cols = ["AP", "AP50", "AP75", "AP95", "AP_normal", "AP_defect"]
    head = f"{'Task':<14}" + "".join(f"{c:>11}" for c in cols)
    lines = [head, "-" * len(head)]
    for rep in reports:
        vals = rep.columns()
        cells = "".join(f"{'n/a':>11}" if math.isnan(vals[c]) else f"{100 * vals[c]:>11.2f}" for c in cols)
        lines.append(f"{rep.task.capitalize():<14}{cells}")
    lines.append("")
    lines.append(
        "* AP is the mean of AP@IoU over the 10 thresholds "
        + ", ".join(f"{t:.2f}" for t in IOU_THRESHOLDS)
        + "; per-class columns average the same 10 thresholds."
    )
    return "\n".join(lines) + "\n"
