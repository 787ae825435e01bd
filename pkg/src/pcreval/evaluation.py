"""Ground-truth mAP: greedy matching, 101-point interpolated AP, COCO-style averages.

mAP averages per-class AP over the ten IoU thresholds 0.50:0.05:0.95; mAP50
and mAP75 are the fixed-threshold variants. Classes with no ground truth
anywhere in the dataset are excluded from the averages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .detection import FinalPrediction, GroundTruthBox, ImageRecord
from .errors import DataError
from .geometry import iou

IOU_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
RECALL_SAMPLES = tuple(i / 100 for i in range(101))


@dataclass(frozen=True)
class MatchResult:
    """Greedy matching of one image's class slice at one IoU threshold."""

    matched_gt: tuple[int | None, ...]   # per prediction: claimed GT index or None
    gt_matched: tuple[bool, ...]         # per ground truth: claimed by some prediction


@dataclass(frozen=True)
class ApReport:
    """AP per (class, IoU threshold) plus the COCO-style aggregates."""

    per_class: dict[int, dict[float, float]]
    map: float
    map50: float
    map75: float
    n_images: int
    class_counts: dict[int, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "map": self.map,
            "map50": self.map50,
            "map75": self.map75,
            "n_images": self.n_images,
            "iou_thresholds": list(IOU_THRESHOLDS),
            "per_class": {
                str(cls): {f"{thr:.2f}": ap for thr, ap in by_thr.items()}
                for cls, by_thr in sorted(self.per_class.items())
            },
            "ground_truth_counts": {
                str(cls): n for cls, n in sorted(self.class_counts.items())
            },
        }


def match(finals: Sequence[FinalPrediction], ground_truth: Sequence[GroundTruthBox],
          iou_threshold: float) -> MatchResult:
    """Greedy confidence-order matching of one class slice of one image.

    `finals` must already be sorted by descending confidence. Each prediction
    claims the unmatched ground truth with the highest IoU >= threshold, ties
    broken by lower ground-truth index.
    """
    taken = [False] * len(ground_truth)
    matched: list[int | None] = []
    for pred in finals:
        best_iou = 0.0
        best_gt: int | None = None
        for g, gt in enumerate(ground_truth):
            if taken[g]:
                continue
            ov = iou(pred.box, gt.box)
            if ov >= iou_threshold and ov > best_iou:
                best_iou = ov
                best_gt = g
        if best_gt is not None:
            taken[best_gt] = True
        matched.append(best_gt)
    return MatchResult(tuple(matched), tuple(taken))


def average_precision(scored: Sequence[tuple[float, bool]], n_ground_truth: int) -> float:
    """101-point interpolated AP from (confidence, is_true_positive) pairs.

    The precision envelope (max precision at any recall >= r) is sampled at
    recalls 0.00, 0.01, ..., 1.00 and averaged. With no ground truth the AP
    is undefined and 0.0 is returned; the caller excludes such classes.
    """
    if n_ground_truth <= 0:
        return 0.0
    if not scored:
        return 0.0
    ordered = sorted(scored, key=lambda p: -p[0])
    recalls: list[float] = []
    precisions: list[float] = []
    tp = 0
    for k, (_, is_tp) in enumerate(ordered, start=1):
        if is_tp:
            tp += 1
        recalls.append(tp / n_ground_truth)
        precisions.append(tp / k)
    # precision envelope from the right
    envelope = precisions[:]
    for k in range(len(envelope) - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    samples = []
    idx = 0
    for r in RECALL_SAMPLES:
        while idx < len(recalls) and recalls[idx] < r:
            idx += 1
        samples.append(envelope[idx] if idx < len(recalls) else 0.0)
    return math.fsum(samples) / len(samples)


def _sorted_class_slice(finals: Iterable[FinalPrediction], cls: int) -> list[FinalPrediction]:
    idx = [(f, i) for i, f in enumerate(finals) if f.class_id == cls]
    idx.sort(key=lambda pair: (-pair[0].confidence, pair[1]))
    return [f for f, _ in idx]


def evaluate_map(records: Sequence[ImageRecord]) -> ApReport:
    """Dataset mAP report; every record must carry ground truth and finals."""
    records = list(records)
    gt_counts: dict[int, int] = {}
    classes_pred: set[int] = set()
    for record in records:
        if record.ground_truth is None:
            raise DataError(f"image '{record.image_id}' has no ground truth")
        if record.finals is None:
            raise DataError(f"image '{record.image_id}': finals not computed; run NMS first")
        for gt in record.ground_truth:
            gt_counts[gt.class_id] = gt_counts.get(gt.class_id, 0) + 1
        classes_pred.update(f.class_id for f in record.finals)

    classes = sorted(c for c, n in gt_counts.items() if n > 0)
    per_class: dict[int, dict[float, float]] = {c: {} for c in classes}

    for cls in classes:
        # IoU matrices are threshold-independent; compute once per image.
        slices = []
        for record in records:
            preds = _sorted_class_slice(record.finals, cls)
            gts = [g for g in record.ground_truth if g.class_id == cls]
            ious = [[iou(p.box, g.box) for g in gts] for p in preds]
            slices.append((preds, len(gts), ious))
        n_gt = gt_counts[cls]
        for thr in IOU_THRESHOLDS:
            scored: list[tuple[float, bool]] = []
            for preds, n_gts, ious in slices:
                taken = [False] * n_gts
                for p, pred in enumerate(preds):
                    best_iou = 0.0
                    best_gt = None
                    for g in range(n_gts):
                        if taken[g]:
                            continue
                        ov = ious[p][g]
                        if ov >= thr and ov > best_iou:
                            best_iou = ov
                            best_gt = g
                    if best_gt is not None:
                        taken[best_gt] = True
                    scored.append((pred.confidence, best_gt is not None))
            per_class[cls][thr] = average_precision(scored, n_gt)

    def mean_over_classes(thr: float) -> float:
        if not classes:
            return 0.0
        return math.fsum(per_class[c][thr] for c in classes) / len(classes)

    per_thr = {thr: mean_over_classes(thr) for thr in IOU_THRESHOLDS}
    overall = math.fsum(per_thr.values()) / len(IOU_THRESHOLDS)
    return ApReport(
        per_class=per_class,
        map=overall,
        map50=per_thr[0.50],
        map75=per_thr[0.75],
        n_images=len(records),
        class_counts=gt_counts,
    )


def render_ap_table(report: ApReport) -> str:
    """Fixed-width per-class AP table for console output."""
    lines = []
    header = f"{'class':>8} {'n_gt':>6} " + " ".join(f"AP@{t:.2f}" for t in IOU_THRESHOLDS)
    lines.append(header)
    lines.append("-" * len(header))
    for cls in sorted(report.per_class):
        row = f"{cls:>8} {report.class_counts.get(cls, 0):>6} "
        row += " ".join(f"{report.per_class[cls][t]:7.4f}" for t in IOU_THRESHOLDS)
        lines.append(row)
    lines.append("-" * len(header))
    lines.append(
        f"mAP = {report.map:.4f}   mAP50 = {report.map50:.4f}   mAP75 = {report.map75:.4f}"
        f"   ({report.n_images} images)"
    )
    return "\n".join(lines)


def write_ap_report(report: ApReport, path) -> None:
    from .detection import atomic_write_text

    atomic_write_text(path, json.dumps(report.to_json(), indent=2) + "\n")
