"""Exact tIoU / AP / mAP evaluation over temporal event predictions.

Matching follows the standard greedy protocol: per class and threshold,
predictions are visited in descending confidence (ties: earlier start,
then video id, then earlier end) and each grabs the still-unmatched
ground truth with the highest tIoU at or above the threshold.  AP is the
area under the all-point interpolated precision-recall curve (precision
envelope).  Classes absent from the ground truth are excluded from the
mAP mean; the average mAP additionally averages over the threshold grid.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["tiou", "average_precision", "mean_ap", "EvalReport"]


def tiou(a, b) -> float:
    """Temporal intersection-over-union of (start, end) intervals.

    Zero-length intervals and disjoint pairs evaluate to 0.
    """
    a_start, a_end = float(a[0]), float(a[1])
    b_start, b_end = float(b[0]), float(b[1])
    if a_end <= a_start or b_end <= b_start:
        return 0.0
    inter = min(a_end, b_end) - max(a_start, b_start)
    if inter <= 0:
        return 0.0
    union = (a_end - a_start) + (b_end - b_start) - inter
    return inter / union


def _interp_ap(tp_flags: list, n_gt: int) -> tuple[float, list, list]:
    """All-point interpolated AP plus the raw PR curve."""
    recalls, precisions = [], []
    tp_cum = 0
    for k, flag in enumerate(tp_flags, start=1):
        tp_cum += flag
        recalls.append(tp_cum / n_gt)
        precisions.append(tp_cum / k)
    ap = 0.0
    prev_recall = 0.0
    for k in range(len(tp_flags)):
        env = max(precisions[k:]) if precisions[k:] else 0.0
        if recalls[k] > prev_recall:
            ap += (recalls[k] - prev_recall) * env
            prev_recall = recalls[k]
    return ap, recalls, precisions


def average_precision(preds_by_video: dict, gts_by_video: dict, class_id: int,
                      threshold: float):
    """AP for one class at one tIoU threshold.

    Returns (ap, tp, fp, recalls, precisions); ap is 0 when the class has
    no ground truth.
    """
    gt_pool = {vid: [g for g in gts if g.label == class_id]
               for vid, gts in gts_by_video.items()}
    n_gt = sum(len(v) for v in gt_pool.values())
    ranked = sorted(
        ((vid, e) for vid, events in preds_by_video.items()
         for e in events if e.label == class_id),
        key=lambda ve: (-ve[1].confidence, ve[1].start, ve[0], ve[1].end))
    if n_gt == 0:
        return 0.0, 0, len(ranked), [], []
    matched: dict = {vid: [False] * len(gts) for vid, gts in gt_pool.items()}
    tp_flags = []
    for vid, e in ranked:
        gts = gt_pool.get(vid, [])
        best = None
        for gi, g in enumerate(gts):
            if matched[vid][gi]:
                continue
            ov = tiou((e.start, e.end), (g.start, g.end))
            if ov < threshold:
                continue
            key = (-ov, g.start, gi)
            if best is None or key < best[0]:
                best = (key, gi)
        if best is not None:
            matched[vid][best[1]] = True
            tp_flags.append(1)
        else:
            tp_flags.append(0)
    ap, recalls, precisions = _interp_ap(tp_flags, n_gt)
    tp = sum(tp_flags)
    return ap, tp, len(tp_flags) - tp, recalls, precisions


@dataclass
class EvalReport:
    thresholds: list
    classes: list
    ap: dict                     # {threshold: {class: ap}}
    map_at: dict                 # {threshold: mAP}
    average_map: float
    counts: dict                 # {threshold: {class: {"tp": n, "fp": n}}}
    curves: dict = field(default_factory=dict)  # {threshold: {class: (rec, prec)}}

    def to_json_dict(self) -> dict:
        return {
            "thresholds": self.thresholds,
            "classes": self.classes,
            "ap": {str(t): {str(c): v for c, v in row.items()} for t, row in self.ap.items()},
            "map": {str(t): v for t, v in self.map_at.items()},
            "average_map": self.average_map,
            "counts": {str(t): {str(c): v for c, v in row.items()}
                       for t, row in self.counts.items()},
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "class", "ap", "tp", "fp"])
            for t in self.thresholds:
                for c in self.classes:
                    cnt = self.counts[t][c]
                    w.writerow([t, c, f"{self.ap[t][c]:.6f}", cnt["tp"], cnt["fp"]])
                w.writerow([t, "mAP", f"{self.map_at[t]:.6f}", "", ""])
            w.writerow(["all", "average_mAP", f"{self.average_map:.6f}", "", ""])


def mean_ap(preds_by_video: dict, gts_by_video: dict, thresholds) -> EvalReport:
    """Per-threshold per-class AP table with mAP and grid-averaged mAP."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("threshold grid must be non-empty")
    classes = sorted({g.label for gts in gts_by_video.values() for g in gts})
    if not classes:
        raise ValueError("evaluation requires at least one ground-truth event")
    ap_table, counts, curves, map_at = {}, {}, {}, {}
    for t in thresholds:
        ap_table[t], counts[t], curves[t] = {}, {}, {}
        for c in classes:
            ap, tp, fp, rec, prec = average_precision(preds_by_video, gts_by_video, c, t)
            ap_table[t][c] = ap
            counts[t][c] = {"tp": tp, "fp": fp}
            curves[t][c] = (rec, prec)
        map_at[t] = float(np.mean([ap_table[t][c] for c in classes]))
    return EvalReport(
        thresholds=thresholds,
        classes=classes,
        ap=ap_table,
        map_at=map_at,
        average_map=float(np.mean([map_at[t] for t in thresholds])),
        counts=counts,
        curves=curves,
    )
