"""AP@0.5 with all-points interpolation, mAP, and PR-curve export."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from .boxes import jaccard_matrix
from .postprocess import Detection

logger = logging.getLogger(__name__)


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float


def pr_curve(scores: Sequence[float], images: Sequence[int], boxes: np.ndarray,
             gts: Dict[int, np.ndarray], iou_threshold: float = 0.5) -> Optional[PRCurve]:
    """Greedy matching of score-sorted detections of one class.

    A detection is a true positive when some still-unmatched gt of its image
    overlaps it by more than ``iou_threshold``; the highest-overlap such gt
    (lowest index on ties) is consumed. Returns None when there are no gts.
    """
    n_gt = sum(len(g) for g in gts.values())
    if n_gt == 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    used = {img: np.zeros(len(g), dtype=bool) for img, g in gts.items()}
    tp = np.zeros(len(order))
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    for rank, d in enumerate(order):
        img = int(images[d])
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        iou = jaccard_matrix(boxes[d : d + 1], g)[0]
        iou = np.where(used[img], -1.0, iou)
        best = int(np.argmax(iou))
        if iou[best] > iou_threshold:
            used[img][best] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    return PRCurve(recall, precision, all_points_ap(recall, precision))


def all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope (precision made non-increasing in recall)."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.flatnonzero(r[1:] != r[:-1])
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def average_precision(detections: Sequence[Detection], gt_boxes: Sequence[np.ndarray],
                      gt_labels: Sequence[np.ndarray], cls: int, iou_threshold: float = 0.5) -> Optional[float]:
    """AP of class ``cls``; detections index images through ``Detection.frame``."""
    curve = class_curve(detections, gt_boxes, gt_labels, cls, iou_threshold)
    return None if curve is None else curve.ap


def class_curve(detections, gt_boxes, gt_labels, cls: int, iou_threshold: float = 0.5) -> Optional[PRCurve]:
    gts = {i: np.asarray(b).reshape(-1, 4)[np.asarray(l) == cls] for i, (b, l) in enumerate(zip(gt_boxes, gt_labels))}
    dets = [d for d in detections if d.cls == cls]
    boxes = np.array([[d.cx, d.cy, d.w, d.h] for d in dets]).reshape(-1, 4)
    return pr_curve([d.score for d in dets], [d.frame for d in dets], boxes, gts, iou_threshold)


def mean_ap(aps: Dict[int, Optional[float]]) -> float:
    valid = [v for v in aps.values() if v is not None]
    if not valid:
        raise ValueError("no class has ground truth; mAP is undefined")
    return float(np.mean(valid))


def evaluate(detections: Sequence[Detection], gt_boxes, gt_labels, num_classes: int,
             iou_threshold: float = 0.5) -> Dict[str, object]:
    aps: Dict[int, Optional[float]] = {}
    for c in range(num_classes):
        aps[c] = average_precision(detections, gt_boxes, gt_labels, c, iou_threshold)
        if aps[c] is None:
            logger.warning("class %d has no ground truth; excluded from mAP", c)
    return {"ap": aps, "map": mean_ap(aps)}


def write_pr_csv(path, curve: PRCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["recall", "precision"])
        for r, p in zip(curve.recall, curve.precision):
            w.writerow([f"{r:.10g}", f"{p:.10g}"])


def write_pr_svg(path, curves: Dict[str, PRCurve]) -> None:
    from .plots import line_plot

    series = {f"{name} (AP={c.ap:.3f})": (c.recall, c.precision) for name, c in curves.items()}
    line_plot(path, series, "recall", "precision", "Precision-recall", xlim=(0, 1), ylim=(0, 1.02))

