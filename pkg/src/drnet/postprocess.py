"""Score thresholding, per-class greedy NMS and global top-K."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, List

import numpy as np

from .boxes import jaccard_matrix, valid_boxes

SCORE_THRESHOLD = 0.01
NMS_THRESHOLD = 0.45
TOP_K = 200


@dataclass
class Candidates:
    """Parallel arrays; ``cls`` counts from 1 (0 is background)."""

    anchor: np.ndarray
    cls: np.ndarray
    score: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.anchor)

    def take(self, idx) -> "Candidates":
        idx = np.asarray(idx, dtype=np.int64)
        return Candidates(self.anchor[idx], self.cls[idx], self.score[idx], self.boxes[idx].reshape(-1, 4))

    @classmethod
    def empty(cls) -> "Candidates":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 4)))

    def keys(self) -> set:
        return set(zip(self.anchor.tolist(), self.cls.tolist()))


@dataclass(frozen=True)
class Detection:
    frame: int
    cls: int  # object class id, background excluded
    score: float
    cx: float
    cy: float
    w: float
    h: float

    @property
    def box(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def to_json(self) -> str:
        return json.dumps({"frame": self.frame, "class": self.cls, "score": self.score,
                           "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "Detection":
        r = json.loads(line)
        return cls(int(r["frame"]), int(r["class"]), float(r["score"]), float(r["cx"]), float(r["cy"]),
                   float(r["w"]), float(r["h"]))


def filter_scores(scores: np.ndarray, boxes: np.ndarray, threshold: float = SCORE_THRESHOLD) -> Candidates:
    """Every (anchor, class >= 1) pair with probability strictly above ``threshold``."""
    scores = np.asarray(scores)
    ok = valid_boxes(boxes)
    a, c = np.nonzero((scores[:, 1:] > threshold) & ok[:, None])
    c = c + 1
    return Candidates(a.astype(np.int64), c.astype(np.int64), scores[a, c], np.asarray(boxes)[a].reshape(-1, 4))


def _order(cands: Candidates) -> np.ndarray:
    """Descending score, then anchor index, then class."""
    return np.lexsort((cands.cls, cands.anchor, -cands.score))


def nms(cands: Candidates, iou_threshold: float = NMS_THRESHOLD) -> Candidates:
    """Greedy per-class suppression of boxes overlapping a kept box by more than the threshold."""
    if len(cands) == 0:
        return cands
    keep_all = []
    for c in np.unique(cands.cls):
        idx = np.flatnonzero(cands.cls == c)
        sub = cands.take(idx)
        order = _order(sub)
        boxes = sub.boxes[order]
        iou = jaccard_matrix(boxes, boxes)
        alive = np.ones(len(order), dtype=bool)
        for i in range(len(order)):
            if not alive[i]:
                continue
            keep_all.append(idx[order[i]])
            alive[i + 1 :] &= ~(iou[i, i + 1 :] > iou_threshold)
    kept = cands.take(np.array(keep_all, dtype=np.int64))
    return kept.take(_order(kept))


def top_k(cands: Candidates, k: int = TOP_K) -> Candidates:
    if k < 1:
        raise ValueError("K must be >= 1")
    return cands.take(_order(cands)[:k])


def postprocess(scores: np.ndarray, boxes: np.ndarray, threshold: float = SCORE_THRESHOLD,
                iou_threshold: float = NMS_THRESHOLD, k: int = TOP_K) -> Candidates:
    return top_k(nms(filter_scores(scores, boxes, threshold), iou_threshold), k)


def to_detections(cands: Candidates, frame: int = 0) -> List[Detection]:
    return [Detection(frame, int(c) - 1, float(s), *map(float, b))
            for c, s, b in zip(cands.cls, cands.score, cands.boxes)]


def detect_batch(det, threshold: float = SCORE_THRESHOLD, iou_threshold: float = NMS_THRESHOLD,
                 k: int = TOP_K, first_frame: int = 0) -> List[List[Detection]]:
    """Post-process every image of a :class:`DetectionOutput`."""
    scores = det.scores()
    boxes = det.boxes
    return [to_detections(postprocess(scores[i], boxes[i], threshold, iou_threshold, k), first_frame + i)
            for i in range(len(scores))]


def write_detections(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(d.to_json() + "\n")


def read_detections(path) -> List[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_json(line) for line in fh if line.strip()]
