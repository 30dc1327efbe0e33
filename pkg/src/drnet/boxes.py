"""Anchors, jaccard overlap, and the offset coding used for box regression.

Boxes are stored center-size ``(cx, cy, w, h)`` in input-image pixels, as
rows of float64 arrays. Corner form is only built for overlap computations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

LOG_CLAMP = 10.0


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class OffsetCoding:
    center_variance: float = 0.1
    size_variance: float = 0.2

    def __post_init__(self):
        if not (self.center_variance > 0 and self.size_variance > 0):
            raise ValueError("coding variances must be positive")


@dataclass
class BoxSet:
    """Anchors for all levels, level-major then row-major then ratio."""

    boxes: np.ndarray  # [M, 4] center-size
    level_offsets: tuple  # len L+1, anchors of level l are boxes[off[l]:off[l+1]]
    feature_shapes: tuple
    anchors_per_cell: int

    def __len__(self) -> int:
        return len(self.boxes)

    def level(self, l: int) -> np.ndarray:
        return self.boxes[self.level_offsets[l] : self.level_offsets[l + 1]]


def generate_anchors(feature_shapes: Sequence[tuple], strides: Sequence[int],
                     scales: Sequence[float], ratios: Sequence[float]) -> BoxSet:
    if not (len(feature_shapes) == len(strides) == len(scales)):
        raise ValueError("feature_shapes, strides and scales must have equal length")
    if len(ratios) == 0:
        raise ValueError("at least one aspect ratio is required")
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios <= 0):
        raise ValueError("aspect ratios must be positive")
    per_level = []
    offsets = [0]
    for (fh, fw), stride, scale in zip(feature_shapes, strides, scales):
        if fh < 1 or fw < 1:
            raise ValueError(f"zero-sized feature map {(fh, fw)}")
        ii, jj, rr = np.meshgrid(np.arange(fh), np.arange(fw), np.arange(len(ratios)), indexing="ij")
        r = ratios[rr.ravel()]
        level = np.stack([
            (jj.ravel() + 0.5) * stride,
            (ii.ravel() + 0.5) * stride,
            scale * np.sqrt(r),
            scale / np.sqrt(r),
        ], axis=1)
        per_level.append(level)
        offsets.append(offsets[-1] + len(level))
    return BoxSet(np.concatenate(per_level, axis=0), tuple(offsets),
                  tuple(tuple(s) for s in feature_shapes), len(ratios))


def to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:4] / 2
    return np.concatenate([b[..., 0:2] - half, b[..., 0:2] + half], axis=-1)


def from_corners(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.concatenate([(c[..., 0:2] + c[..., 2:4]) / 2, c[..., 2:4] - c[..., 0:2]], axis=-1)


def jaccard(a, b) -> float:
    ax1, ay1, ax2, ay2 = Box(*a).corners()
    bx1, by1, bx2, by2 = Box(*b).corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def jaccard_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise overlap [len(a), len(b)] for center-size rows."""
    ca = to_corners(np.reshape(a, (-1, 4)))[:, None, :]
    cb = to_corners(np.reshape(b, (-1, 4)))[None, :, :]
    iw = np.clip(np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1]), 0, None)
    inter = iw * ih
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    return inter / (area_a + area_b - inter)


def encode(gt, anchor, coding: OffsetCoding = OffsetCoding()) -> np.ndarray:
    """Offsets (tx, ty, tw, th) of ``gt`` relative to ``anchor``; broadcasts over rows."""
    g = np.asarray(gt, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    vc, vs = coding.center_variance, coding.size_variance
    return np.stack([
        (g[..., 0] - a[..., 0]) / (a[..., 2] * vc),
        (g[..., 1] - a[..., 1]) / (a[..., 3] * vc),
        np.log(g[..., 2] / a[..., 2]) / vs,
        np.log(g[..., 3] / a[..., 3]) / vs,
    ], axis=-1)


def decode(offsets, anchor, coding: OffsetCoding = OffsetCoding()) -> np.ndarray:
    """Inverse of :func:`encode`; tw, th are clamped to +-10 before exp."""
    t = np.asarray(offsets, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    vc, vs = coding.center_variance, coding.size_variance
    tw = np.clip(t[..., 2], -LOG_CLAMP, LOG_CLAMP)
    th = np.clip(t[..., 3], -LOG_CLAMP, LOG_CLAMP)
    return np.stack([
        a[..., 0] + t[..., 0] * vc * a[..., 2],
        a[..., 1] + t[..., 1] * vc * a[..., 3],
        a[..., 2] * np.exp(tw * vs),
        a[..., 3] * np.exp(th * vs),
    ], axis=-1)


def clip_boxes(boxes: np.ndarray, size: float) -> np.ndarray:
    c = np.clip(to_corners(boxes), 0.0, size)
    return from_corners(c)


def valid_boxes(boxes: np.ndarray) -> np.ndarray:
    b = np.reshape(boxes, (-1, 4))
    return np.isfinite(b).all(axis=1) & (b[:, 2] > 0) & (b[:, 3] > 0)


def anchor_count(feature_shapes: Sequence[tuple], n_ratios: int) -> int:
    return sum(h * w for h, w in feature_shapes) * n_ratios

