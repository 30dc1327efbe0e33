"""Anchor refinement, feature location refinement and the deformable detection heads.

Per-level tensors keep the conv layout: anchor offsets ``ar`` are
[N, 4*A, H, W] with channel ``4*a + coord``; class logits are
[N, A*(C+1), H, W] with channel ``a*(C+1) + cls``. :func:`flatten_level`
turns either into [N, H*W*A, K] rows in anchor order (row-major cells,
then ratio), matching :func:`drnet.boxes.generate_anchors`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import OffsetCoding, clip_boxes, decode, encode
from .deform import deform_conv2d


@dataclass(frozen=True)
class MultiHeadConfig:
    """Detection paths as (kernel size, dilation); outputs are summed over paths."""

    paths: tuple = ((3, 1), (5, 1))

    def __post_init__(self):
        if len(self.paths) < 1:
            raise ValueError("at least one detection path is required")
        for k, d in self.paths:
            if k % 2 == 0 or k < 1 or d < 1:
                raise ValueError(f"invalid path (kernel={k}, dilation={d}); kernels must be odd")

    @property
    def L(self) -> int:
        return len(self.paths)


@dataclass
class PathWeights:
    """Weights of one detection path on one level."""

    kernel: int
    dilation: int
    w_local: Tensor  # [4A, D, k, k]
    b_local: Tensor
    w_conf: Tensor  # [A(C+1), D, k, k]
    b_conf: Tensor
    w_fr: Optional[Tensor] = None  # [2k^2, 4A, 1, 1]
    b_fr: Optional[Tensor] = None


@dataclass
class RefinementState:
    """Per-level anchor offsets and, per level, one offset field per detection path."""

    ar: List[Tensor]
    dp: Optional[List[List[Tensor]]] = None

    def detached(self) -> "RefinementState":
        dp = None if self.dp is None else [[t.detach() for t in lv] for lv in self.dp]
        return RefinementState([t.detach() for t in self.ar], dp)


@dataclass
class DetectionOutput:
    """Flattened per-anchor predictions over all levels.

    ``reference`` holds the boxes ``local`` decodes against: refined anchors
    for refinement variants, the original anchors otherwise.
    """

    logits: Tensor  # [N, M, C+1]
    local: Tensor  # [N, M, 4]
    reference: np.ndarray  # [N, M, 4]
    coding: OffsetCoding = field(default_factory=OffsetCoding)

    @property
    def boxes(self) -> np.ndarray:
        return decode(self.local.data, self.reference, self.coding)

    def scores(self) -> np.ndarray:
        return np.exp(ad.log_softmax_rows(self.logits.data))


def flatten_level(t: Tensor, per_anchor: int) -> Tensor:
    """[N, A*K, H, W] -> [N, H*W*A, K]."""
    n, ch, h, w = t.shape
    a = ch // per_anchor
    x = ad.reshape(t, (n, a, per_anchor, h, w))
    x = ad.transpose(x, (0, 3, 4, 1, 2))
    return ad.reshape(x, (n, h * w * a, per_anchor))


def flatten_levels(ts: Sequence[Tensor], per_anchor: int) -> Tensor:
    flat = [flatten_level(t, per_anchor) for t in ts]
    return flat[0] if len(flat) == 1 else ad.concat(flat, axis=1)


def level_rows(arr: np.ndarray, per_anchor: int) -> np.ndarray:
    n, ch, h, w = arr.shape
    a = ch // per_anchor
    return arr.reshape(n, a, per_anchor, h, w).transpose(0, 3, 4, 1, 2).reshape(n, h * w * a, per_anchor)


def arm_forward(f_arm: Sequence[Tensor], w_ar: Sequence[tuple]) -> List[Tensor]:
    """Anchor offsets per level from a 3x3 conv; ``w_ar`` holds (weight, bias) per level."""
    if len(f_arm) != len(w_ar):
        raise ValueError(f"{len(f_arm)} feature maps but {len(w_ar)} anchor-refinement heads")
    out = []
    for f, (w, b) in zip(f_arm, w_ar):
        if w.shape[0] % 4:
            raise ValueError("anchor-refinement head must emit 4*A channels")
        out.append(ad.conv2d(f, w, b, stride=1, padding=w.shape[2] // 2))
    return out


def feature_location_refine(ar: Tensor, w_fr: Tensor, b_fr: Optional[Tensor] = None) -> Tensor:
    """Sampling offsets predicted from anchor offsets by a 1x1 conv."""
    if w_fr.ndim != 4 or w_fr.shape[2:] != (1, 1):
        raise ValueError(f"feature location refinement needs a 1x1 kernel, got {w_fr.shape}")
    if w_fr.shape[1] != ar.shape[1]:
        raise ValueError(f"1x1 kernel expects {w_fr.shape[1]} input channels, ar has {ar.shape[1]}")
    return ad.conv2d(ar, w_fr, b_fr)


def refined_anchors(ar_levels: Sequence[np.ndarray], anchors: np.ndarray,
                    coding: OffsetCoding, clip_to: Optional[float] = None) -> np.ndarray:
    """Decode anchor offsets (arrays [N, 4A, H, W] per level) against original anchors -> [N, M, 4]."""
    rows = np.concatenate([level_rows(a, 4) for a in ar_levels], axis=1)
    ref = decode(rows, anchors[None], coding)
    if clip_to is not None:
        ref = clip_boxes(ref, clip_to)
        ref[..., 2:] = np.maximum(ref[..., 2:], 1e-3)
    return ref


def _path_output(f_odm: Tensor, pw: PathWeights, dp: Optional[Tensor], deformable: bool):
    pad = pw.dilation * (pw.kernel // 2)
    w = ad.concat([pw.w_local, pw.w_conf], axis=0)
    b = ad.concat([pw.b_local, pw.b_conf], axis=0)
    if deformable and dp is not None:
        out = deform_conv2d(f_odm, w, b, dp, stride=1, padding=pad, dilation=pw.dilation)
    else:
        out = ad.conv2d(f_odm, w, b, stride=1, padding=pad, dilation=pw.dilation)
    n_loc = pw.w_local.shape[0]
    co = out.shape[1]
    loc = _channel_slice(out, 0, n_loc)
    conf = _channel_slice(out, n_loc, co)
    return loc, conf


def _channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return ad.make_op(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw, "channel_slice")


def level_head(f_odm: Tensor, paths: Sequence[PathWeights], dp: Optional[Sequence[Tensor]],
               deformable: bool = True):
    """Summed (local, conf) maps over all paths of one level; fixed path order."""
    loc = conf = None
    for i, pw in enumerate(paths):
        l, c = _path_output(f_odm, pw, None if dp is None else dp[i], deformable)
        loc = l if loc is None else ad.add(loc, l)
        conf = c if conf is None else ad.add(conf, c)
    return loc, conf


def anchor_offset_detect(f_odm: Tensor, ar: Optional[Tensor], dp: Optional[Tensor],
                         w_local: Tensor, b_local: Tensor, w_conf: Tensor, b_conf: Tensor,
                         anchors: np.ndarray, coding: OffsetCoding = OffsetCoding(),
                         dilation: int = 1) -> DetectionOutput:
    """Single-level, single-path detection: deformable conv over refined sampling
    locations, offsets decoded against the refined anchors (two-step regression)."""
    pw = PathWeights(w_local.shape[2], dilation, w_local, b_local, w_conf, b_conf)
    return multi_head_detect(f_odm, ar, [pw], None if dp is None else [dp], anchors, coding)


def multi_head_detect(f_odm: Tensor, ar: Optional[Tensor], paths: Sequence[PathWeights],
                      dps: Optional[Sequence[Tensor]], anchors: np.ndarray,
                      coding: OffsetCoding = OffsetCoding(), deformable: bool = True) -> DetectionOutput:
    """Single-level detection fused over ``len(paths)`` paths."""
    if dps is not None and len(dps) != len(paths):
        raise ValueError(f"{len(paths)} paths but {len(dps)} offset fields")
    n, _, h, w = f_odm.shape
    a = paths[0].w_local.shape[0] // 4
    if len(anchors) != h * w * a:
        raise ValueError(f"anchor layout has {len(anchors)} boxes, grid {h}x{w}x{a} needs {h * w * a}")
    for pw in paths:
        if pw.w_local.shape[2:] != (pw.kernel, pw.kernel) or pw.w_conf.shape[2:] != (pw.kernel, pw.kernel):
            raise ValueError(f"path weights do not match kernel size {pw.kernel}")
    loc, conf = level_head(f_odm, paths, dps, deformable)
    ncls = conf.shape[1] // a
    if ar is None:
        reference = np.broadcast_to(anchors, (n,) + anchors.shape).copy()
    else:
        reference = refined_anchors([ar.data], anchors, coding)
    return DetectionOutput(flatten_level(conf, ncls), flatten_level(loc, 4), reference, coding)


def refined_target_residual(local: Tensor, ar: Tensor, anchors: np.ndarray, gts: np.ndarray,
                            coding: OffsetCoding, through_anchor: bool = False) -> Tensor:
    """``local - encode(gt, decode(ar, anchor))`` for matched rows.

    ``local``, ``ar``: [P, 4] tensors; ``anchors``, ``gts``: [P, 4]. With
    ``through_anchor`` the target also carries gradient into ``ar``.
    """
    vs = coding.size_variance
    ref = decode(ar.data, anchors, coding)
    target = encode(gts, ref, coding)
    out = local.data - target
    if not through_anchor:
        return ad.sub(local, Tensor(target))
    ew = np.exp(vs * np.clip(ar.data[:, 2], -10, 10))
    eh = np.exp(vs * np.clip(ar.data[:, 3], -10, 10))
    inside_w = np.abs(ar.data[:, 2]) < 10
    inside_h = np.abs(ar.data[:, 3]) < 10

    def bw(g):
        gar = np.zeros_like(g)
        # target_x = (gx - rx) / (rw vc), rx = ax + ar_x vc aw, rw = aw exp(vs ar_w)
        gar[:, 0] = g[:, 0] * (1.0 / ew)
        gar[:, 1] = g[:, 1] * (1.0 / eh)
        gar[:, 2] = (g[:, 2] + g[:, 0] * target[:, 0] * vs) * inside_w
        gar[:, 3] = (g[:, 3] + g[:, 1] * target[:, 1] * vs) * inside_h
        return g, gar

    return ad.make_op(out, (local, ar), bw, "refined_target_residual")
