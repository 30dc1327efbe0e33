"""Anchor matching, hard negative mining, the multi-task loss and SGD."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .boxes import OffsetCoding, encode, jaccard_matrix
from .heads import DetectionOutput, RefinementState, flatten_levels, refined_target_residual
from .model import Model, forward

logger = logging.getLogger(__name__)

NEG_POS_RATIO = 3
MATCH_THRESHOLD = 0.5


@dataclass
class MatchResult:
    labels: np.ndarray  # [M] 0 = background, c + 1 for gt class c
    gt_index: np.ndarray  # [M] matched gt or -1

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels > 0)

    @property
    def num_pos(self) -> int:
        return int((self.labels > 0).sum())


@dataclass
class LossBreakdown:
    total: float
    loc_arm: float
    loc_odm: float
    conf: float
    n_arm: int
    n_odm: int
    n_neg: int

    def as_row(self) -> Dict[str, float]:
        return {"L_total": self.total, "L_loc_ARM": self.loc_arm, "L_loc_ODM": self.loc_odm,
                "L_conf": self.conf}


def match(anchors: np.ndarray, gt_boxes: np.ndarray, gt_labels: Sequence[int],
          threshold: float = MATCH_THRESHOLD) -> MatchResult:
    """Two-phase matching.

    Each gt (in index order) first claims its best-overlap anchor among those
    not yet claimed, lowest anchor index on ties. Every remaining anchor whose
    best overlap exceeds ``threshold`` is then assigned to that gt (lowest gt
    index on ties).
    """
    m = len(anchors)
    labels = np.zeros(m, dtype=np.int64)
    gt_index = np.full(m, -1, dtype=np.int64)
    gt_boxes = np.reshape(np.asarray(gt_boxes, dtype=np.float64), (-1, 4))
    if len(gt_boxes) == 0 or m == 0:
        return MatchResult(labels, gt_index)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    iou = jaccard_matrix(anchors, gt_boxes)  # [M, G]
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(m), best_gt]
    over = best_iou > threshold
    gt_index[over] = best_gt[over]
    claimed = np.zeros(m, dtype=bool)
    for g in range(len(gt_boxes)):
        col = np.where(claimed, -1.0, iou[:, g])
        a = int(col.argmax())
        if claimed[a]:
            continue  # more gts than anchors
        claimed[a] = True
        gt_index[a] = g
    pos = gt_index >= 0
    labels[pos] = gt_labels[gt_index[pos]] + 1
    return MatchResult(labels, gt_index)


def hard_negative_mine(conf_loss: np.ndarray, result: MatchResult, ratio: int = NEG_POS_RATIO) -> np.ndarray:
    """Indices of the ``ratio * N`` background anchors with the highest loss.

    Sorted by descending loss, ties to the lower index.
    """
    if ratio < 1:
        raise ValueError("negative:positive ratio must be >= 1")
    n_pos = result.num_pos
    if n_pos == 0:
        return np.zeros(0, dtype=np.int64)
    neg = np.flatnonzero(result.labels == 0)
    loss = np.asarray(conf_loss)[neg]
    order = np.lexsort((neg, -loss))
    return neg[order[: ratio * n_pos]]


def background_loss(logits: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[0] per row."""
    return -ad.log_softmax_rows(logits)[..., 0]


def compute_loss(det: DetectionOutput, state: Optional[RefinementState], anchors: np.ndarray,
                 gt_boxes: Sequence[np.ndarray], gt_labels: Sequence[np.ndarray],
                 coding: OffsetCoding = OffsetCoding(), arm_matches: Optional[List[MatchResult]] = None,
                 ratio: int = NEG_POS_RATIO, grad_through_refined: bool = False):
    """Multi-task loss over a batch; returns (loss tensor, LossBreakdown).

    ``L = L_loc_ARM / N_ARM + (L_loc_ODM + L_conf) / N_ODM`` with a term taken
    as 0 when its N is 0. ARM matching uses the original anchors, ODM matching
    uses ``det.reference`` (the refined anchors, treated as constants).
    """
    n, m, ncls = det.logits.shape
    logits_flat = ad.reshape(det.logits, (n * m, ncls))
    local_flat = ad.reshape(det.local, (n * m, 4))
    terms = []
    loc_arm = loc_odm = conf = 0.0
    n_arm = n_odm = n_neg = 0

    ar_flat = None
    if state is not None:
        ar_flat = ad.reshape(flatten_levels(state.ar, 4), (n * m, 4))
        if arm_matches is None:
            arm_matches = [match(anchors, b, l) for b, l in zip(gt_boxes, gt_labels)]
        rows, targets = [], []
        for i, mr in enumerate(arm_matches):
            pos = mr.positives
            rows.append(i * m + pos)
            targets.append(encode(gt_boxes[i][mr.gt_index[pos]], anchors[pos], coding))
        rows = np.concatenate(rows)
        n_arm = len(rows)
        if n_arm:
            diff = ad.sub(ad.take_rows(ar_flat, rows), Tensor(np.concatenate(targets)))
            l_arm = ad.tsum(ad.smooth_l1(diff))
            loc_arm = float(l_arm.data)
            terms.append(ad.mul(l_arm, 1.0 / n_arm))

    bg = background_loss(det.logits.data)  # [N, M]
    pos_rows, pos_ref, pos_gt, conf_rows, conf_tgt = [], [], [], [], []
    for i in range(n):
        mr = match(det.reference[i], gt_boxes[i], gt_labels[i])
        pos = mr.positives
        negs = hard_negative_mine(bg[i], mr, ratio)
        pos_rows.append(i * m + pos)
        pos_ref.append(pos)
        pos_gt.append(gt_boxes[i][mr.gt_index[pos]] if len(pos) else np.zeros((0, 4)))
        conf_rows.append(np.concatenate([i * m + pos, i * m + negs]))
        conf_tgt.append(np.concatenate([mr.labels[pos], np.zeros(len(negs), dtype=np.int64)]))
        n_neg += len(negs)
    pos_rows = np.concatenate(pos_rows)
    n_odm = len(pos_rows)
    if n_odm:
        pred = ad.take_rows(local_flat, pos_rows)
        gts = np.concatenate(pos_gt)
        if grad_through_refined and ar_flat is not None:
            anchors_b = anchors[np.concatenate(pos_ref)]
            diff = refined_target_residual(pred, ad.take_rows(ar_flat, pos_rows), anchors_b, gts,
                                           coding, through_anchor=True)
        else:
            ref = det.reference.reshape(n * m, 4)[pos_rows]
            diff = ad.sub(pred, Tensor(encode(gts, ref, coding)))
        l_odm = ad.tsum(ad.smooth_l1(diff))
        rows = np.concatenate(conf_rows)
        l_conf = ad.tsum(ad.cross_entropy(ad.take_rows(logits_flat, rows), np.concatenate(conf_tgt)))
        loc_odm, conf = float(l_odm.data), float(l_conf.data)
        terms.append(ad.mul(ad.add(l_odm, l_conf), 1.0 / n_odm))

    total = terms[0] if terms else None
    for t in terms[1:]:
        total = ad.add(total, t)
    value = float(total.data) if total is not None else 0.0
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss: loc_arm={loc_arm} loc_odm={loc_odm} conf={conf}")
    return total, LossBreakdown(value, loc_arm, loc_odm, conf, n_arm, n_odm, n_neg)


# ------------------------------------------------------------------ optimizer


def step_schedule(base_lr: float, steps: int) -> Callable[[int], float]:
    """base for the first 60% of steps, base/10 for the next 30%, base/100 after."""
    b1, b2 = int(round(0.6 * steps)), int(round(0.9 * steps))

    def lr(step: int) -> float:
        if step < b1:
            return base_lr
        if step < b2:
            return base_lr * 0.1
        return base_lr * 0.01

    return lr


class SGD:
    """Classic momentum with L2 weight decay folded into the gradient:
    ``v <- mu*v + g + wd*w``; ``w <- w - lr*v``."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NonFiniteError("non-finite gradient, step aborted")
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train_step(model: Model, images: np.ndarray, gt_boxes, gt_labels, optimizer: SGD,
               arm_matches: Optional[List[MatchResult]] = None) -> LossBreakdown:
    optimizer.zero_grad()
    state, det = forward(model, Tensor(images))
    loss, parts = compute_loss(det, state, model.anchors.boxes, gt_boxes, gt_labels,
                               model.config.coding, arm_matches,
                               grad_through_refined=model.config.grad_through_refined)
    if loss is not None:
        ad.backward(loss)
        optimizer.step()
    model.step += 1
    return parts


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    hflip: bool = True
    log_every: int = 50


METRIC_COLUMNS = ["step", "L_total", "L_loc_ARM", "L_loc_ODM", "L_conf", "lr"]


def train(model: Model, images: np.ndarray, boxes: Sequence[np.ndarray], labels: Sequence[np.ndarray],
          cfg: TrainConfig, metrics_path=None, progress: Optional[Callable[[int, LossBreakdown], None]] = None
          ) -> List[LossBreakdown]:
    """SGD over a fixed dataset held in memory.

    ``images`` is [D, C, S, S] in [0, 1]. Batch order and flips come from one
    generator seeded with ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    schedule = step_schedule(cfg.lr, cfg.steps)
    size = model.config.input_size
    anchors = model.anchors.boxes
    flipped = [_flip_boxes(b, size) for b in boxes]
    arm_cache = {}

    def arm_match(i: int, flip: bool) -> MatchResult:
        key = (i, flip)
        if key not in arm_cache:
            arm_cache[key] = match(anchors, flipped[i] if flip else boxes[i], labels[i])
        return arm_cache[key]

    history = []
    writer = None
    fh = open(metrics_path, "w", newline="") if metrics_path is not None else None
    try:
        if fh is not None:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
        order = np.zeros(0, dtype=np.int64)
        for step in range(cfg.steps):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(images))])
            idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
            flips = rng.random(cfg.batch_size) < 0.5 if cfg.hflip else np.zeros(cfg.batch_size, bool)
            batch = np.stack([images[i][..., ::-1] if f else images[i] for i, f in zip(idx, flips)])
            bb = [flipped[i] if f else boxes[i] for i, f in zip(idx, flips)]
            bl = [labels[i] for i in idx]
            matches = [arm_match(int(i), bool(f)) for i, f in zip(idx, flips)]
            opt.lr = schedule(step)
            parts = train_step(model, np.ascontiguousarray(batch), bb, bl, opt, matches)
            history.append(parts)
            if writer is not None:
                writer.writerow([step, f"{parts.total:.10g}", f"{parts.loc_arm:.10g}",
                                 f"{parts.loc_odm:.10g}", f"{parts.conf:.10g}", f"{opt.lr:.10g}"])
            if progress is not None and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                progress(step, parts)
    finally:
        if fh is not None:
            fh.close()
    return history


def _flip_boxes(b: np.ndarray, size: int) -> np.ndarray:
    b = np.array(b, dtype=np.float64).reshape(-1, 4)
    b[:, 0] = size - b[:, 0]
    return b
