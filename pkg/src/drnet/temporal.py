"""Streaming video detection with propagated refinement state.

The reference generator runs on key frames only (every ``k``-th frame,
starting with frame 0). Its anchor offsets are scaled by the soft
coefficient ``e`` and stored; the refinement detector runs on every frame
against the stored state. Processing is strictly causal.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VideoSequence
from .evaluation import evaluate
from .heads import RefinementState
from .model import Model, forward_rd, forward_rg, rg_offsets_from
from .postprocess import NMS_THRESHOLD, SCORE_THRESHOLD, TOP_K, Detection, detect_batch


@dataclass(frozen=True)
class KeyFrameSchedule:
    k: int = 1
    e: float = 1.0

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"key frame duration must be a positive integer, got {self.k}")
        if not (0.0 <= self.e <= 1.0):
            raise ValueError(f"soft coefficient must lie in [0, 1], got {self.e}")

    def is_key(self, m: int) -> bool:
        return m % self.k == 0


@dataclass(frozen=True)
class PostConfig:
    score_threshold: float = SCORE_THRESHOLD
    nms_threshold: float = NMS_THRESHOLD
    top_k: int = TOP_K


def soft_refine(ar, e: float):
    """Scale anchor offsets by ``e``; accepts a Tensor or an array."""
    if not (0.0 <= e <= 1.0):
        raise ValueError(f"soft coefficient must lie in [0, 1], got {e}")
    if isinstance(ar, Tensor):
        return ad.mul(ar, float(e))
    return np.asarray(ar, dtype=np.float64) * e


def make_state(model: Model, frame: np.ndarray, e: float, offsets_from_scaled: bool = False) -> RefinementState:
    """Run RG on one frame [C, S, S] and build the state to propagate."""
    return make_batch_state(model, frame[None], e, offsets_from_scaled)


@dataclass
class StreamResult:
    detections: List[List[Detection]]
    rg_calls: int = 0
    rd_calls: int = 0
    forward_seconds: float = 0.0
    key_frames: List[int] = field(default_factory=list)


def stream_detect(model: Model, video, schedule: KeyFrameSchedule, post: PostConfig = PostConfig(),
                  offsets_from_scaled: bool = False, frame_offset: int = 0,
                  soft_on_key: bool = True) -> StreamResult:
    """Per-frame detections for ``video`` (a VideoSequence or [T, C, S, S] array).

    With ``soft_on_key`` off, key frames use the unscaled state and only the
    frames that reuse it see the soft-scaled offsets.
    """
    frames = video.frames if isinstance(video, VideoSequence) else np.asarray(video)
    result = StreamResult([])
    state: Optional[RefinementState] = None
    for m in range(len(frames)):
        t0 = time.perf_counter()
        current = state
        if schedule.is_key(m):
            state = make_state(model, frames[m], schedule.e, offsets_from_scaled)
            current = state
            if not soft_on_key and schedule.e != 1.0:
                current = make_state(model, frames[m], 1.0)
            result.rg_calls += 1
            result.key_frames.append(m)
        det = forward_rd(model, Tensor(frames[m][None]), current)
        result.forward_seconds += time.perf_counter() - t0
        result.rd_calls += 1
        result.detections.append(detect_batch(det, post.score_threshold, post.nms_threshold, post.top_k,
                                              first_frame=frame_offset + m)[0])
    return result


def paired_detect(model: Model, frames: np.ndarray, post: PostConfig = PostConfig(),
                  frame_offset: int = 0) -> List[List[Detection]]:
    """RG then RD on every frame independently (the k=1, e=1 reference)."""
    out = []
    for m, frame in enumerate(frames):
        state = forward_rg(model, Tensor(frame[None]))
        det = forward_rd(model, Tensor(frame[None]), state)
        out.append(detect_batch(det, post.score_threshold, post.nms_threshold, post.top_k,
                                first_frame=frame_offset + m)[0])
    return out


def rg_call_count(lengths: Sequence[int], k: int) -> int:
    return sum(math.ceil(n / k) for n in lengths)


@dataclass
class SweepRow:
    k: int
    e: float
    map: float
    rg_calls: int
    rd_calls: int
    ms_per_frame: float


SWEEP_COLUMNS = ["k", "e", "mAP", "rg_calls", "rd_calls", "ms_per_frame"]


def stream_many(model: Model, videos: Sequence[VideoSequence], schedule: KeyFrameSchedule,
                post: PostConfig = PostConfig(), offsets_from_scaled: bool = False,
                soft_on_key: bool = True, with_detections: bool = True):
    """Run clips of equal length in lockstep, frame ``m`` of every clip as one batch.

    Each clip keeps its own state; batching only shares the arithmetic.
    Returns ``(per-clip frame detections, rg_calls, rd_calls, seconds)`` where
    the call counts are per clip, summed, and ``seconds`` covers forward
    passes only. Detection frame ids number all frames of all clips in order.
    """
    starts = np.concatenate([[0], np.cumsum([len(v) for v in videos])]).astype(int)
    out: List[List[List[Detection]]] = [[] for _ in videos]
    rg = rd = 0
    seconds = 0.0
    groups: Dict[int, List[int]] = {}
    for i, v in enumerate(videos):
        groups.setdefault(len(v), []).append(i)
    for length, members in groups.items():
        frames = np.stack([videos[i].frames for i in members])  # [B, T, C, S, S]
        state = current = None
        for m in range(length):
            t0 = time.perf_counter()
            batch = np.ascontiguousarray(frames[:, m])
            if schedule.is_key(m):
                state = current = make_batch_state(model, batch, schedule.e, offsets_from_scaled)
                if not soft_on_key and schedule.e != 1.0:
                    current = make_batch_state(model, batch, 1.0)
                rg += len(members)
            else:
                current = state
            det = forward_rd(model, Tensor(batch), current)
            seconds += time.perf_counter() - t0
            rd += len(members)
            if with_detections:
                per = detect_batch(det, post.score_threshold, post.nms_threshold, post.top_k)
                for j, i in enumerate(members):
                    out[i].append([dataclasses.replace(d, frame=int(starts[i] + m)) for d in per[j]])
    return out, rg, rd, seconds


def make_batch_state(model: Model, frames: np.ndarray, e: float, offsets_from_scaled: bool = False
                     ) -> RefinementState:
    """RG on [B, C, S, S]; ``ar`` is soft-scaled, sampling offsets come from raw ``ar`` by default."""
    raw = forward_rg(model, Tensor(frames))
    ar_s = [soft_refine(t, e) for t in raw.ar]
    dp = rg_offsets_from(model, ar_s) if offsets_from_scaled else raw.dp
    return RefinementState(ar_s, dp).detached()


def evaluate_stream(model: Model, videos: Sequence[VideoSequence], schedule: KeyFrameSchedule,
                    post: PostConfig = PostConfig(), offsets_from_scaled: bool = False,
                    soft_on_key: bool = True):
    """Stream every clip, pool all frames, return (mAP, rg_calls, rd_calls, seconds)."""
    per_clip, rg, rd, seconds = stream_many(model, videos, schedule, post, offsets_from_scaled, soft_on_key)
    dets = [d for clip in per_clip for frame in clip for d in frame]
    boxes = [b for v in videos for b in v.boxes]
    labels = [l for v in videos for l in v.labels]
    score = evaluate(dets, boxes, labels, model.config.num_classes)["map"]
    return score, rg, rd, seconds


def sweep(model: Model, videos: Sequence[VideoSequence], ks: Sequence[int], es: Sequence[float],
          post: PostConfig = PostConfig(), offsets_from_scaled: bool = False, timing_repeats: int = 1,
          soft_on_key: bool = True, timing: bool = True) -> List[SweepRow]:
    """Grid over key frame duration and soft coefficient.

    Timing is the best of ``timing_repeats`` runs of the forward passes
    (post-processing excluded). With ``timing`` off, ``ms_per_frame`` is nan
    so that the table depends on nothing but the inputs.
    """
    rows = []
    n_frames = sum(len(v) for v in videos)
    for e in es:
        for k in ks:
            sched = KeyFrameSchedule(int(k), float(e))
            score, rg, rd, seconds = evaluate_stream(model, videos, sched, post, offsets_from_scaled, soft_on_key)
            for _ in range(timing_repeats - 1 if timing else 0):
                seconds = min(seconds, time_forward(model, videos, sched, offsets_from_scaled, soft_on_key))
            ms = 1000.0 * seconds / max(n_frames, 1) if timing else math.nan
            rows.append(SweepRow(int(k), float(e), score, rg, rd, ms))
    return rows


def time_forward(model: Model, videos: Sequence[VideoSequence], schedule: KeyFrameSchedule,
                 offsets_from_scaled: bool = False, soft_on_key: bool = True) -> float:
    """Wall-clock seconds of RG/RD forward passes alone over all clips."""
    return stream_many(model, videos, schedule, PostConfig(), offsets_from_scaled, soft_on_key,
                       with_detections=False)[3]


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.k, f"{r.e:g}", f"{r.map:.10g}", r.rg_calls, r.rd_calls, f"{r.ms_per_frame:.6f}"])


def write_sweep_svg(path, rows: Sequence[SweepRow], title: str = "mAP vs key frame duration") -> None:
    from .plots import line_plot

    series: Dict[str, tuple] = {}
    for e in sorted({r.e for r in rows}, reverse=True):
        sel = sorted((r for r in rows if r.e == e), key=lambda r: r.k)
        series[f"e={e:g}"] = ([r.k for r in sel], [r.map for r in sel])
    line_plot(path, series, "key frame duration k", "mAP", title, marker="o")
