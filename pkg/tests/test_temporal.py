import csv
import math

import numpy as np
import pytest

from drnet.autodiff import Tensor
from drnet.boxes import decode, encode
from drnet.data import SceneSpec, generate_video
from drnet.model import build, forward_rd, zero_state
from drnet.postprocess import detect_batch
from drnet.temporal import (KeyFrameSchedule, PostConfig, make_state, paired_detect, rg_call_count, soft_refine,
                            stream_detect, stream_many, sweep, write_sweep_csv, write_sweep_svg)

from conftest import micro_config

SPEC = SceneSpec(seed=7, canvas=16, min_size=6, max_size=8, max_speed=1.5)
POST = PostConfig(score_threshold=0.2)


def _model(variant="tdrnet", seed=0):
    model = build(micro_config(variant=variant), seed, zero_refinement=False, head_std=0.3)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data[...] = rng.normal(0, 0.3, p.shape)
    return model


def _video(frames=7, index=0):
    return generate_video(SPEC, frames, index)


def _same(a, b):
    return [[(d.cls, d.score, d.cx, d.cy, d.w, d.h) for d in f] for f in a] == \
           [[(d.cls, d.score, d.cx, d.cy, d.w, d.h) for d in f] for f in b]


def test_schedule():
    s = KeyFrameSchedule(3, 0.5)
    assert [m for m in range(10) if s.is_key(m)] == [0, 3, 6, 9]
    for bad in (dict(k=0), dict(k=1.5), dict(e=-0.1), dict(e=1.01)):
        with pytest.raises(ValueError):
            KeyFrameSchedule(**bad)


def test_rg_call_count():
    assert rg_call_count([32] * 20, 1) == 640
    assert rg_call_count([32] * 20, 8) == 80
    assert rg_call_count([7, 5], 4) == 2 + 2
    assert rg_call_count([], 3) == 0


def test_soft_refine():
    ar = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(soft_refine(ar, 0.5), [0.5, -1.0, 0.25])
    np.testing.assert_array_equal(soft_refine(Tensor(ar), 0.0).data, np.zeros(3))
    with pytest.raises(ValueError):
        soft_refine(ar, 1.5)


def test_soft_refinement_is_affine_in_coding_space():
    rng = np.random.default_rng(0)
    anchors = np.column_stack([rng.uniform(0, 64, 50), rng.uniform(0, 64, 50), rng.uniform(8, 40, 50),
                               rng.uniform(8, 40, 50)])
    ar = rng.normal(0, 1, (50, 4))
    es = np.linspace(0, 1, 9)
    coded = np.stack([encode(decode(soft_refine(ar, e), anchors), anchors) for e in es])
    for i, e in enumerate(es):
        assert np.max(np.abs(coded[i] - e * ar)) < 1e-12
    # second differences over an even grid vanish for an affine function
    assert np.max(np.abs(coded[2:] - 2 * coded[1:-1] + coded[:-2])) < 1e-12
    centers = np.stack([decode(soft_refine(ar, e), anchors)[:, :2] for e in es])
    assert np.max(np.abs(centers[2:] - 2 * centers[1:-1] + centers[:-2])) < 1e-12


def test_call_counts_and_key_frames():
    model = _model()
    r = stream_detect(model, _video(7), KeyFrameSchedule(3), POST)
    assert r.rg_calls == 3 and r.rd_calls == 7 and r.key_frames == [0, 3, 6]
    assert len(r.detections) == 7
    assert r.forward_seconds > 0


@pytest.mark.parametrize("variant", ["trnet", "tdrnet"])
def test_k1_streaming_equals_paired_inference(variant):
    model = _model(variant)
    v = _video(5)
    a = stream_detect(model, v, KeyFrameSchedule(1, 1.0), POST).detections
    b = paired_detect(model, v.frames, POST)
    assert sum(len(f) for f in a) > 0
    assert _same(a, b)


@pytest.mark.parametrize("k", [1, 2, 3, 8])
def test_streaming_is_causal(k):
    model = _model()
    v = _video(8)
    base = stream_detect(model, v, KeyFrameSchedule(k, 0.75), POST).detections
    rng = np.random.default_rng(k)
    for m in (0, 2, 5):
        changed = v.frames.copy()
        changed[m + 1:] = rng.random(changed[m + 1:].shape)
        other = stream_detect(model, changed, KeyFrameSchedule(k, 0.75), POST).detections
        assert _same(base[: m + 1], other[: m + 1])


def test_reused_state_comes_from_the_key_frame():
    model = _model()
    v = _video(4)
    r = stream_detect(model, v, KeyFrameSchedule(4, 0.6), POST)
    state = make_state(model, v.frames[0], 0.6)
    det = forward_rd(model, Tensor(v.frames[3][None]), state)
    assert _same([r.detections[3]], [detect_batch(det, 0.2, first_frame=3)[0]])


def test_zero_soft_coefficient_on_trnet_is_the_plain_detector():
    model = _model("trnet")
    v = _video(3)
    r = stream_detect(model, v, KeyFrameSchedule(1, 0.0), POST)
    plain = [detect_batch(forward_rd(model, Tensor(f[None]), zero_state(model)), 0.2, first_frame=m)[0]
             for m, f in enumerate(v.frames)]
    assert _same(r.detections, plain)


def test_soft_on_key_flag_only_changes_propagated_frames():
    model = _model()
    v = _video(4)
    sched = KeyFrameSchedule(2, 0.5)
    hard = stream_detect(model, v, sched, POST, soft_on_key=False).detections
    full = stream_detect(model, v, KeyFrameSchedule(2, 1.0), POST).detections
    soft = stream_detect(model, v, sched, POST).detections
    assert _same([hard[0], hard[2]], [full[0], full[2]])
    assert _same([hard[1], hard[3]], [soft[1], soft[3]])


def test_offsets_from_scaled_state():
    model = _model()
    frame = _video(1).frames[0]
    a = make_state(model, frame, 1.0, offsets_from_scaled=True)
    b = make_state(model, frame, 1.0)
    assert all(x.data.tobytes() == y.data.tobytes() for la, lb in zip(a.dp, b.dp) for x, y in zip(la, lb))
    c = make_state(model, frame, 0.5, offsets_from_scaled=True)
    d = make_state(model, frame, 0.5)
    assert any(not np.array_equal(x.data, y.data) for la, lb in zip(c.dp, d.dp) for x, y in zip(la, lb))
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(c.ar, d.ar))


def test_lockstep_batches_match_single_streams():
    model = _model()
    videos = [_video(6, i) for i in range(3)] + [_video(4, 9)]
    sched = KeyFrameSchedule(4, 0.75)
    per_clip, rg, rd, _ = stream_many(model, videos, sched, POST)
    assert rg == rg_call_count([6, 6, 6, 4], 4) and rd == 22
    offset = 0
    for v, got in zip(videos, per_clip):
        ref = stream_detect(model, v, sched, POST, frame_offset=offset).detections
        assert [[d.frame for d in f] for f in got] == [[d.frame for d in f] for f in ref]
        for fa, fb in zip(got, ref):
            assert len(fa) == len(fb)
            for x, y in zip(fa, fb):
                assert x.cls == y.cls
                assert np.allclose([x.score, x.cx, x.cy, x.w, x.h], [y.score, y.cx, y.cy, y.w, y.h],
                                   rtol=0, atol=1e-12)
        offset += len(v)


def test_empty_video():
    r = stream_detect(_model(), np.zeros((0, 1, 16, 16)), KeyFrameSchedule(2))
    assert r.detections == [] and r.rg_calls == 0


def test_sweep_rows_and_exports(tmp_path):
    model = _model("trnet")
    videos = [_video(4, i) for i in range(2)]
    rows = sweep(model, videos, [1, 2, 4], [1.0, 0.5], POST)
    assert [(r.k, r.e) for r in rows] == [(1, 1.0), (2, 1.0), (4, 1.0), (1, 0.5), (2, 0.5), (4, 0.5)]
    assert [r.rg_calls for r in rows[:3]] == [8, 4, 2]
    assert all(r.rd_calls == 8 and r.ms_per_frame > 0 for r in rows)
    write_sweep_csv(tmp_path / "s.csv", rows)
    table = list(csv.reader(open(tmp_path / "s.csv")))
    assert table[0] == ["k", "e", "mAP", "rg_calls", "rd_calls", "ms_per_frame"] and len(table) == 7
    write_sweep_svg(tmp_path / "s.svg", rows)
    assert "e=0.5" in (tmp_path / "s.svg").read_text()


def test_sweep_without_timing_is_reproducible(tmp_path):
    model = _model("trnet")
    videos = [_video(3, i) for i in range(2)]
    for name in ("a", "b"):
        write_sweep_csv(tmp_path / f"{name}.csv", sweep(model, videos, [1, 2], [1.0], POST, timing=False))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    row = list(csv.DictReader(open(tmp_path / "a.csv")))[0]
    assert math.isnan(float(row["ms_per_frame"]))
