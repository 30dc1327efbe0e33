import numpy as np
import pytest

from drnet import autodiff as ad
from drnet.autodiff import Tensor
from drnet.boxes import OffsetCoding, decode, encode, generate_anchors
from drnet.heads import (MultiHeadConfig, PathWeights, anchor_offset_detect, arm_forward,
                         feature_location_refine, flatten_level, level_rows, multi_head_detect,
                         refined_target_residual)

import oracles
from conftest import GRAD_RTOL, grad_check

CODING = OffsetCoding()


def _path(rng, d, a, c, k, scale=0.3, dilation=1):
    return PathWeights(k, dilation,
                       Tensor(rng.standard_normal((4 * a, d, k, k)) * scale),
                       Tensor(rng.standard_normal(4 * a) * scale),
                       Tensor(rng.standard_normal((a * (c + 1), d, k, k)) * scale),
                       Tensor(rng.standard_normal(a * (c + 1)) * scale))


def _zero_path(d, a, c, k):
    return PathWeights(k, 1, Tensor(np.zeros((4 * a, d, k, k))), Tensor(np.zeros(4 * a)),
                       Tensor(np.zeros((a * (c + 1), d, k, k))), Tensor(np.zeros(a * (c + 1))))


def _anchors(h, w, ratios=(1.0, 2.0), stride=4, scale=8.0):
    return generate_anchors([(h, w)], [stride], [scale], list(ratios)).boxes


def test_arm_zero_weights_leave_anchors_unchanged(rng):
    f = [Tensor(rng.standard_normal((1, 3, 4, 4))), Tensor(rng.standard_normal((1, 3, 2, 2)))]
    w = [(Tensor(np.zeros((8, 3, 3, 3))), Tensor(np.zeros(8))) for _ in range(2)]
    ar = arm_forward(f, w)
    assert [t.shape for t in ar] == [(1, 8, 4, 4), (1, 8, 2, 2)]
    anchors = _anchors(4, 4)
    rows = level_rows(ar[0].data, 4)[0]
    np.testing.assert_array_equal(decode(rows, anchors), anchors)


def test_arm_matches_conv_oracle(rng):
    f = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((8, 3, 3, 3))
    b = rng.standard_normal(8)
    ar = arm_forward([Tensor(f)], [(Tensor(w), Tensor(b))])[0]
    assert np.max(np.abs(ar.data - oracles.conv2d(f, w, b, 1, 1, 1))) <= 1e-12


def test_arm_errors(rng):
    f = [Tensor(np.zeros((1, 3, 2, 2)))]
    with pytest.raises(ValueError, match="heads"):
        arm_forward(f, [])
    with pytest.raises(ValueError, match="4\\*A"):
        arm_forward(f, [(Tensor(np.zeros((6, 3, 3, 3))), Tensor(np.zeros(6)))])


def test_location_refine_is_a_pointwise_linear_map(rng):
    ar = rng.standard_normal((1, 8, 3, 3))
    w = rng.standard_normal((18, 8, 1, 1))
    b = rng.standard_normal(18)
    dp = feature_location_refine(Tensor(ar), Tensor(w), Tensor(b)).data
    for i in range(3):
        for j in range(3):
            np.testing.assert_allclose(dp[0, :, i, j], w[:, :, 0, 0] @ ar[0, :, i, j] + b, rtol=0, atol=1e-12)
    zero = feature_location_refine(Tensor(np.zeros_like(ar)), Tensor(w)).data
    assert not zero.any()


def test_location_refine_rejects_wide_kernels():
    with pytest.raises(ValueError, match="1x1"):
        feature_location_refine(Tensor(np.zeros((1, 8, 3, 3))), Tensor(np.zeros((18, 8, 3, 3))))
    with pytest.raises(ValueError, match="input channels"):
        feature_location_refine(Tensor(np.zeros((1, 8, 3, 3))), Tensor(np.zeros((18, 4, 1, 1))))


def test_location_refine_offset_conv_vs_oracle():
    rng = np.random.default_rng(21)
    for _ in range(200):
        a4 = 4 * int(rng.integers(1, 4))
        k2 = 2 * int(rng.choice([1, 9, 25]))
        ar = rng.standard_normal((int(rng.integers(1, 3)), a4, int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        w = rng.standard_normal((k2, a4, 1, 1))
        b = rng.standard_normal(k2)
        got = feature_location_refine(Tensor(ar), Tensor(w), Tensor(b)).data
        assert np.max(np.abs(got - oracles.conv2d(ar, w, b))) <= 1e-10


def _single_cell(a=2, c=2, d=3):
    """1x1 feature map: with zero weights the biases set the per-anchor predictions directly."""
    anchors = np.array([[8.0, 8.0, 10.0, 12.0], [8.0, 8.0, 14.0, 7.0]])[:a]
    f = Tensor(np.ones((1, d, 1, 1)))
    return anchors, f


def test_exact_first_step_needs_no_local_offset():
    anchors, f = _single_cell()
    gt = np.array([[9.0, 7.0, 12.0, 11.0], [6.5, 9.0, 13.0, 9.0]])
    ar = encode(gt, anchors).reshape(1, 8, 1, 1)
    pw = _zero_path(3, 2, 2, 3)
    out = anchor_offset_detect(f, Tensor(ar), None, pw.w_local, pw.b_local, pw.w_conf, pw.b_conf, anchors)
    assert np.max(np.abs(out.boxes[0] - gt)) < 1e-9


def test_two_step_regression_recovers_ground_truth():
    rng = np.random.default_rng(3)
    anchors, f = _single_cell()
    for _ in range(50):
        gt = np.column_stack([rng.uniform(4, 12, 2), rng.uniform(4, 12, 2), rng.uniform(6, 16, 2),
                              rng.uniform(6, 16, 2)])
        ar = rng.normal(0, 1, (2, 4))
        refined = decode(ar, anchors)
        local = encode(gt, refined)
        pw = _zero_path(3, 2, 2, 1)
        pw.b_local = Tensor(local.reshape(-1))
        out = anchor_offset_detect(f, Tensor(ar.reshape(1, 8, 1, 1)), None, pw.w_local, pw.b_local,
                                   pw.w_conf, pw.b_conf, anchors)
        np.testing.assert_allclose(out.reference[0], refined, rtol=0, atol=1e-12)
        assert np.max(np.abs(out.boxes[0] - gt)) < 1e-9


def test_zero_refinement_reduces_to_plain_head(rng):
    anchors = _anchors(3, 4)
    f = Tensor(rng.standard_normal((2, 3, 3, 4)))
    pw = _path(rng, 3, 2, 2, 3)
    ar = Tensor(np.zeros((2, 8, 3, 4)))
    dp = Tensor(np.zeros((2, 18, 3, 4)))
    a = anchor_offset_detect(f, ar, dp, pw.w_local, pw.b_local, pw.w_conf, pw.b_conf, anchors)
    b = multi_head_detect(f, None, [pw], None, anchors, deformable=False)
    assert np.max(np.abs(a.local.data - b.local.data)) <= 1e-12
    assert np.max(np.abs(a.logits.data - b.logits.data)) <= 1e-12
    np.testing.assert_array_equal(a.reference, b.reference)


def _head_oracle(f, paths, dps, a, c):
    """Flattened (local, logits) from loop deform convs summed over paths."""
    loc = conf = 0.0
    for pw, dp in zip(paths, dps):
        w = np.concatenate([pw.w_local.data, pw.w_conf.data])
        b = np.concatenate([pw.b_local.data, pw.b_conf.data])
        out = oracles.deform_conv2d(f, w, b, dp, 1, pw.kernel // 2, 1)
        loc = loc + out[:, :4 * a]
        conf = conf + out[:, 4 * a:]
    n, _, h, w_ = f.shape
    flat = lambda t, k: t.reshape(n, a, k, h, w_).transpose(0, 3, 4, 1, 2).reshape(n, -1, k)  # noqa: E731
    return flat(loc, 4), flat(conf, c + 1)


def test_multi_head_equals_sum_of_paths():
    rng = np.random.default_rng(8)
    a, c, d, h, w = 2, 2, 3, 3, 3
    anchors = _anchors(h, w)
    for _ in range(4):
        f = rng.standard_normal((1, d, h, w))
        paths = [_path(rng, d, a, c, 3), _path(rng, d, a, c, 5)]
        dps = [rng.uniform(-1.5, 1.5, (1, 18, h, w)), rng.uniform(-1.5, 1.5, (1, 50, h, w))]
        out = multi_head_detect(Tensor(f), None, paths, [Tensor(x) for x in dps], anchors)
        loc, conf = _head_oracle(f, paths, dps, a, c)
        assert np.max(np.abs(out.local.data - loc)) <= 1e-12
        assert np.max(np.abs(out.logits.data - conf)) <= 1e-12


def test_zero_second_path_matches_single_path(rng):
    anchors = _anchors(3, 3)
    f = Tensor(rng.standard_normal((1, 3, 3, 3)))
    p1 = _path(rng, 3, 2, 2, 3)
    dp1 = Tensor(rng.uniform(-1, 1, (1, 18, 3, 3)))
    one = multi_head_detect(f, None, [p1], [dp1], anchors)
    two = multi_head_detect(f, None, [p1, _zero_path(3, 2, 2, 5)], [dp1, Tensor(np.zeros((1, 50, 3, 3)))],
                            anchors)
    np.testing.assert_array_equal(one.local.data, two.local.data)
    np.testing.assert_array_equal(one.logits.data, two.logits.data)


def test_multi_head_errors(rng):
    anchors = _anchors(3, 3)
    f = Tensor(rng.standard_normal((1, 3, 3, 3)))
    p = _path(rng, 3, 2, 2, 3)
    with pytest.raises(ValueError, match="offset fields"):
        multi_head_detect(f, None, [p, p], [Tensor(np.zeros((1, 18, 3, 3)))], anchors)
    with pytest.raises(ValueError, match="anchor layout"):
        multi_head_detect(f, None, [p], None, anchors[:-2])
    with pytest.raises(ValueError):
        MultiHeadConfig(paths=((4, 1),))
    with pytest.raises(ValueError):
        MultiHeadConfig(paths=())


def test_flatten_level_order(rng):
    x = rng.standard_normal((1, 2 * 3, 2, 2))
    flat = flatten_level(Tensor(x), 3).data
    # row (i, j, a) holds channels a*3 .. a*3+2 at cell (i, j)
    for i in range(2):
        for j in range(2):
            for a in range(2):
                np.testing.assert_array_equal(flat[0, (i * 2 + j) * 2 + a], x[0, a * 3:(a + 1) * 3, i, j])


def test_grad_refined_target_residual():
    rng = np.random.default_rng(31)
    for _ in range(20):
        p = int(rng.integers(1, 6))
        anchors = np.column_stack([rng.uniform(0, 30, p), rng.uniform(0, 30, p), rng.uniform(5, 20, p),
                                   rng.uniform(5, 20, p)])
        gts = np.column_stack([rng.uniform(0, 30, p), rng.uniform(0, 30, p), rng.uniform(5, 20, p),
                               rng.uniform(5, 20, p)])
        local, ar = rng.standard_normal((p, 4)), rng.standard_normal((p, 4))
        fn = lambda t: refined_target_residual(t[0], t[1], anchors, gts, CODING, True)  # noqa: E731
        assert grad_check(fn, [local, ar], rng) < GRAD_RTOL


def test_stopped_target_sends_no_gradient_to_anchor_offsets(rng):
    anchors = np.array([[5.0, 5.0, 8.0, 8.0]])
    gts = np.array([[6.0, 4.0, 9.0, 7.0]])
    local = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    ar = Tensor(rng.standard_normal((1, 4)), requires_grad=True)
    ad.backward(ad.tsum(refined_target_residual(local, ar, anchors, gts, CODING)))
    assert ar.grad is None or not ar.grad.any()
    np.testing.assert_array_equal(local.grad, np.ones((1, 4)))


def test_grad_reaches_anchor_head_through_sampling_offsets():
    rng = np.random.default_rng(4)
    anchors = _anchors(3, 3)
    f = Tensor(rng.standard_normal((1, 3, 4, 4)))
    w_ar = Tensor(rng.standard_normal((8, 3, 3, 3)) * 0.2, requires_grad=True)
    w_fr = Tensor(rng.standard_normal((18, 8, 1, 1)) * 0.3, requires_grad=True)
    feats = Tensor(rng.standard_normal((1, 3, 3, 3)))
    ar = arm_forward([Tensor(f.data[:, :, :3, :3])], [(w_ar, None)])[0]
    dp = feature_location_refine(ar, w_fr)
    pw = _path(rng, 3, 2, 2, 3)
    out = anchor_offset_detect(feats, ar, dp, pw.w_local, pw.b_local, pw.w_conf, pw.b_conf, anchors)
    ad.backward(ad.tsum(ad.mul(out.local, out.local)))
    assert w_fr.grad is not None and np.abs(w_fr.grad).max() > 0
    assert w_ar.grad is not None and np.abs(w_ar.grad).max() > 0


def test_grad_multi_head_inputs():
    rng = np.random.default_rng(41)
    anchors = _anchors(2, 2, ratios=(1.0,))
    for _ in range(20):
        f = rng.standard_normal((1, 2, 2, 2))
        k = int(rng.choice([1, 3]))
        wl, bl = rng.standard_normal((4, 2, k, k)), rng.standard_normal(4)
        wc, bc = rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)
        whole = rng.integers(-1, 1, size=(1, 2 * k * k, 2, 2))
        dp = whole + rng.uniform(0.05, 0.95, size=whole.shape)

        def fn(t):
            out = anchor_offset_detect(t[0], None, t[1], t[2], t[3], t[4], t[5], anchors)
            return ad.concat([ad.reshape(out.local, (-1,)), ad.reshape(out.logits, (-1,))], axis=0)

        assert grad_check(fn, [f, dp, wl, bl, wc, bc], rng) < GRAD_RTOL
