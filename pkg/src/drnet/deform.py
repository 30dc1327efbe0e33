"""Bilinear feature sampling and deformable 2-D convolution.

Offsets are a tensor [N, 2*kh*kw, H', W'] in feature-map cells. Channel
``2k`` holds the row shift and ``2k+1`` the column shift of tap ``k``; taps
are numbered row-major over the kernel grid. Samples outside the map read
zero, so a zero offset field reduces exactly to :func:`conv2d`.
"""

from __future__ import annotations

import csv
from typing import Optional

import numpy as np
from scipy import sparse

from .autodiff import Tensor, _check_finite, conv2d, conv_output_size, make_op


def bilinear_sample(feature, y: float, x: float) -> np.ndarray:
    """Bilinear read of ``feature`` [N, C, H, W] at (y, x); returns [N, C]."""
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    _, _, h, w = f.shape
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    ly, lx = y - y0, x - x0
    out = np.zeros(f.shape[:2])
    for yy, xx, wt in ((y0, x0, (1 - ly) * (1 - lx)), (y0, x0 + 1, (1 - ly) * lx),
                       (y0 + 1, x0, ly * (1 - lx)), (y0 + 1, x0 + 1, ly * lx)):
        if 0 <= yy < h and 0 <= xx < w and wt != 0.0:
            out += wt * f[:, :, yy, xx]
    return out


def tap_grid(kh: int, kw: int, ho: int, wo: int, stride: int, padding: int, dilation: int):
    """Regular sampling positions (rows, cols), each [Ho*Wo, K]."""
    ki, kj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    rows = oy.reshape(-1, 1) * stride - padding + ki.reshape(1, -1) * dilation
    cols = ox.reshape(-1, 1) * stride - padding + kj.reshape(1, -1) * dilation
    return rows.astype(np.float64), cols.astype(np.float64)


def _interp_matrices(offsets: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int,
                     padding: int, dilation: int, with_derivatives: bool):
    """Sparse bilinear interpolation operators.

    Row ``(n, p, k)`` of the returned [N*P*K, N*H*W] matrix holds the four
    corner weights of tap ``k`` at output cell ``p`` of image ``n``, so that
    ``S @ x`` (x as [N*H*W, C]) gives every sample. With derivatives, the
    matrices of d(weight)/dy and d(weight)/dx on the same pattern follow.
    """
    n, _, ho, wo = offsets.shape
    k = kh * kw
    p = ho * wo
    rows, cols = tap_grid(kh, kw, ho, wo, stride, padding, dilation)
    off = offsets.reshape(n, k, 2, p)
    y = rows[None] + off[:, :, 0].transpose(0, 2, 1)  # [N, P, K]
    x = cols[None] + off[:, :, 1].transpose(0, 2, 1)
    y0 = np.floor(y)
    x0 = np.floor(x)
    ly, lx = (y - y0).ravel(), (x - x0).ravel()
    y0 = y0.astype(np.int64).ravel()
    x0 = x0.astype(np.int64).ravel()
    img = np.repeat(np.arange(n, dtype=np.int64) * (h * w), p * k)
    hy, hx = 1.0 - ly, 1.0 - lx
    corners = ((0, 0, hy * hx, -hx, -hy), (0, 1, hy * lx, -lx, hy),
               (1, 0, ly * hx, hx, -ly), (1, 1, ly * lx, lx, ly))
    m = n * p * k
    col_idx = np.empty((m, 4), dtype=np.int64)
    vals = np.empty((m, 4))
    dyv = np.empty((m, 4)) if with_derivatives else None
    dxv = np.empty((m, 4)) if with_derivatives else None
    for q, (dy, dx, wt, wdy, wdx) in enumerate(corners):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        col_idx[:, q] = img + np.where(ok, yy * w + xx, 0)
        vals[:, q] = np.where(ok, wt, 0.0)
        if with_derivatives:
            dyv[:, q] = np.where(ok, wdy, 0.0)
            dxv[:, q] = np.where(ok, wdx, 0.0)
    indptr = np.arange(0, 4 * m + 1, 4, dtype=np.int64)
    shape = (m, n * h * w)
    ci = col_idx.ravel()
    mats = [sparse.csr_matrix((vals.ravel(), ci, indptr), shape=shape)]
    if with_derivatives:
        mats.append(sparse.csr_matrix((dyv.ravel(), ci, indptr), shape=shape))
        mats.append(sparse.csr_matrix((dxv.ravel(), ci, indptr), shape=shape))
    return mats


def deform_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], offsets: Tensor,
                  stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Convolution whose taps read ``x`` at regular grid position + offset.

    Differentiable w.r.t. ``x``, ``weight``, ``bias`` and ``offsets``.
    """
    if x.ndim != 4 or weight.ndim != 4 or offsets.ndim != 4:
        raise ValueError("deform_conv2d expects 4-D input, weight and offsets")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"deform_conv2d: input has {c} channels, weight expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"deform_conv2d: bias shape {bias.shape} != ({co},)")
    k = kh * kw
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if offsets.shape[1] != 2 * k:
        raise ValueError(f"deform_conv2d: offsets need {2 * k} channels, got {offsets.shape[1]}")
    if offsets.shape != (n, 2 * k, ho, wo):
        raise ValueError(f"deform_conv2d: offsets shape {offsets.shape} != {(n, 2 * k, ho, wo)}")
    _check_finite(x.data, "deform_conv2d input")
    _check_finite(offsets.data, "deform_conv2d offsets")

    p = ho * wo
    need_doff = offsets.requires_grad
    mats = _interp_matrices(offsets.data, h, w, kh, kw, stride, padding, dilation, need_doff)
    xr = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    cols = mats[0] @ xr  # [N*P*K, C]
    # weight as [Co, K*C] to match the (tap, channel) column order
    wk = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(co, k * c)
    cols2 = cols.reshape(n * p, k * c)
    out = cols2 @ wk.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * p, co)
        gx = gw = gb = goff = None
        if weight.requires_grad:
            gw = (g2.T @ cols2).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad or offsets.requires_grad:
            gcols = (g2 @ wk).reshape(n * p * k, c)
        if x.requires_grad:
            gx = (mats[0].T @ gcols).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if offsets.requires_grad:
            gy = np.einsum("mc,mc->m", gcols, mats[1] @ xr).reshape(n, p, k)
            gxo = np.einsum("mc,mc->m", gcols, mats[2] @ xr).reshape(n, p, k)
            goff = np.stack([gy, gxo], axis=3).transpose(0, 2, 3, 1).reshape(offsets.shape)
        return gx, gw, goff, gb

    if bias is None:
        return make_op(out, (x, weight, offsets), lambda g: bw(g)[:3], "deform_conv2d")
    return make_op(out, (x, weight, offsets, bias), bw, "deform_conv2d")


def offsets_from_features(features: Tensor, w_fr: Tensor, b_fr: Optional[Tensor] = None,
                          kernel: int = 3) -> Tensor:
    """Sampling offsets predicted from the detection features themselves.

    ``w_fr`` must emit ``2 * kernel**2`` channels; spatial size is preserved.
    """
    if w_fr.shape[0] != 2 * kernel * kernel:
        raise ValueError(f"offset conv must emit {2 * kernel * kernel} channels, got {w_fr.shape[0]}")
    kh = w_fr.shape[2]
    return conv2d(features, w_fr, b_fr, stride=1, padding=kh // 2)


def sampling_centers(offsets: np.ndarray, kernel: int, dilation: int = 1) -> tuple:
    """Regular and shifted positions of the central tap, in feature cells.

    Returns ``(rows, cols, rows_refined, cols_refined)``, each [N, H, W].
    """
    n, _, h, w = offsets.shape
    center = (kernel * kernel) // 2
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    rows = np.broadcast_to(rows, (n, h, w))
    cols = np.broadcast_to(cols, (n, h, w))
    return rows, cols, rows + offsets[:, 2 * center], cols + offsets[:, 2 * center + 1]


def export_sampling_centers(path, level_offsets: list, strides: list, kernel: int,
                            image_index: int = 0) -> int:
    """Write one CSV row per feature cell with original and refined centers in pixels."""
    count = 0
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["level", "row", "col", "x", "y", "x_refined", "y_refined"])
        for level, (off, stride) in enumerate(zip(level_offsets, strides)):
            r, c, rr, cr = sampling_centers(np.asarray(off), kernel)
            _, h, w = r.shape
            for i in range(h):
                for j in range(w):
                    out.writerow([level, i, j,
                                  f"{(c[image_index, i, j] + 0.5) * stride:.6f}",
                                  f"{(r[image_index, i, j] + 0.5) * stride:.6f}",
                                  f"{(cr[image_index, i, j] + 0.5) * stride:.6f}",
                                  f"{(rr[image_index, i, j] + 0.5) * stride:.6f}"])
                    count += 1
    return count
