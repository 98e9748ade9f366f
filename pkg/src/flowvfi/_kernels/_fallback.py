"""Pure-numpy reference kernels.

Used when the compiled extension is unavailable or when
``FLOWVFI_PURE_PYTHON=1`` is set. Signatures match ``_ckernels``.

Window attention layout: ``q, k, v`` are ``[N, heads, d, H, W]``; ``row0`` and
``col0`` are ``[N, heads, H, W]`` int64 top-left corners of each query's
``L x L`` key/value window.
"""

from __future__ import annotations

import numpy as np


def _window_index(row0, col0, L, W):
    off_r = np.repeat(np.arange(L), L)
    off_c = np.tile(np.arange(L), L)
    return (row0[..., None] + off_r) * W + (col0[..., None] + off_c)


def _gather(x, idx):
    # x: [N, h, d, H, W]; idx: [N, h, H, W, T] -> [N, h, H, W, T, d]
    n, h, d = x.shape[:3]
    flat = x.reshape(n, h, d, -1).transpose(0, 1, 3, 2)
    ni = np.arange(n)[:, None, None, None, None]
    hi = np.arange(h)[None, :, None, None, None]
    return flat[ni, hi, idx]


def _scatter(vals, idx, shape):
    # inverse of _gather: vals [N, h, H, W, T, d] accumulated into [N, h, d, H, W]
    n, h, d, H, W = shape
    base = (np.arange(n)[:, None] * h + np.arange(h)[None, :]) * (H * W)
    flat_idx = (idx + base[:, :, None, None, None]).ravel()
    out = np.empty((d, n * h * H * W))
    for c in range(d):
        out[c] = np.bincount(flat_idx, weights=vals[..., c].ravel(), minlength=n * h * H * W)
    return out.reshape(d, n, h, H, W).transpose(1, 2, 0, 3, 4).copy()


def window_attn_forward(q, k, v, row0, col0, L):
    n, h, d, H, W = q.shape
    idx = _window_index(row0, col0, L, W)
    kw = _gather(k, idx)
    vw = _gather(v, idx)
    qt = q.transpose(0, 1, 3, 4, 2)
    scores = np.einsum("nhijd,nhijtd->nhijt", qt, kw) / np.sqrt(d)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.einsum("nhijt,nhijtd->nhdij", p, vw)
    return np.ascontiguousarray(out), p


def window_attn_backward(q, k, v, probs, row0, col0, L, gout):
    n, h, d, H, W = q.shape
    scale = 1.0 / np.sqrt(d)
    idx = _window_index(row0, col0, L, W)
    kw = _gather(k, idx)
    vw = _gather(v, idx)
    gt = gout.transpose(0, 1, 3, 4, 2)
    qt = q.transpose(0, 1, 3, 4, 2)
    dv = _scatter(probs[..., None] * gt[..., None, :], idx, v.shape)
    dp = np.einsum("nhijd,nhijtd->nhijt", gt, vw)
    ds = probs * (dp - (probs * dp).sum(axis=-1, keepdims=True)) * scale
    dq = np.einsum("nhijt,nhijtd->nhdij", ds, kw)
    dk = _scatter(ds[..., None] * qt[..., None, :], idx, k.shape)
    return np.ascontiguousarray(dq), dk, dv


def _warp_coords(flow, H, W):
    ii = np.arange(H, dtype=np.float64)[:, None]
    jj = np.arange(W, dtype=np.float64)[None, :]
    ry = ii + flow[:, 0]
    rx = jj + flow[:, 1]
    y = np.clip(ry, 0.0, H - 1.0)
    x = np.clip(rx, 0.0, W - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = y - y0
    wx = x - x0
    iny = (ry >= 0.0) & (ry <= H - 1.0)
    inx = (rx >= 0.0) & (rx <= W - 1.0)
    return y0, y1, x0, x1, wy, wx, iny, inx


def _take(frame, yy, xx):
    # frame [N, C, H, W]; yy, xx [N, H, W] -> [N, C, H, W]
    n, c, H, W = frame.shape
    flat = frame.reshape(n, c, H * W)
    idx = (yy * W + xx).reshape(n, 1, H * W)
    return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, H * W)), axis=2).reshape(n, c, H, W)


def warp_forward(frame, flow):
    n, c, H, W = frame.shape
    y0, y1, x0, x1, wy, wx, _, _ = _warp_coords(flow, H, W)
    wy = wy[:, None]
    wx = wx[:, None]
    top = (1.0 - wx) * _take(frame, y0, x0) + wx * _take(frame, y0, x1)
    bot = (1.0 - wx) * _take(frame, y1, x0) + wx * _take(frame, y1, x1)
    return (1.0 - wy) * top + wy * bot


def warp_backward(frame, flow, gout):
    n, c, H, W = frame.shape
    y0, y1, x0, x1, wy, wx, iny, inx = _warp_coords(flow, H, W)
    a = _take(frame, y0, x0)
    b = _take(frame, y0, x1)
    cc = _take(frame, y1, x0)
    dd = _take(frame, y1, x1)
    wy4, wx4 = wy[:, None], wx[:, None]
    gy = (gout * ((1.0 - wx4) * (cc - a) + wx4 * (dd - b))).sum(axis=1) * iny
    gx = (gout * ((1.0 - wy4) * (b - a) + wy4 * (dd - cc))).sum(axis=1) * inx
    gflow = np.stack([gy, gx], axis=1)

    gframe = np.zeros(n * c * H * W)
    base = (np.arange(n * c) * (H * W)).reshape(n, c, 1, 1)
    for yy, xx, wgt in (
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x1, (1.0 - wy) * wx),
        (y1, x0, wy * (1.0 - wx)),
        (y1, x1, wy * wx),
    ):
        idx = (base + (yy * W + xx)[:, None]).ravel()
        gframe += np.bincount(idx, weights=(gout * wgt[:, None]).ravel(), minlength=gframe.size)
    return gframe.reshape(frame.shape), gflow
