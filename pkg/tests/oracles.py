"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package's numerics: each function restates its
operation directly from the definition.
"""

import math

import numpy as np


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def locate(i, j, dy, dx, H, W, L):
    """Window corner for query (i, j): round, clamp the centre, slide inside."""
    ci = min(max(round_half_away(i + dy), 0), H - 1)
    cj = min(max(round_half_away(j + dx), 0), W - 1)
    half = L // 2
    r0 = min(max(ci - half, 0), H - L)
    c0 = min(max(cj - half, 0), W - L)
    return r0, c0, (ci, cj)


def conv2d(x, w, b=None, stride=1, pad=0):
    n, c, H, W = x.shape
    co, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, Ho, Wo))
    for bi in range(n):
        for o in range(co):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for ci in range(c):
                        for a in range(k):
                            for d in range(k):
                                y = i * stride + a - pad
                                z = j * stride + d - pad
                                if 0 <= y < H and 0 <= z < W:
                                    s += x[bi, ci, y, z] * w[o, ci, a, d]
                    out[bi, o, i, j] = s + (0.0 if b is None else b[o])
    return out


def conv_transpose2d(x, w, b=None, stride=2):
    """Scatter-accumulate: each input pixel paints ``w[ci, :, :, :] * x`` at ``stride`` spacing."""
    n, ci_, H, W = x.shape
    _, co, k, _ = w.shape
    out = np.zeros((n, co, (H - 1) * stride + k, (W - 1) * stride + k))
    for bi in range(n):
        for ci in range(ci_):
            for i in range(H):
                for j in range(W):
                    out[bi, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[bi, ci, i, j] * w[ci]
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out


def bilinear_sample(img, y, x):
    """Sample ``img[C, H, W]`` at real coordinates clamped to the border."""
    _, H, W = img.shape
    y = min(max(y, 0.0), H - 1.0)
    x = min(max(x, 0.0), W - 1.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
    wy, wx = y - y0, x - x0
    return ((1 - wy) * (1 - wx) * img[:, y0, x0] + (1 - wy) * wx * img[:, y0, x1]
            + wy * (1 - wx) * img[:, y1, x0] + wy * wx * img[:, y1, x1])


def backward_warp(frame, flow):
    n, c, H, W = frame.shape
    out = np.zeros_like(frame)
    for bi in range(n):
        for i in range(H):
            for j in range(W):
                out[bi, :, i, j] = bilinear_sample(frame[bi], i + flow[bi, 0, i, j], j + flow[bi, 1, i, j])
    return out


def _proj(x_vec, weight, bias):
    return x_vec @ weight + bias


def flow_attention(x, flows, heads, L, wq, bq, wk, bk, wv, bv, wo, bo):
    """Per-pixel attention that materialises each window explicitly.

    ``x`` is [N, C, H, W]; ``flows`` a list of [N, 2, H, W] fields, heads split
    evenly across them in order; projections are ``y = x @ W + b``.
    """
    n, C, H, W = x.shape
    dk = C // heads
    per = heads // len(flows)
    out = np.zeros_like(x)
    for bi in range(n):
        tok = x[bi].transpose(1, 2, 0)  # H, W, C
        q = _proj(tok, wq, bq)
        k = _proj(tok, wk, bk)
        v = _proj(tok, wv, bv)
        for i in range(H):
            for j in range(W):
                heads_out = []
                for h in range(heads):
                    f = flows[h // per][bi]
                    r0, c0, _ = locate(i, j, f[0, i, j], f[1, i, j], H, W, L)
                    sl = slice(h * dk, (h + 1) * dk)
                    keys = [k[r0 + a, c0 + d, sl] for a in range(L) for d in range(L)]
                    vals = [v[r0 + a, c0 + d, sl] for a in range(L) for d in range(L)]
                    scores = np.array([q[i, j, sl] @ kk for kk in keys]) / math.sqrt(dk)
                    e = np.exp(scores - scores.max())
                    p = e / e.sum()
                    heads_out.append(sum(pi * vv for pi, vv in zip(p, vals)))
                out[bi, :, i, j] = _proj(np.concatenate(heads_out), wo, bo)
    return out


def conv_replace(x, flows, L, weight, bias):
    """Gather each located window (channel groups follow the flows) and apply a shared filter."""
    n, C, H, W = x.shape
    co = weight.shape[0]
    per = C // len(flows)
    out = np.zeros((n, co, H, W))
    for bi in range(n):
        for i in range(H):
            for j in range(W):
                patch = np.zeros((C, L * L))
                for c in range(C):
                    f = flows[c // per][bi]
                    r0, c0, _ = locate(i, j, f[0, i, j], f[1, i, j], H, W, L)
                    patch[c] = x[bi, c, r0:r0 + L, c0:c0 + L].ravel()
                out[bi, :, i, j] = np.tensordot(weight, patch, axes=([1, 2], [0, 1])) + bias
    return out


def ssim_constant(a: float, b: float, k1: float = 0.01, k2: float = 0.03) -> float:
    """SSIM of two constant images: only the luminance term survives."""
    c1, c2 = k1 ** 2, k2 ** 2
    return (2 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2)


def ssim_map_direct(x, y, sigma=1.5, radius=5, k1=0.01, k2=0.03):
    """Windowed SSIM for 2-D arrays, one explicit weighted window per pixel.

    Borders mirror the edge sample (``d c b a | a b c d``).
    """
    t = np.arange(-radius, radius + 1)
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    xp = np.pad(x, radius, mode="symmetric")
    yp = np.pad(y, radius, mode="symmetric")
    c1, c2 = k1 ** 2, k2 ** 2
    out = np.zeros(x.shape)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a = xp[i:i + 2 * radius + 1, j:j + 2 * radius + 1]
            b = yp[i:i + 2 * radius + 1, j:j + 2 * radius + 1]
            ma, mb = (g * a).sum(), (g * b).sum()
            va = (g * a * a).sum() - ma * ma
            vb = (g * b * b).sum() - mb * mb
            cov = (g * a * b).sum() - ma * mb
            out[i, j] = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return out


def central_diff(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f()
        x[idx] = orig - eps
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g
