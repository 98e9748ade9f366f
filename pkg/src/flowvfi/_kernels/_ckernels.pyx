# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled window-attention and bilinear-warp kernels.

Same contracts as ``_fallback``. Loops run in a fixed order so results are
deterministic run to run.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, floor

cnp.import_array()


def window_attn_forward(const double[:, :, :, :, ::1] q,
                        const double[:, :, :, :, ::1] k,
                        const double[:, :, :, :, ::1] v,
                        const cnp.int64_t[:, :, :, ::1] row0,
                        const cnp.int64_t[:, :, :, ::1] col0,
                        int L):
    cdef Py_ssize_t N = q.shape[0], Hd = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t H = q.shape[3], W = q.shape[4], T = L * L
    out_arr = np.zeros((N, Hd, D, H, W), dtype=np.float64)
    p_arr = np.empty((N, Hd, H, W, T), dtype=np.float64)
    cdef double[:, :, :, :, ::1] out = out_arr
    cdef double[:, :, :, :, ::1] p = p_arr
    cdef double scale = 1.0 / sqrt(<double>D)
    cdef Py_ssize_t n, h, i, j, a, b, c, t, r, cc
    cdef double s, mx, tot
    for n in range(N):
        for h in range(Hd):
            for i in range(H):
                for j in range(W):
                    mx = -1e300
                    for a in range(L):
                        r = row0[n, h, i, j] + a
                        for b in range(L):
                            cc = col0[n, h, i, j] + b
                            s = 0.0
                            for c in range(D):
                                s += q[n, h, c, i, j] * k[n, h, c, r, cc]
                            s *= scale
                            p[n, h, i, j, a * L + b] = s
                            if s > mx:
                                mx = s
                    tot = 0.0
                    for t in range(T):
                        s = exp(p[n, h, i, j, t] - mx)
                        p[n, h, i, j, t] = s
                        tot += s
                    for t in range(T):
                        p[n, h, i, j, t] /= tot
                    for a in range(L):
                        r = row0[n, h, i, j] + a
                        for b in range(L):
                            cc = col0[n, h, i, j] + b
                            s = p[n, h, i, j, a * L + b]
                            for c in range(D):
                                out[n, h, c, i, j] += s * v[n, h, c, r, cc]
    return out_arr, p_arr


def window_attn_backward(const double[:, :, :, :, ::1] q,
                         const double[:, :, :, :, ::1] k,
                         const double[:, :, :, :, ::1] v,
                         const double[:, :, :, :, ::1] probs,
                         const cnp.int64_t[:, :, :, ::1] row0,
                         const cnp.int64_t[:, :, :, ::1] col0,
                         int L,
                         const double[:, :, :, :, ::1] gout):
    cdef Py_ssize_t N = q.shape[0], Hd = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t H = q.shape[3], W = q.shape[4], T = L * L
    dq_arr = np.zeros((N, Hd, D, H, W), dtype=np.float64)
    dk_arr = np.zeros((N, Hd, D, H, W), dtype=np.float64)
    dv_arr = np.zeros((N, Hd, D, H, W), dtype=np.float64)
    dp_arr = np.empty(T, dtype=np.float64)
    cdef double[:, :, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, :, ::1] dk = dk_arr
    cdef double[:, :, :, :, ::1] dv = dv_arr
    cdef double[::1] dp = dp_arr
    cdef double scale = 1.0 / sqrt(<double>D)
    cdef Py_ssize_t n, h, i, j, a, b, c, t, r, cc
    cdef double s, pt, dot, ds
    for n in range(N):
        for h in range(Hd):
            for i in range(H):
                for j in range(W):
                    dot = 0.0
                    for a in range(L):
                        r = row0[n, h, i, j] + a
                        for b in range(L):
                            cc = col0[n, h, i, j] + b
                            t = a * L + b
                            pt = probs[n, h, i, j, t]
                            s = 0.0
                            for c in range(D):
                                s += gout[n, h, c, i, j] * v[n, h, c, r, cc]
                                dv[n, h, c, r, cc] += pt * gout[n, h, c, i, j]
                            dp[t] = s
                            dot += pt * s
                    for a in range(L):
                        r = row0[n, h, i, j] + a
                        for b in range(L):
                            cc = col0[n, h, i, j] + b
                            t = a * L + b
                            ds = probs[n, h, i, j, t] * (dp[t] - dot) * scale
                            for c in range(D):
                                dq[n, h, c, i, j] += ds * k[n, h, c, r, cc]
                                dk[n, h, c, r, cc] += ds * q[n, h, c, i, j]
    return dq_arr, dk_arr, dv_arr


cdef inline double _clip(double v, double lo, double hi) nogil:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


def warp_forward(const double[:, :, :, ::1] frame, const double[:, :, :, ::1] flow):
    cdef Py_ssize_t N = frame.shape[0], C = frame.shape[1], H = frame.shape[2], W = frame.shape[3]
    out_arr = np.empty((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, y0, y1, x0, x1
    cdef double y, x, wy, wx
    for n in range(N):
        for i in range(H):
            for j in range(W):
                y = _clip(i + flow[n, 0, i, j], 0.0, H - 1.0)
                x = _clip(j + flow[n, 1, i, j], 0.0, W - 1.0)
                y0 = <Py_ssize_t>floor(y)
                x0 = <Py_ssize_t>floor(x)
                y1 = y0 + 1 if y0 + 1 < H else H - 1
                x1 = x0 + 1 if x0 + 1 < W else W - 1
                wy = y - y0
                wx = x - x0
                for c in range(C):
                    out[n, c, i, j] = ((1.0 - wy) * ((1.0 - wx) * frame[n, c, y0, x0] + wx * frame[n, c, y0, x1])
                                       + wy * ((1.0 - wx) * frame[n, c, y1, x0] + wx * frame[n, c, y1, x1]))
    return out_arr


def warp_backward(const double[:, :, :, ::1] frame, const double[:, :, :, ::1] flow,
                  const double[:, :, :, ::1] gout):
    cdef Py_ssize_t N = frame.shape[0], C = frame.shape[1], H = frame.shape[2], W = frame.shape[3]
    gframe_arr = np.zeros((N, C, H, W), dtype=np.float64)
    gflow_arr = np.zeros((N, 2, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gframe = gframe_arr
    cdef double[:, :, :, ::1] gflow = gflow_arr
    cdef Py_ssize_t n, c, i, j, y0, y1, x0, x1
    cdef double ry, rx, y, x, wy, wx, g, fa, fb, fc, fd, sy, sx
    cdef bint iny, inx
    for n in range(N):
        for i in range(H):
            for j in range(W):
                ry = i + flow[n, 0, i, j]
                rx = j + flow[n, 1, i, j]
                iny = ry >= 0.0 and ry <= H - 1.0
                inx = rx >= 0.0 and rx <= W - 1.0
                y = _clip(ry, 0.0, H - 1.0)
                x = _clip(rx, 0.0, W - 1.0)
                y0 = <Py_ssize_t>floor(y)
                x0 = <Py_ssize_t>floor(x)
                y1 = y0 + 1 if y0 + 1 < H else H - 1
                x1 = x0 + 1 if x0 + 1 < W else W - 1
                wy = y - y0
                wx = x - x0
                sy = 0.0
                sx = 0.0
                for c in range(C):
                    g = gout[n, c, i, j]
                    fa = frame[n, c, y0, x0]
                    fb = frame[n, c, y0, x1]
                    fc = frame[n, c, y1, x0]
                    fd = frame[n, c, y1, x1]
                    sy += g * ((1.0 - wx) * (fc - fa) + wx * (fd - fb))
                    sx += g * ((1.0 - wy) * (fb - fa) + wy * (fd - fc))
                    gframe[n, c, y0, x0] += g * (1.0 - wy) * (1.0 - wx)
                    gframe[n, c, y0, x1] += g * (1.0 - wy) * wx
                    gframe[n, c, y1, x0] += g * wy * (1.0 - wx)
                    gframe[n, c, y1, x1] += g * wy * wx
                gflow[n, 0, i, j] = sy if iny else 0.0
                gflow[n, 1, i, j] = sx if inx else 0.0
    return gframe_arr, gflow_arr
