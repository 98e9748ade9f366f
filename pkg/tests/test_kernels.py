import os
import subprocess
import sys

import numpy as np
import pytest

from flowvfi import _kernels
from flowvfi.pipeline import backward_warp
from flowvfi.tensor import Tensor
import oracles

BACKENDS = _kernels.available_backends()


def softmax(s):
    e = np.exp(s - s.max())
    return e / e.sum()


def window_inputs(rng, n=2, h=2, d=3, H=7, W=6, L=3):
    q, k, v = (rng.standard_normal((n, h, d, H, W)) for _ in range(3))
    row0 = rng.integers(0, H - L + 1, size=(n, h, H, W))
    col0 = rng.integers(0, W - L + 1, size=(n, h, H, W))
    return q, k, v, row0, col0, L


def test_fallback_always_available():
    assert "python" in BACKENDS
    assert _kernels.BACKEND in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_window_forward_matches_loops(rng, name):
    q, k, v, row0, col0, L = window_inputs(rng)
    out, probs = _kernels.window_attn_forward(q, k, v, row0, col0, L, impl=BACKENDS[name])
    n, h, d, H, W = q.shape
    for b in range(n):
        for m in range(h):
            for i in range(H):
                for j in range(W):
                    r, c = row0[b, m, i, j], col0[b, m, i, j]
                    keys = k[b, m, :, r:r + L, c:c + L].reshape(d, -1)
                    vals = v[b, m, :, r:r + L, c:c + L].reshape(d, -1)
                    p = softmax(q[b, m, :, i, j] @ keys / np.sqrt(d))
                    np.testing.assert_allclose(probs[b, m, i, j], p, atol=1e-13)
                    np.testing.assert_allclose(out[b, m, :, i, j], vals @ p, atol=1e-13)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_backends_agree(rng):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    q, k, v, row0, col0, L = window_inputs(rng)
    fp = _kernels.window_attn_forward(q, k, v, row0, col0, L, impl=py)
    fc = _kernels.window_attn_forward(q, k, v, row0, col0, L, impl=cy)
    for a, b in zip(fp, fc):
        np.testing.assert_allclose(a, b, atol=1e-12)
    g = rng.standard_normal(fp[0].shape)
    bp = _kernels.window_attn_backward(q, k, v, fp[1], row0, col0, L, g, impl=py)
    bc = _kernels.window_attn_backward(q, k, v, fc[1], row0, col0, L, g, impl=cy)
    for a, b in zip(bp, bc):
        np.testing.assert_allclose(a, b, atol=1e-12)
    frame = rng.uniform(size=(2, 3, 9, 8))
    flow = rng.uniform(-5, 5, size=(2, 2, 9, 8))
    np.testing.assert_allclose(_kernels.warp_forward(frame, flow, impl=py), _kernels.warp_forward(frame, flow, impl=cy),
                               atol=1e-13)
    gw = rng.standard_normal(frame.shape)
    for a, b in zip(_kernels.warp_backward(frame, flow, gw, impl=py), _kernels.warp_backward(frame, flow, gw, impl=cy)):
        np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_warp_backends_match_oracle(rng, name):
    frame = rng.uniform(size=(1, 2, 6, 7))
    flow = rng.uniform(-4, 4, size=(1, 2, 6, 7))
    np.testing.assert_allclose(_kernels.warp_forward(frame, flow, impl=BACKENDS[name]),
                               oracles.backward_warp(frame, flow), atol=1e-13)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_window_backward_adjoint(rng, name):
    # <gout, d out> equals <dq, delta q> + <dk, delta k> + <dv, delta v> to first order
    impl = BACKENDS[name]
    q, k, v, row0, col0, L = window_inputs(rng, n=1, h=1, H=5, W=5)
    out, probs = _kernels.window_attn_forward(q, k, v, row0, col0, L, impl=impl)
    g = rng.standard_normal(out.shape)
    dq, dk, dv = _kernels.window_attn_backward(q, k, v, probs, row0, col0, L, g, impl=impl)
    eps = 1e-6
    dirs = [rng.standard_normal(q.shape) for _ in range(3)]
    plus = _kernels.window_attn_forward(*(a + eps * t for a, t in zip((q, k, v), dirs)), row0, col0, L, impl=impl)[0]
    minus = _kernels.window_attn_forward(*(a - eps * t for a, t in zip((q, k, v), dirs)), row0, col0, L, impl=impl)[0]
    num = np.sum(g * (plus - minus)) / (2 * eps)
    ana = sum(np.sum(a * t) for a, t in zip((dq, dk, dv), dirs))
    assert abs(num - ana) < 1e-7 * max(1.0, abs(ana))


def test_forced_fallback_subprocess():
    code = ("from flowvfi import _kernels; from flowvfi.pipeline import backward_warp; "
            "print(_kernels.BACKEND)")
    env = {**os.environ, "FLOWVFI_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_active_backend_used_by_warp(rng):
    frame = rng.uniform(size=(1, 3, 5, 5))
    flow = rng.uniform(-2, 2, size=(1, 2, 5, 5))
    np.testing.assert_allclose(backward_warp(Tensor(frame), flow).data,
                               _kernels.warp_forward(frame, flow, impl=BACKENDS["python"]), atol=1e-13)
