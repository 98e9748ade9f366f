"""Hot-loop kernels: compiled extension with a numpy fallback.

The compiled module is used when importable; set ``FLOWVFI_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fallback

if os.environ.get("FLOWVFI_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def window_attn_forward(q, k, v, row0, col0, L, impl=None):
    m = impl or _impl
    return m.window_attn_forward(_f64(q), _f64(k), _f64(v), _i64(row0), _i64(col0), int(L))


def window_attn_backward(q, k, v, probs, row0, col0, L, gout, impl=None):
    m = impl or _impl
    return m.window_attn_backward(
        _f64(q), _f64(k), _f64(v), _f64(probs), _i64(row0), _i64(col0), int(L), _f64(gout)
    )


def warp_forward(frame, flow, impl=None):
    return (impl or _impl).warp_forward(_f64(frame), _f64(flow))


def warp_backward(frame, flow, gout, impl=None):
    return (impl or _impl).warp_backward(_f64(frame), _f64(flow), _f64(gout))


def available_backends() -> dict:
    """Map backend name to module for every importable implementation."""
    out = {"python": _fallback}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
