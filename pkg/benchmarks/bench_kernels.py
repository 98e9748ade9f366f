"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--size 32] [--repeat 5]

Prints the best-of-``repeat`` wall time per kernel and backend, the speedup,
and the max abs difference between backends.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from flowvfi import _kernels
from flowvfi.flow_attention import head_windows


def _inputs(size: int, channels: int, heads: int, L: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    dk = channels // heads
    q, k, v, g = (rng.standard_normal((1, heads, dk, size, size)) for _ in range(4))
    flows = [rng.uniform(-4, 4, size=(1, 2, size, size)) for _ in range(2)]
    row0, col0 = head_windows(flows, heads, L)
    frame = rng.random((1, 3, size, size))
    flow = rng.uniform(-3, 3, size=(1, 2, size, size))
    gw = rng.standard_normal((1, 3, size, size))
    return q, k, v, g, row0, col0, frame, flow, gw


def _best(fn, repeat: int) -> tuple[float, object]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def _maxdiff(a, b) -> float:
    if isinstance(a, tuple):
        return max(_maxdiff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(a - b)))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--channels", type=int, default=16)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--window", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = _kernels.available_backends()
    q, k, v, g, row0, col0, frame, flow, gw = _inputs(args.size, args.channels, args.heads, args.window)
    L = args.window
    probs = _kernels.window_attn_forward(q, k, v, row0, col0, L, impl=backends["python"])[1]
    cases = {
        "window_attn_forward": lambda m: _kernels.window_attn_forward(q, k, v, row0, col0, L, impl=m),
        "window_attn_backward": lambda m: _kernels.window_attn_backward(q, k, v, probs, row0, col0, L, g, impl=m),
        "warp_forward": lambda m: _kernels.warp_forward(frame, flow, impl=m),
        "warp_backward": lambda m: _kernels.warp_backward(frame, flow, gw, impl=m),
    }
    print(f"active backend: {_kernels.BACKEND}; size {args.size}x{args.size}, C={args.channels}, "
          f"heads={args.heads}, L={L}")
    names = sorted(backends)
    print(f"{'kernel':<22}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speedup':>10}{'max diff':>12}")
    for label, fn in cases.items():
        times, outs = {}, {}
        for n in names:
            times[n], outs[n] = _best(lambda: fn(backends[n]), args.repeat)
        row = f"{label:<22}" + "".join(f"{times[n] * 1e3:>12.2f}" for n in names)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>10.1f}x{_maxdiff(outs['python'], outs['cython']):>11.1e}"
        print(row)


if __name__ == "__main__":
    main()
