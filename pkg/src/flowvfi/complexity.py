"""Analytical multiply-add models for conv, global attention and window attention.

All costs are leading-term multiply-add counts with the constants written
out (no softmax, no memory traffic):

    conv           H W C^2 L^2
    self-attention 3 H W C^2 + 2 H^2 W^2 C
    window / flow  3 H W C^2 + 2 H W C L^2

Window attention beats convolution when ``3C + 2L^2 <= C L^2`` (true for
C >= 3 and L >= 3) and beats global attention when ``L^2 < H W`` (true for
L < H and L < W). ``verify_inequalities`` checks both exhaustively on an
integer grid; ``measure_ops`` counts what the implementation actually does.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import opcount
from .errors import ConfigurationError


class CostKind(str, enum.Enum):
    CONV = "conv"
    SELF_ATTN = "self_attn"
    SWIN_ATTN = "swin_attn"
    FLOW_ATTN = "flow_attn"


WINDOWED = (CostKind.SWIN_ATTN, CostKind.FLOW_ATTN)


@dataclass(frozen=True)
class CostModel:
    kind: CostKind
    H: int
    W: int
    C: int
    L: int = 1
    shifted: bool = False  # Swin's second (shifted-window) attention pass

    def __post_init__(self):
        object.__setattr__(self, "kind", CostKind(self.kind))
        for name in ("H", "W", "C", "L"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kind in WINDOWED and self.L > min(self.H, self.W):
            raise ConfigurationError(f"window {self.L} larger than the {self.H}x{self.W} map")
        if self.shifted and self.kind is not CostKind.SWIN_ATTN:
            raise ConfigurationError("the shifted pass only applies to Swin attention")


def cost(model: CostModel) -> int:
    H, W, C, L = model.H, model.W, model.C, model.L
    if model.kind is CostKind.CONV:
        return H * W * C * C * L * L
    if model.kind is CostKind.SELF_ATTN:
        return 3 * H * W * C * C + 2 * (H * W) ** 2 * C
    attn = 2 * H * W * C * L * L
    if model.shifted:
        attn *= 2
    return 3 * H * W * C * C + attn


# ---------------------------------------------------------------------------
# inequality verification
# ---------------------------------------------------------------------------

def window_beats_conv(C, L):
    """``3C + 2L^2 <= C L^2`` (elementwise)."""
    C, L = np.asarray(C), np.asarray(L)
    return 3 * C + 2 * L * L <= C * L * L


def window_beats_global(L, H, W):
    """``L^2 < H W`` (elementwise)."""
    L, H, W = np.asarray(L), np.asarray(H), np.asarray(W)
    return L * L < H * W


@dataclass
class InequalityReport:
    conv_checked: int = 0
    global_checked: int = 0
    conv_violations: list = field(default_factory=list)
    global_violations: list = field(default_factory=list)
    conv_equalities: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.conv_violations and not self.global_violations


def verify_inequalities(C_values: Iterable[int] = range(3, 65), L_values: Iterable[int] = range(3, 16, 2),
                        max_side: int = 64) -> InequalityReport:
    """Check both inequalities on every grid point inside their preconditions.

    The conv inequality runs over ``C x L`` (points with C < 3 or L < 3 are
    skipped); the global one over ``L`` and ``H, W in [L+1, max_side]``.
    """
    rep = InequalityReport()
    C = np.asarray(list(C_values), dtype=np.int64)
    Ls = np.asarray(list(L_values), dtype=np.int64)

    cg, lg = np.meshgrid(C, Ls, indexing="ij")
    inside = (cg >= 3) & (lg >= 3)
    cg, lg = cg[inside], lg[inside]
    rep.conv_checked = int(cg.size)
    lhs = 3 * cg + 2 * lg * lg
    rhs = cg * lg * lg
    rep.conv_violations = [(int(c), int(l)) for c, l in zip(cg[lhs > rhs], lg[lhs > rhs])]
    rep.conv_equalities = [(int(c), int(l)) for c, l in zip(cg[lhs == rhs], lg[lhs == rhs])]

    for L in Ls:
        sides = np.arange(L + 1, max_side + 1, dtype=np.int64)
        if sides.size == 0:
            continue
        hg, wg = np.meshgrid(sides, sides, indexing="ij")
        ok = window_beats_global(L, hg, wg)
        rep.global_checked += int(ok.size)
        rep.global_violations += [(int(L), int(h), int(w)) for h, w in zip(hg[~ok], wg[~ok])]
    return rep


# ---------------------------------------------------------------------------
# empirical counts
# ---------------------------------------------------------------------------

def measure_ops(fn: Callable, *args, **kwargs) -> tuple[int, dict[str, int]]:
    """Run ``fn`` once and return ``(total multiply-adds, per-kind counts)``."""
    with opcount.counting() as counter:
        fn(*args, **kwargs)
    return sum(counter.values()), dict(counter)


def flow_attention_ops(H: int, W: int, C: int = 16, L: int = 5, heads: int = 4, seed: int = 0) -> int:
    """Measured multiply-adds of one flow-attention forward on a ``C x H x W`` map."""
    from .flow_attention import AttnProjection, WindowSpec, flow_attention
    from .tensor import no_grad

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, C, H, W))
    flow = rng.uniform(-3, 3, size=(1, 2, H, W))
    proj = AttnProjection(C, rng)
    with no_grad():
        total, _ = measure_ops(flow_attention, x, flow, WindowSpec(L, heads), proj)
    return total


def conv_ops(H: int, W: int, C: int, L: int = 3, seed: int = 0) -> int:
    """Measured multiply-adds of a same-padded ``L x L`` conv, ``C -> C``."""
    from .nn_ops import conv2d
    from .tensor import Tensor, no_grad

    rng = np.random.default_rng(seed)
    x, w = Tensor(rng.standard_normal((1, C, H, W))), Tensor(rng.standard_normal((C, C, L, L)))
    with no_grad():
        total, _ = measure_ops(conv2d, x, w, None, 1, L // 2)
    return total


def conv_ops_expected(H: int, W: int, C: int, L: int) -> int:
    """Same-padding conv count with border taps removed (they read zeros)."""
    p = L // 2

    def taps(n):
        return sum(min(n - 1, i + p) - max(0, i - p) + 1 for i in range(n))

    return C * C * taps(H) * taps(W)


def fit_through_origin(x, y) -> tuple[float, float]:
    """Least-squares ``y = k x``; returns ``(k, R^2)`` with R^2 about the mean of ``y``."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    k = float(x @ y / (x @ x))
    ss_res = float(np.sum((y - k * x) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return k, (1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0)


@dataclass
class ScalingResult:
    sides: list[int]
    counts: list[int]
    slope: float
    r2: float


def flow_attention_scaling(sides: Iterable[int] = (16, 32, 64, 128), C: int = 16, L: int = 5) -> ScalingResult:
    sides = list(sides)
    counts = [flow_attention_ops(s, s, C, L) for s in sides]
    k, r2 = fit_through_origin([s * s for s in sides], counts)
    return ScalingResult(sides, counts, k, r2)


CSV_HEADER = ("kind", "H", "W", "C", "L", "modeled", "measured")


def complexity_rows(sides: Iterable[int] = (16, 32, 64, 128), C: int = 16, L: int = 5, conv_L: int = 3) -> list[tuple]:
    """One row per (kind, resolution); ``measured`` is empty for unimplemented kinds."""
    rows = []
    for s in sides:
        rows.append((CostKind.FLOW_ATTN.value, s, s, C, L, cost(CostModel(CostKind.FLOW_ATTN, s, s, C, L)),
                     flow_attention_ops(s, s, C, L)))
        rows.append((CostKind.SWIN_ATTN.value, s, s, C, L, cost(CostModel(CostKind.SWIN_ATTN, s, s, C, L)), ""))
        rows.append((CostKind.SELF_ATTN.value, s, s, C, L, cost(CostModel(CostKind.SELF_ATTN, s, s, C, L)), ""))
        rows.append((CostKind.CONV.value, s, s, C, conv_L, cost(CostModel(CostKind.CONV, s, s, C, conv_L)),
                     conv_ops(s, s, C, conv_L)))
    return rows


def write_rows_csv(rows: Iterable[tuple], path_or_file) -> None:
    if hasattr(path_or_file, "write"):
        w = csv.writer(path_or_file)
        w.writerow(CSV_HEADER)
        w.writerows(rows)
        return
    with open(path_or_file, "w", newline="") as fh:
        write_rows_csv(rows, fh)


__all__ = [
    "CostKind", "CostModel", "InequalityReport", "ScalingResult", "complexity_rows", "conv_ops", "conv_ops_expected",
    "cost", "fit_through_origin", "flow_attention_ops", "flow_attention_scaling", "measure_ops",
    "verify_inequalities", "window_beats_conv", "window_beats_global", "write_rows_csv",
]
