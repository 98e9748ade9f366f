"""Flow-guided local attention.

Each query pixel ``(i, j)`` is displaced by its flow vector, rounded to the
nearest integer pixel, clamped onto the image, and attends over the ``L x L``
key/value window around that pixel.  Windows near the border slide inward so
they are always exactly ``L x L`` and fully inside the image.

When two flows are given (previous / next frame), the attention heads are
split into two equal groups: the first group is located by the first flow,
the second by the second flow.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels, branches, opcount
from .errors import ConfigurationError, DimensionError
from .nn_ops import Conv2d, LayerNorm, Linear, MLP, Module, kaiming_uniform, leaky_relu, parameter
from .tensor import DTYPE, Tensor, as_tensor, concat


class AttnVariant(str, enum.Enum):
    FLOW_GUIDED = "flow"
    NO_FLOW = "noflow"
    CONV_REPLACE = "conv"


@dataclass(frozen=True)
class WindowSpec:
    L: int = 5
    heads: int = 4

    def __post_init__(self):
        if self.L < 1 or self.L % 2 == 0:
            raise ConfigurationError(f"window size must be odd and >= 1, got {self.L}")
        if self.heads < 1:
            raise ConfigurationError("need at least one head")

    def dk(self, channels: int) -> int:
        if channels % self.heads:
            raise ConfigurationError(f"{channels} channels not divisible by {self.heads} heads")
        return channels // self.heads


class RefRegion(NamedTuple):
    row0: int
    col0: int
    center: tuple[int, int]


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=DTYPE)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def _check_window(H: int, W: int, L: int) -> None:
    if L > H or L > W:
        raise ConfigurationError(f"window {L}x{L} does not fit in a {H}x{W} map")


def locate_reference(i: int, j: int, flow_at_ij, H: int, W: int, L: int) -> RefRegion:
    """Window for one query pixel; ``flow_at_ij`` is ``(dy, dx)`` in pixels."""
    if L < 1 or L % 2 == 0:
        raise ConfigurationError(f"window size must be odd and >= 1, got {L}")
    _check_window(H, W, L)
    dy, dx = float(flow_at_ij[0]), float(flow_at_ij[1])
    ci = min(max(int(round_half_away(i + dy)), 0), H - 1)
    cj = min(max(int(round_half_away(j + dx)), 0), W - 1)
    half = L // 2
    row0 = min(max(ci - half, 0), H - L)
    col0 = min(max(cj - half, 0), W - L)
    return RefRegion(row0, col0, (ci, cj))


def locate_grid(flow: np.ndarray, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`locate_reference` over a ``[N, 2, H, W]`` flow field.

    Returns int64 ``row0, col0`` arrays of shape ``[N, H, W]``.
    """
    flow = np.asarray(flow, dtype=DTYPE)
    _, _, H, W = flow.shape
    _check_window(H, W, L)
    ci = np.clip(round_half_away(np.arange(H)[:, None] + flow[:, 0]), 0, H - 1)
    cj = np.clip(round_half_away(np.arange(W)[None, :] + flow[:, 1]), 0, W - 1)
    half = L // 2
    row0, col0 = np.clip(ci - half, 0, H - L), np.clip(cj - half, 0, W - L)
    branches.note("window", np.stack([row0, col0]))
    return row0, col0


def _flow_data(flow) -> np.ndarray:
    return flow.data if isinstance(flow, Tensor) else np.asarray(flow, dtype=DTYPE)


def head_windows(flows: Sequence, heads: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-head window corners ``[N, heads, H, W]``; heads split evenly across flows."""
    groups = len(flows)
    if heads % groups:
        raise ConfigurationError(f"{heads} heads cannot be split across {groups} flows")
    per = heads // groups
    rows, cols = [], []
    for f in flows:
        r, c = locate_grid(_flow_data(f), L)
        rows.extend([r] * per)
        cols.extend([c] * per)
    return np.stack(rows, axis=1), np.stack(cols, axis=1)


def window_attention(q: Tensor, k: Tensor, v: Tensor, row0: np.ndarray, col0: np.ndarray, L: int,
                     heads: int, flows: Sequence = ()) -> tuple[Tensor, np.ndarray]:
    """Multi-head attention of each query over its located ``L x L`` window.

    ``q, k, v`` are ``[N, C, H, W]`` (C = heads * dk, head-major channels).
    Returns the attended values and the ``[N, heads, H, W, L*L]`` softmax weights.
    Any ``flows`` tensors passed are attached as parents receiving exactly zero
    gradient: window placement is piecewise constant in the flow.
    """
    n, c, H, W = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise DimensionError("q, k, v must share a shape")
    dk = c // heads
    shp = (n, heads, dk, H, W)
    qd, kd, vd = q.data.reshape(shp), k.data.reshape(shp), v.data.reshape(shp)
    out, probs = _kernels.window_attn_forward(qd, kd, vd, row0, col0, L)
    opcount.record("attention", 2 * n * c * H * W * L * L)
    flow_parents = tuple(f for f in flows if isinstance(f, Tensor))

    def bw(g):
        dq, dk_, dv = _kernels.window_attn_backward(qd, kd, vd, probs, row0, col0, L, g.reshape(shp))
        zero = tuple(np.zeros(f.shape, dtype=DTYPE) for f in flow_parents)
        return (dq.reshape(q.shape), dk_.reshape(k.shape), dv.reshape(v.shape)) + zero

    return Tensor.from_op(out.reshape(n, c, H, W), (q, k, v) + flow_parents, bw), probs


class AttnProjection(Module):
    """Q/K/V and output projections (``[C, C]`` each, with biases)."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, zero_out: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.q = Linear(channels, channels, rng, axis=1)
        self.k = Linear(channels, channels, rng, axis=1)
        self.v = Linear(channels, channels, rng, axis=1)
        self.out = Linear(channels, channels, rng, axis=1, zero_init=zero_out)


def _as_flow_list(flow) -> list:
    if isinstance(flow, (list, tuple)):
        return list(flow)
    return [flow]


def flow_attention(x: Tensor, flow, spec: WindowSpec, proj: AttnProjection, return_probs: bool = False):
    """Flow-located local attention; output shape equals input shape.

    ``flow`` is a ``[N, 2, H, W]`` field (channel 0 = dy, channel 1 = dx) or a
    pair of them, one per head group.
    """
    x = as_tensor(x)
    n, c, H, W = x.shape
    flows = _as_flow_list(flow)
    for f in flows:
        fs = f.shape if isinstance(f, Tensor) else np.shape(f)
        if tuple(fs) != (n, 2, H, W):
            raise DimensionError(f"flow shape {tuple(fs)} does not match features {(n, 2, H, W)}")
    spec.dk(c)
    row0, col0 = head_windows(flows, spec.heads, spec.L)
    q, k, v = proj.q(x), proj.k(x), proj.v(x)
    attn, probs = window_attention(q, k, v, row0, col0, spec.L, spec.heads, flows)
    out = proj.out(attn)
    return (out, probs) if return_probs else out


def noflow_attention(x: Tensor, spec: WindowSpec, proj: AttnProjection, groups: int = 1, return_probs: bool = False):
    """Local attention centred on each query (flow forced to zero)."""
    n, _, H, W = x.shape
    zero = np.zeros((n, 2, H, W), dtype=DTYPE)
    return flow_attention(x, [zero] * groups if groups > 1 else zero, spec, proj, return_probs)


# ---------------------------------------------------------------------------
# convolution over the located window (ablation)
# ---------------------------------------------------------------------------

def _window_flat_index(row0: np.ndarray, col0: np.ndarray, L: int, W: int) -> np.ndarray:
    off_r = np.repeat(np.arange(L), L)
    off_c = np.tile(np.arange(L), L)
    # [N, G, H, W, T] -> [N, G, T, H, W]
    idx = (row0[..., None] + off_r) * W + (col0[..., None] + off_c)
    return np.moveaxis(idx, -1, 2)


def gather_windows(x: Tensor, row0: np.ndarray, col0: np.ndarray, L: int) -> Tensor:
    """Patches ``[N, C, L*L, H, W]``; channel groups follow ``row0.shape[1]`` groups."""
    n, c, H, W = x.shape
    groups = row0.shape[1]
    if c % groups:
        raise DimensionError(f"{c} channels not divisible into {groups} flow groups")
    per = c // groups
    idx = np.repeat(_window_flat_index(row0, col0, L, W), per, axis=1)  # [N, C, T, H, W]
    flat = x.data.reshape(n, c, H * W)
    T = L * L
    patches = np.take_along_axis(flat, idx.reshape(n, c, T * H * W), axis=2).reshape(n, c, T, H, W)
    base = (np.arange(n * c) * (H * W)).reshape(n, c, 1, 1, 1)
    flat_idx = (idx + base).ravel()

    def bw(g):
        gx = np.bincount(flat_idx, weights=g.ravel(), minlength=n * c * H * W)
        return (gx.reshape(x.shape),)

    return Tensor.from_op(patches, (x,), bw)


def patch_dot(patches: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Apply a shared ``[Cout, C, T]`` filter to ``[N, C, T, H, W]`` patches."""
    n, c, T, H, W = patches.shape
    co = weight.shape[0]
    pm = patches.data.reshape(n, c * T, H * W)
    wm = weight.data.reshape(co, c * T)
    out = np.matmul(wm, pm) + bias.data[None, :, None]
    opcount.record("conv_replace", n * co * c * T * H * W)

    def bw(g):
        g2 = g.reshape(n, co, H * W)
        gp = np.matmul(wm.T, g2).reshape(patches.shape)
        gw = np.einsum("nop,nkp->ok", g2, pm).reshape(weight.shape)
        return gp, gw, g2.sum(axis=(0, 2))

    return Tensor.from_op(out.reshape(n, co, H, W), (patches, weight, bias), bw)


class ConvReplace(Module):
    """Shared ``L x L x C -> C`` filter applied on the flow-located window."""

    def __init__(self, channels: int, L: int, rng: np.random.Generator | None = None, zero_init: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (channels, channels, L * L)
        self.weight = parameter(np.zeros(shape) if zero_init else kaiming_uniform(rng, shape, channels * L * L))
        self.bias = parameter(np.zeros(channels))
        self.L = L


def conv_replace_forward(x: Tensor, flow, spec: WindowSpec, params: ConvReplace) -> Tensor:
    x = as_tensor(x)
    n, c, H, W = x.shape
    flows = _as_flow_list(flow)
    for f in flows:
        fs = f.shape if isinstance(f, Tensor) else np.shape(f)
        if tuple(fs) != (n, 2, H, W):
            raise DimensionError(f"flow shape {tuple(fs)} does not match features {(n, 2, H, W)}")
    grids = [locate_grid(_flow_data(f), spec.L) for f in flows]
    row0 = np.stack([g[0] for g in grids], axis=1)
    col0 = np.stack([g[1] for g in grids], axis=1)
    return patch_dot(gather_windows(x, row0, col0, spec.L), params.weight, params.bias)


# ---------------------------------------------------------------------------
# transformer blocks
# ---------------------------------------------------------------------------

class FTFA(Module):
    """Two pre-norm residual sub-layers: local attention, then MLP.

    ``k_hat = FA(LN(k)) + k`` followed by ``out = MLP(LN(k_hat)) + k_hat``,
    all over the channel axis of NCHW maps.
    """

    def __init__(self, channels: int, spec: WindowSpec, variant: AttnVariant = AttnVariant.FLOW_GUIDED,
                 hidden_ratio: float = 2.0, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        spec.dk(channels)
        self.spec = spec
        self.variant = AttnVariant(variant)
        self.norm1 = LayerNorm(channels, axis=1)
        if self.variant is AttnVariant.CONV_REPLACE:
            self.mixer = ConvReplace(channels, spec.L, rng)
        else:
            self.mixer = AttnProjection(channels, rng)
        self.norm2 = LayerNorm(channels, axis=1)
        self.mlp = MLP(channels, hidden_ratio, rng, axis=1)

    def zero_residual_branches(self) -> None:
        """Zero the mixer and MLP weights so the block is the identity map."""
        for _, p in list(self.mixer.named_parameters()) + list(self.mlp.named_parameters()):
            p.data = np.zeros_like(p.data)

    def mix(self, x: Tensor, flows: Sequence) -> Tensor:
        if self.variant is AttnVariant.NO_FLOW:
            n, _, H, W = x.shape
            flows = [np.zeros((n, 2, H, W), dtype=DTYPE)] * len(flows)
        if self.variant is AttnVariant.CONV_REPLACE:
            return conv_replace_forward(x, list(flows), self.spec, self.mixer)
        return flow_attention(x, list(flows), self.spec, self.mixer)

    def forward(self, k_in: Tensor, flows: Sequence) -> Tensor:
        k_hat = self.mix(self.norm1(k_in), flows) + k_in
        return self.mlp(self.norm2(k_hat)) + k_hat


def ftfa_forward(k_in: Tensor, flow, params: FTFA) -> Tensor:
    return params(k_in, _as_flow_list(flow))


class FTFB(Module):
    """Strided (or, for the first block, unstrided) conv, conv+LeakyReLU, FTFA, conv."""

    def __init__(self, in_channels: int, width: int, spec: WindowSpec, is_first: bool = False,
                 variant: AttnVariant = AttnVariant.FLOW_GUIDED, hidden_ratio: float = 2.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.is_first = is_first
        self.conv_in = Conv2d(in_channels, width, 3, stride=1 if is_first else 2, padding=1, rng=rng)
        self.conv_mid = Conv2d(width, width, 3, rng=rng)
        self.ftfa = FTFA(width, spec, variant, hidden_ratio, rng)
        self.conv_out = Conv2d(width, width, 3, rng=rng)

    def forward(self, x_in: Tensor, skip: Tensor | None, flows: Sequence) -> Tensor:
        if self.is_first:
            x = x_in
        else:
            if skip is None or skip.shape[2:] != x_in.shape[2:]:
                got = None if skip is None else skip.shape[2:]
                raise DimensionError(f"skip features {got} do not match block input {x_in.shape[2:]}")
            x = concat([x_in, skip], axis=1)
        x = self.conv_in(x)
        x = leaky_relu(self.conv_mid(x))
        x = self.ftfa(x, flows)
        return self.conv_out(x)


def ftfb_forward(x_in: Tensor, skip_features: Tensor | None, flows, params: FTFB) -> Tensor:
    return params(x_in, skip_features, _as_flow_list(flows))


__all__ = [
    "AttnProjection", "AttnVariant", "ConvReplace", "FTFA", "FTFB", "RefRegion", "WindowSpec",
    "conv_replace_forward", "flow_attention", "ftfa_forward", "ftfb_forward", "gather_windows",
    "head_windows", "locate_grid", "locate_reference", "noflow_attention", "round_half_away",
    "window_attention",
]
