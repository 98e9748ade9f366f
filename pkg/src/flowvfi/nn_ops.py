"""Differentiable neural network building blocks.

Functional ops take and return :class:`~flowvfi.tensor.Tensor`; the small
``Module`` classes below own parameters and wrap the functional forms.
Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import branches, opcount
from .errors import ConfigurationError, DimensionError
from .tensor import DTYPE, Tensor, as_tensor, unbroadcast

LEAKY_SLOPE = 0.1
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _valid_taps(in_size: int, out_size: int, k: int, stride: int, pad: int) -> int:
    """Number of (output position, kernel offset) pairs that hit real input."""
    o = np.arange(out_size)[:, None] * stride + np.arange(k)[None, :] - pad
    return int(((o >= 0) & (o < in_size)).sum())


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``weight`` is ``[out, in, k, k]``."""
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d expects {ci} input channels, got {c}")
    if k != k2:
        raise ConfigurationError("only square kernels are supported")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"input {h}x{w} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    taps = [(a, b) for a in range(k) for b in range(k)]
    cols = np.empty((n, c, k * k, ho, wo), dtype=DTYPE)
    for t, (a, b) in enumerate(taps):
        cols[:, :, t] = xp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(co, c * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, co, ho, wo)
    opcount.record(
        "conv", n * ci * co * _valid_taps(h, ho, k, stride, padding) * _valid_taps(w, wo, k, stride, padding)
    )

    def bw(g):
        g2 = g.reshape(n, co, ho * wo)
        gw = np.einsum("nop,nkp->ok", g2, cols).reshape(weight.shape)
        gb = g2.sum(axis=(0, 2)) if bias is not None else None
        gcols = np.matmul(wmat.T, g2).reshape(n, c, k * k, ho, wo)
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for t, (a, b) in enumerate(taps):
            gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, t]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution (adjoint of :func:`conv2d`). ``weight`` is ``[in, out, k, k]``.

    Only configurations that exactly double the spatial size are accepted.
    """
    n, c, h, w = x.shape
    ci, co, k, _ = weight.shape
    if c != ci:
        raise DimensionError(f"conv_transpose2d expects {ci} input channels, got {c}")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho != 2 * h or wo != 2 * w:
        raise ConfigurationError(
            f"kernel={k}, stride={stride}, padding={padding} maps {h}x{w} to {ho}x{wo}, not an exact 2x upsample"
        )
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    wmat = weight.data.reshape(ci, co * k * k)
    xm = x.data.reshape(n, ci, h * w)
    contrib = np.matmul(wmat.T, xm).reshape(n, co, k, k, h, w)
    full = np.zeros((n, co, hf, wf), dtype=DTYPE)
    for a in range(k):
        for b in range(k):
            full[:, :, a:a + stride * h:stride, b:b + stride * w:stride] += contrib[:, :, a, b]
    out = full[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = out.copy()
    opcount.record(
        "conv_transpose", n * ci * co * _valid_taps(ho, h, k, stride, padding) * _valid_taps(wo, w, k, stride, padding)
    )

    def bw(g):
        gfull = np.zeros((n, co, hf, wf), dtype=DTYPE)
        gfull[:, :, padding:padding + ho, padding:padding + wo] = g
        gcontrib = np.empty((n, co, k, k, h, w), dtype=DTYPE)
        for a in range(k):
            for b in range(k):
                gcontrib[:, :, a, b] = gfull[:, :, a:a + stride * h:stride, b:b + stride * w:stride]
        gcontrib = gcontrib.reshape(n, co * k * k, h * w)
        gx = np.matmul(wmat, gcontrib).reshape(x.shape)
        gw = np.einsum("ncp,nkp->ck", xm, gcontrib).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, bw)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return Tensor.from_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    branches.note("leaky", x.data >= 0)
    factor = np.where(x.data >= 0, 1.0, slope)
    return Tensor.from_op(x.data * factor, (x,), lambda g: (g * factor,))


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), bw)


def _channel_view(vec: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vec.shape[0]
    return vec.reshape(shape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS, axis: int = -1) -> Tensor:
    """Normalise each position's channel vector along ``axis``."""
    axis = axis % x.ndim
    c = x.shape[axis]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm params must have shape ({c},)")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = _channel_view(gamma.data, x.ndim, axis)
    bv = _channel_view(beta.data, x.ndim, axis)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        dxhat = g * gv
        dx = rstd * (
            dxhat - dxhat.mean(axis=axis, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return Tensor.from_op(xhat * gv + bv, (x, gamma, beta), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, axis: int = -1) -> Tensor:
    """``y = x @ W + b`` along ``axis``; ``weight`` is ``[in, out]``."""
    axis = axis % x.ndim
    cin, cout = weight.shape
    if x.shape[axis] != cin:
        raise DimensionError(f"linear expects {cin} features on axis {axis}, got {x.shape[axis]}")
    xm = np.moveaxis(x.data, axis, -1)
    y = xm @ weight.data
    if bias is not None:
        y = y + bias.data
    opcount.record("linear", (xm.size // cin) * cin * cout)

    def bw(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.moveaxis(gm @ weight.data.T, -1, axis)
        gw = xm.reshape(-1, cin).T @ gm.reshape(-1, cout)
        gb = gm.reshape(-1, cout).sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(np.moveaxis(y, -1, axis), parents, bw)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, slope: float = LEAKY_SLOPE) -> np.ndarray:
    bound = np.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container; parameters are attributes holding grad-tracking tensors."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            src = np.asarray(state[k], dtype=DTYPE)
            if src.shape != p.shape:
                raise DimensionError(f"{k}: expected {p.shape}, got {src.shape}")
            p.data = src.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass(frozen=True)
class ConvParams:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, zero_init: bool = False):
        if padding is None:
            if kernel % 2 == 0:
                raise ConfigurationError("same padding needs an odd kernel")
            padding = kernel // 2
        self.cfg = ConvParams(in_ch, out_ch, kernel, stride, padding)
        shape = (out_ch, in_ch, kernel, kernel)
        if zero_init:
            self.weight = parameter(np.zeros(shape))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.weight = parameter(kaiming_uniform(rng, shape, in_ch * kernel * kernel))
        self.bias = parameter(np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.cfg.stride, self.cfg.padding)


class ConvTranspose2d(Module):
    """2x upsampling transposed convolution (kernel 2, stride 2 by default)."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 2, stride: int = 2, padding: int = 0,
                 rng: np.random.Generator | None = None):
        if (kernel - 2 * padding) != stride or stride != 2:
            raise ConfigurationError(
                f"kernel={kernel}, stride={stride}, padding={padding} does not give an exact 2x upsample"
            )
        self.cfg = ConvParams(in_ch, out_ch, kernel, stride, padding)
        rng = rng if rng is not None else np.random.default_rng(0)
        # fan-in of each output tap is in_ch * (k/stride)^2
        fan_in = max(1, in_ch * (kernel // stride) ** 2)
        self.weight = parameter(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in))
        self.bias = parameter(np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.cfg.stride, self.cfg.padding)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = LN_EPS, axis: int = -1):
        if eps <= 0:
            raise ConfigurationError("layer norm epsilon must be positive")
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.eps = eps
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps, self.axis)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 axis: int = -1, zero_init: bool = False):
        shape = (in_features, out_features)
        if zero_init:
            self.weight = parameter(np.zeros(shape))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.weight = parameter(kaiming_uniform(rng, shape, in_features))
        self.bias = parameter(np.zeros(out_features))
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias, self.axis)


class MLP(Module):
    """Two linear layers with a LeakyReLU between; preserves the channel count."""

    def __init__(self, channels: int, hidden_ratio: float = 2.0, rng: np.random.Generator | None = None,
                 axis: int = -1, zero_init: bool = False):
        hidden = max(1, int(round(channels * hidden_ratio)))
        self.fc1 = Linear(channels, hidden, rng, axis)
        self.fc2 = Linear(hidden, channels, rng, axis, zero_init=zero_init)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(leaky_relu(self.fc1(x)))


def mlp(x: Tensor, hidden_ratio: float = 2.0, rng: np.random.Generator | None = None) -> Tensor:
    """Functional MLP over the last axis with freshly initialised weights."""
    return MLP(as_tensor(x).shape[-1], hidden_ratio, rng)(as_tensor(x))


__all__ = [
    "ConvParams", "Conv2d", "ConvTranspose2d", "LayerNorm", "Linear", "MLP", "Module",
    "avg_pool2", "conv2d", "conv_transpose2d", "kaiming_uniform", "layer_norm", "leaky_relu",
    "linear", "mlp", "parameter", "sigmoid", "softmax", "unbroadcast",
]
