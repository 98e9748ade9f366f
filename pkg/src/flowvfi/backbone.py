"""Shared U-Net used for flow prediction, feature extraction and occlusion.

Encoder stage: conv3x3 + LeakyReLU + conv3x3 + LeakyReLU, then 2x2 average
pooling (four stages, so inputs must be divisible by 16). Decoder stage:
2x transposed conv, concatenation with the same-resolution encoder map,
conv3x3 + LeakyReLU. Only the final conv (the "head") differs between uses.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .nn_ops import Conv2d, ConvTranspose2d, Module, avg_pool2, leaky_relu, sigmoid
from .tensor import Tensor, concat, split


class HeadKind(str, enum.Enum):
    FLOW = "flow"
    FEATURE = "feature"
    OCCLUSION = "occlusion"


@dataclass
class UNetConfig:
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    head_kind: HeadKind = HeadKind.FLOW
    feature_channels: int = 16

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.head_kind = HeadKind(self.head_kind)
        if len(self.encoder_channels) != 4:
            raise ConfigurationError("the U-Net has exactly 4 encoder stages")
        if min(self.encoder_channels) < 1 or self.feature_channels < 1:
            raise ConfigurationError("channel counts must be positive")

    @property
    def in_channels(self) -> int:
        # occlusion sees both frames and both warped frames
        return 12 if self.head_kind is HeadKind.OCCLUSION else 6

    @property
    def out_channels(self) -> int:
        return {HeadKind.FLOW: 4, HeadKind.FEATURE: 2 * self.feature_channels, HeadKind.OCCLUSION: 1}[self.head_kind]


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, rng):
        self.conv1 = Conv2d(cin, cout, 3, rng=rng)
        self.conv2 = Conv2d(cout, cout, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return leaky_relu(self.conv2(leaky_relu(self.conv1(x))))


class DecoderStage(Module):
    def __init__(self, cin: int, skip: int, cout: int, rng):
        self.up = ConvTranspose2d(cin, cout, rng=rng)
        self.conv = Conv2d(cout + skip, cout, 3, rng=rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up(x)
        if up.shape[2:] != skip.shape[2:]:
            raise DimensionError(f"decoder skip mismatch {up.shape[2:]} vs {skip.shape[2:]}")
        return leaky_relu(self.conv(concat([up, skip], axis=1)))


class UNet(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        chans = cfg.encoder_channels
        ins = (cfg.in_channels,) + chans[:-1]
        self.encoders = [EncoderStage(ci, co, rng) for ci, co in zip(ins, chans)]
        # decoder i (deepest first) upsamples to encoder i's resolution
        self.decoders = []
        below = chans[-1]
        for c in reversed(chans):
            self.decoders.append(DecoderStage(below, c, c, rng))
            below = c
        zero_head = cfg.head_kind in (HeadKind.FLOW, HeadKind.OCCLUSION)
        self.head = Conv2d(chans[0], cfg.out_channels, 3, rng=rng, zero_init=zero_head)
        self.last_shapes: list[tuple[int, ...]] = []

    def trunk(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise DimensionError(f"U-Net expects {self.cfg.in_channels} input channels, got {c}")
        if h % 16 or w % 16:
            raise DimensionError(f"U-Net input must be divisible by 16, got {h}x{w}")
        skips = []
        shapes = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            shapes.append(x.shape)
            x = avg_pool2(x)
        shapes.append(x.shape)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip)
            shapes.append(x.shape)
        self.last_shapes = shapes
        return x

    def forward(self, x: Tensor) -> Tensor:
        out = self.head(self.trunk(x))
        if self.cfg.head_kind is HeadKind.OCCLUSION:
            out = sigmoid(out)
        return out


def unet_forward(frames: Tensor, net: UNet) -> Tensor:
    return net(frames)


def _pair(i_prev: Tensor, i_next: Tensor) -> Tensor:
    if i_prev.shape != i_next.shape:
        raise DimensionError(f"frame shapes differ: {i_prev.shape} vs {i_next.shape}")
    return concat([i_prev, i_next], axis=1)


def predict_flow(i_prev: Tensor, i_next: Tensor, net: UNet) -> tuple[Tensor, Tensor]:
    """Two ``[N, 2, H, W]`` flows (dy, dx) from the target frame to each input."""
    out = net(_pair(i_prev, i_next))
    f_prev, f_next = split(out, 2, axis=1)
    return f_prev, f_next


def extract_features(i_prev: Tensor, i_next: Tensor, net: UNet) -> tuple[Tensor, Tensor]:
    out = net(_pair(i_prev, i_next))
    m_prev, m_next = split(out, 2, axis=1)
    return m_prev, m_next


def predict_occlusion(inputs: Tensor, net: UNet) -> Tensor:
    """Visibility weight ``[N, 1, H, W]`` for the warped previous frame."""
    return net(inputs)


__all__ = [
    "HeadKind", "UNet", "UNetConfig", "extract_features", "predict_flow", "predict_occlusion", "unet_forward",
]
