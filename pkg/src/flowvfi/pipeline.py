"""End-to-end interpolation model and its losses.

Forward pass for a frame pair ``(I_prev, I_next)``:

1. predict two flows (target -> previous, target -> next) and two feature maps;
2. backward-warp both frames with their flows;
3. run the full-resolution first block on ``[I_prev, I_next, warped_prev, warped_next]``;
4. run the remaining blocks, each halving resolution, guided by flows
   downscaled to that resolution;
5. upsample back through skip connections to a 3-channel residual;
6. blend the warped frames with the occlusion map and add the residual.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, branches
from .backbone import HeadKind, UNet, UNetConfig, extract_features, predict_flow, predict_occlusion
from .errors import ConfigurationError, DimensionError
from .flow_attention import FTFB, AttnVariant, WindowSpec
from .nn_ops import Conv2d, ConvTranspose2d, Module, avg_pool2, leaky_relu
from .tensor import Tensor, as_tensor, clamp, concat, scale


@dataclass
class ModelConfig:
    L: int = 5
    heads: int = 4
    attn_width: int = 16
    feature_channels: int = 16
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256)
    num_scales: int = 4
    variant: AttnVariant = AttnVariant.FLOW_GUIDED
    lambda_warp: float = 1.0
    lambda_rec: float = 0.5
    mlp_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.variant = AttnVariant(self.variant)
        WindowSpec(self.L, self.heads)
        if self.num_scales < 2:
            raise ConfigurationError("need at least two scales (first block plus one strided block)")
        if self.lambda_warp < 0 or self.lambda_rec < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.attn_width % self.heads:
            raise ConfigurationError(f"attn_width {self.attn_width} not divisible by heads {self.heads}")
        if self.heads % 2:
            raise ConfigurationError("heads must be even: half follow each flow")
        if self.attn_width % 2:
            raise ConfigurationError("attn_width must be even")

    @property
    def window(self) -> WindowSpec:
        return WindowSpec(self.L, self.heads)

    def unet(self, kind: HeadKind) -> UNetConfig:
        return UNetConfig(self.encoder_channels, kind, self.feature_channels)

    def check_input(self, h: int, w: int) -> None:
        if h % 16 or w % 16:
            raise DimensionError(f"frame size {h}x{w} must be divisible by 16")
        coarse = 2 ** (self.num_scales - 1)
        if h // coarse < self.L or w // coarse < self.L:
            raise ConfigurationError(
                f"{h}x{w} frames give a {h // coarse}x{w // coarse} coarsest map, smaller than the {self.L}x{self.L} window"
            )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class InterpolationOutput:
    I_t: Tensor
    O_t: Tensor
    delta: Tensor
    warped_prev: Tensor
    warped_next: Tensor
    flows: tuple[Tensor, Tensor]
    occlusion: Tensor
    scale_features: list[Tensor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# differentiable image ops
# ---------------------------------------------------------------------------

def backward_warp(frame: Tensor, flow: Tensor) -> Tensor:
    """Bilinearly sample ``frame`` at ``(i + dy, j + dx)``; coordinates clamp to the border."""
    frame, flow = as_tensor(frame), as_tensor(flow)
    n, c, h, w = frame.shape
    if flow.shape != (n, 2, h, w):
        raise DimensionError(f"flow shape {flow.shape} does not match frame {frame.shape}")
    fd, gd = frame.data, flow.data
    out = _kernels.warp_forward(fd, gd)
    if branches.active():
        grid = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij"))
        pos = grid[None] + gd
        hi = np.array([h - 1, w - 1], dtype=float).reshape(1, 2, 1, 1)
        branches.note("warp_cell", np.floor(np.clip(pos, 0, hi)).astype(np.int64))
        branches.note("warp_inside", (pos >= 0) & (pos <= hi))

    def bw(g):
        return _kernels.warp_backward(fd, gd, g)

    return Tensor.from_op(out, (frame, flow), bw)


def downscale_flow(flow: Tensor, factor: int) -> Tensor:
    """Average-pool by ``factor`` (a power of two) and rescale vectors to the coarse grid."""
    if factor < 1 or factor & (factor - 1):
        raise ConfigurationError(f"flow downscale factor must be a power of two, got {factor}")
    flow = as_tensor(flow)
    if factor == 1:
        return flow
    f = flow
    k = factor
    while k > 1:
        f = avg_pool2(f)
        k //= 2
    return scale(f, 1.0 / factor)


def occlusion_blend(warped_prev: Tensor, warped_next: Tensor, o_prev: Tensor) -> Tensor:
    """``O * warped_prev + (1 - O) * warped_next`` with a one-channel ``O``."""
    o_prev = as_tensor(o_prev)
    o_next = 1.0 - o_prev
    return warped_prev * o_prev + warped_next * o_next


def loss_warp(i_gt: Tensor, warped_prev: Tensor, warped_next: Tensor) -> Tensor:
    avg = scale(warped_prev + warped_next, 0.5)
    return (as_tensor(i_gt) - avg).abs().mean()


def loss_rec(i_gt: Tensor, i_t: Tensor) -> Tensor:
    return (as_tensor(i_gt) - i_t).abs().mean()


def loss_terms(i_gt: Tensor, out: InterpolationOutput, cfg: ModelConfig) -> dict[str, Tensor]:
    lw = loss_warp(i_gt, out.warped_prev, out.warped_next)
    lr = loss_rec(i_gt, out.I_t)
    return {"warp": lw, "rec": lr, "total": scale(lw, cfg.lambda_warp) + scale(lr, cfg.lambda_rec)}


def total_loss(i_gt: Tensor, out: InterpolationOutput, cfg: ModelConfig) -> Tensor:
    return loss_terms(i_gt, out, cfg)["total"]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class UpStage(Module):
    def __init__(self, width: int, rng):
        self.up = ConvTranspose2d(width, width, rng=rng)
        self.conv = Conv2d(2 * width, width, 3, rng=rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        return leaky_relu(self.conv(concat([self.up(x), skip], axis=1)))


class InterpolationModel(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg = cfg if cfg is not None else ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        self.flow_net = UNet(cfg.unet(HeadKind.FLOW), rng)
        self.feature_net = UNet(cfg.unet(HeadKind.FEATURE), rng)
        self.occlusion_net = UNet(cfg.unet(HeadKind.OCCLUSION), rng)
        spec = cfg.window
        width = cfg.attn_width
        self.blocks = [FTFB(12, width, spec, True, cfg.variant, cfg.mlp_ratio, rng)]
        for _ in range(cfg.num_scales - 1):
            self.blocks.append(FTFB(width + 2 * cfg.feature_channels, width, spec, False, cfg.variant,
                                    cfg.mlp_ratio, rng))
        self.ups = [UpStage(width, rng) for _ in range(cfg.num_scales - 1)]
        self.residual_head = Conv2d(width, 3, 3, rng=rng, zero_init=True)

    def parameter_groups(self) -> dict[str, list[Tensor]]:
        groups: dict[str, list[Tensor]] = {"flow": [], "feature": [], "occlusion": [], "transformer": []}
        for name, p in self.named_parameters():
            key = {"flow_net": "flow", "feature_net": "feature", "occlusion_net": "occlusion"}.get(
                name.split(".")[0], "transformer"
            )
            groups[key].append(p)
        return groups

    def forward(self, i_prev, i_next) -> InterpolationOutput:
        i_prev, i_next = as_tensor(i_prev), as_tensor(i_next)
        if i_prev.shape != i_next.shape:
            raise DimensionError(f"frame shapes differ: {i_prev.shape} vs {i_next.shape}")
        n, c, h, w = i_prev.shape
        if c != 3:
            raise DimensionError(f"frames must have 3 channels, got {c}")
        self.cfg.check_input(h, w)

        f_prev, f_next = predict_flow(i_prev, i_next, self.flow_net)
        m_prev, m_next = extract_features(i_prev, i_next, self.feature_net)
        w_prev = backward_warp(i_prev, f_prev)
        w_next = backward_warp(i_next, f_next)
        stacked = concat([i_prev, i_next, w_prev, w_next], axis=1)
        occ = predict_occlusion(stacked, self.occlusion_net)

        feats = [self.blocks[0](stacked, None, [f_prev, f_next])]
        skip = concat([m_prev, m_next], axis=1)
        for s, block in enumerate(self.blocks[1:], start=1):
            if s > 1:
                skip = avg_pool2(skip)
            flows = [downscale_flow(f_prev, 2 ** s), downscale_flow(f_next, 2 ** s)]
            feats.append(block(feats[-1], skip, flows))

        x = feats[-1]
        for up, skip_feat in zip(self.ups, reversed(feats[:-1])):
            x = up(x, skip_feat)
        delta = self.residual_head(x)

        blended = occlusion_blend(w_prev, w_next, occ)
        i_t = blended + delta
        return InterpolationOutput(i_t, blended, delta, w_prev, w_next, (f_prev, f_next), occ, feats)


def model_forward(i_prev, i_next, model: InterpolationModel) -> InterpolationOutput:
    return model(i_prev, i_next)


def export_frame(out: InterpolationOutput) -> np.ndarray:
    """Display copy of the interpolated frame clamped to ``[0, 1]``."""
    return clamp(out.I_t, 0.0, 1.0).data


__all__ = [
    "InterpolationModel", "InterpolationOutput", "ModelConfig", "backward_warp", "downscale_flow",
    "export_frame", "loss_rec", "loss_terms", "loss_warp", "model_forward", "occlusion_blend", "total_loss",
]
