"""Desk-scale training: AdamW, synthetic triplets, the loop, and gradient checking."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import branches
from .errors import ContractError, TrainingDivergedError
from .pipeline import InterpolationModel, ModelConfig, loss_terms
from .tensor import DTYPE, Tensor, backward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adamw_step(params: Sequence[Tensor], state: OptimState) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ContractError(f"{len(missing)} parameters have no gradient (first index {missing[0]})")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.params = list(params)
        self.state = OptimState(lr, betas[0], betas[1], eps, weight_decay)

    def step(self) -> None:
        adamw_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

MOTION_KINDS = ("translate", "rotate_small", "two_object")


@dataclass
class SyntheticTriplet:
    I_prev: np.ndarray
    I_gt: np.ndarray
    I_next: np.ndarray
    true_flow_prev: np.ndarray
    true_flow_next: np.ndarray
    motion_kind: str

    def reversed(self) -> "SyntheticTriplet":
        return SyntheticTriplet(self.I_next, self.I_gt, self.I_prev, self.true_flow_next, self.true_flow_prev,
                                self.motion_kind)

    def flipped(self, horizontal: bool) -> "SyntheticTriplet":
        axis = -1 if horizontal else -2
        comp = 1 if horizontal else 0

        def fl(f):
            f = np.flip(f, axis=axis).copy()
            f[comp] = -f[comp]
            return f

        return SyntheticTriplet(
            np.flip(self.I_prev, axis=axis).copy(), np.flip(self.I_gt, axis=axis).copy(),
            np.flip(self.I_next, axis=axis).copy(), fl(self.true_flow_prev), fl(self.true_flow_next),
            self.motion_kind,
        )

    def crop(self, top: int, left: int, size: int) -> "SyntheticTriplet":
        s = (slice(None), slice(top, top + size), slice(left, left + size))
        return SyntheticTriplet(self.I_prev[s], self.I_gt[s], self.I_next[s], self.true_flow_prev[s],
                                self.true_flow_next[s], self.motion_kind)


class _Texture:
    """Smooth random RGB field: a sum of oriented sinusoids plus soft-edged discs."""

    def __init__(self, rng: np.random.Generator, extent: float, n_waves: int = 6, n_discs: int = 4):
        self.freq = rng.uniform(-1, 1, size=(n_waves, 2))
        self.freq /= np.linalg.norm(self.freq, axis=1, keepdims=True)
        self.freq *= (2 * np.pi / rng.uniform(6.0, 18.0, size=n_waves))[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amp = rng.uniform(0.5, 1.0, size=(3, n_waves))
        self.amp *= 0.3 / self.amp.sum(axis=1, keepdims=True)
        self.disc_c = rng.uniform(0, extent, size=(n_discs, 2))
        self.disc_r = rng.uniform(extent / 10, extent / 5, size=n_discs)
        self.disc_col = rng.uniform(-0.2, 0.2, size=(n_discs, 3))
        self.base = rng.uniform(0.35, 0.65, size=3)

    def __call__(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        out = np.empty((3,) + y.shape)
        arg = y[..., None] * self.freq[:, 0] + x[..., None] * self.freq[:, 1]
        for ch in range(3):
            out[ch] = self.base[ch] + (self.amp[ch] * np.sin(arg + self.phase[ch])).sum(axis=-1)
        for (cy, cx), r, col in zip(self.disc_c, self.disc_r, self.disc_col):
            m = _soft_disc(y, x, cy, cx, r)
            out += m[None] * col[:, None, None]
        return np.clip(out, 0.0, 1.0)


def _soft_disc(y, x, cy, cx, r, edge: float = 0.6):
    d = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    return 1.0 / (1.0 + np.exp(-(r - d) / edge))


def gen_synthetic(seed: int, motion_kind: str = "translate", size: int = 64, motion=None) -> SyntheticTriplet:
    """Render a deterministic triplet at times -1, 0, +1 with analytic flows.

    ``motion`` is the displacement between the previous and next frames:
    ``(dy, dx)`` pixels for ``translate`` (default ``(2, 0)``), a total angle
    in degrees for ``rotate_small`` (default 4), and a speed in pixels for
    ``two_object`` (default 6; directions drawn from the seed).
    Flows point from each pixel of the middle frame to its source location.
    """
    if motion_kind not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {motion_kind!r}; expected one of {MOTION_KINDS}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(size, dtype=DTYPE), np.arange(size, dtype=DTYPE), indexing="ij")
    tex = _Texture(rng, size)

    if motion_kind == "translate":
        dy, dx = (2.0, 0.0) if motion is None else (float(motion[0]), float(motion[1]))
        frames = [tex(yy - tau * dy / 2, xx - tau * dx / 2) for tau in (-1, 0, 1)]
        fp = np.stack([np.full_like(yy, -dy / 2), np.full_like(xx, -dx / 2)])
        return SyntheticTriplet(frames[0], frames[1], frames[2], fp, -fp, motion_kind)

    if motion_kind == "rotate_small":
        half = np.deg2rad(4.0 if motion is None else float(motion)) / 2
        c = (size - 1) / 2.0

        def rot(tau):
            a = -tau * half
            ca, sa = np.cos(a), np.sin(a)
            ry = c + ca * (yy - c) - sa * (xx - c)
            rx = c + sa * (yy - c) + ca * (xx - c)
            return ry, rx

        frames = [tex(*rot(tau)) for tau in (-1, 0, 1)]
        flows = []
        for tau in (-1, 1):
            # content at p (t=0) sits at R(tau*half)(p - c) + c in frame tau
            a = tau * half
            ca, sa = np.cos(a), np.sin(a)
            sy = c + ca * (yy - c) - sa * (xx - c)
            sx = c + sa * (yy - c) + ca * (xx - c)
            flows.append(np.stack([sy - yy, sx - xx]))
        return SyntheticTriplet(frames[0], frames[1], frames[2], flows[0], flows[1], motion_kind)

    speed = 6.0 if motion is None else float(motion)
    objs = []
    for _ in range(2):
        ang = rng.uniform(0, 2 * np.pi)
        vel = speed * np.array([np.sin(ang), np.cos(ang)])
        c0 = rng.uniform(size * 0.3, size * 0.7, size=2)
        r = rng.uniform(size * 0.12, size * 0.2)
        objs.append((_Texture(rng, size, n_discs=1), c0, vel, r))

    def render(tau):
        img = tex(yy, xx)
        owner = np.full(yy.shape, -1)
        for k in reversed(range(len(objs))):
            otex, c0, vel, r = objs[k]
            cy, cx = c0 + tau * vel / 2
            m = _soft_disc(yy, xx, cy, cx, r)
            img = m[None] * otex(yy - tau * vel[0] / 2, xx - tau * vel[1] / 2) + (1 - m[None]) * img
            owner[m > 0.5] = k
        return img, owner

    frames = [render(tau)[0] for tau in (-1, 0, 1)]
    owner = render(0)[1]
    fp = np.zeros((2, size, size))
    for k, (_, _, vel, _) in enumerate(objs):
        sel = owner == k
        fp[0][sel] = -vel[0] / 2
        fp[1][sel] = -vel[1] / 2
    return SyntheticTriplet(frames[0], frames[1], frames[2], fp, -fp, motion_kind)


def synthetic_dataset(n: int, motion_kind: str = "translate", size: int = 64, seed: int = 0, motion=None):
    return [gen_synthetic(seed + i, motion_kind, size, motion) for i in range(n)]


def augment(tri: SyntheticTriplet, rng: np.random.Generator) -> SyntheticTriplet:
    """Random horizontal/vertical flip and temporal reversal."""
    if rng.random() < 0.5:
        tri = tri.flipped(horizontal=True)
    if rng.random() < 0.5:
        tri = tri.flipped(horizontal=False)
    if rng.random() < 0.5:
        tri = tri.reversed()
    return tri


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    warp: float
    rec: float
    total: float


def _batch(samples: Sequence[SyntheticTriplet]):
    return tuple(np.stack([getattr(s, k) for s in samples]) for k in ("I_prev", "I_gt", "I_next"))


def train_loop(model: InterpolationModel | ModelConfig, dataset: Sequence, steps: int, *, batch_size: int = 2,
               lr: float = 1e-4, weight_decay: float = 1e-4, augment_data: bool = True, crop: int | None = None,
               seed: int = 0, optimizer: AdamW | None = None, callback: Callable | None = None):
    """Optimise ``model`` on ``dataset`` for ``steps`` AdamW steps.

    Returns ``(model, history)`` with one :class:`LossRecord` per step. Batch
    sampling, cropping and augmentation draw from a generator seeded with
    ``seed`` so runs are reproducible.
    """
    if isinstance(model, ModelConfig):
        model = InterpolationModel(model)
    cfg = model.cfg
    params = model.parameters()
    opt = optimizer or AdamW(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history: list[LossRecord] = []
    if steps > 0 and not dataset:
        raise ValueError("cannot train on an empty dataset")
    for step in range(steps):
        picks = rng.integers(0, len(dataset), size=batch_size)
        samples = []
        for i in picks:
            tri = dataset[int(i)]
            if crop is not None and crop < tri.I_gt.shape[-1]:
                top, left = rng.integers(0, tri.I_gt.shape[-2] - crop + 1), rng.integers(0, tri.I_gt.shape[-1] - crop + 1)
                tri = tri.crop(int(top), int(left), crop)
            if augment_data:
                tri = augment(tri, rng)
            samples.append(tri)
        i_prev, i_gt, i_next = _batch(samples)
        opt.zero_grad()
        out = model(i_prev, i_next)
        terms = loss_terms(Tensor(i_gt), out, cfg)
        rec = LossRecord(step, terms["warp"].item(), terms["rec"].item(), terms["total"].item())
        if not all(math.isfinite(v) for v in (rec.warp, rec.rec, rec.total)):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: warp={rec.warp} rec={rec.rec} total={rec.total}"
            )
        backward(terms["total"])
        opt.step()
        history.append(rec)
        if step % 50 == 0:
            log.debug("step %d total=%.6f warp=%.6f rec=%.6f", step, rec.total, rec.warp, rec.rec)
        if callback is not None:
            callback(rec)
    return model, history


def write_history_csv(history: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_warp", "L_rec", "total"])
        for r in history:
            w.writerow([r.step, repr(r.warp), repr(r.rec), repr(r.total)])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; below ``floor`` the error is effectively absolute."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple[int, tuple[int, ...], float, float] | None = None
    skipped: int = 0  # coordinates whose +-eps step changed a branch


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, max_coords: int = 200,
               seed: int = 0, analytic_hook: Callable[[np.ndarray], np.ndarray] | None = None,
               skip_branch_changes: bool = True, floor: float = 1e-8) -> GradCheckResult:
    """Compare analytic gradients of ``f`` with central differences.

    Coordinates are drawn uniformly without replacement over all entries of
    ``params`` until ``max_coords`` have been compared. With
    ``skip_branch_changes`` a coordinate is replaced by the next draw when
    either perturbed forward pass takes a different discrete branch (ReLU
    sign, window placement, bilinear cell, ...) than the unperturbed one:
    the difference quotient there straddles a kink or jump and is not a
    derivative. ``analytic_hook`` may transform the analytic gradients first
    (used to confirm the checker catches a wrong gradient).
    """
    params = list(params)
    for p in params:
        p.grad = None
    with branches.recording() as base:
        loss = f()
    backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    if analytic_hook is not None:
        grads = [analytic_hook(g) for g in grads]
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst_err, worst = 0.0, None
    checked = skipped = 0

    def probe():
        with branches.recording() as rec:
            val = f().item()
        return val, rec

    for k in order:
        if checked >= max_coords:
            break
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = np.unravel_index(int(k - offsets[pi]), params[pi].shape)
        p = params[pi]
        orig = p.data[idx]
        p.data[idx] = orig + eps
        fp, rec_p = probe()
        p.data[idx] = orig - eps
        fm, rec_m = probe()
        p.data[idx] = orig
        if skip_branch_changes and (rec_p != base or rec_m != base):
            skipped += 1
            continue
        checked += 1
        num = (fp - fm) / (2 * eps)
        ana = float(grads[pi][idx])
        err = relative_error(ana, num, floor)
        if err >= worst_err:
            worst_err, worst = err, (pi, tuple(int(i) for i in idx), ana, num)
    for p in params:
        p.grad = None
    return GradCheckResult(worst_err, checked, worst, skipped)


# Central differences of the full model carry ~1e-11 of roundoff, so
# gradients smaller than this are compared absolutely (error <= tol * floor).
MODEL_GRAD_FLOOR = 1e-6

TINY_CONFIG = dict(L=3, heads=2, attn_width=4, feature_channels=2, encoder_channels=(2, 2, 2, 2), num_scales=3)


def tiny_model_grad_check(seed: int = 0, size: int = 16, max_coords: int = 200, eps: float = 1e-5,
                          init_scale: float = 0.1, analytic_hook=None, floor: float = MODEL_GRAD_FLOOR,
                          **overrides) -> GradCheckResult:
    """Finite-difference check of ``total_loss`` through the whole model.

    Every zero-initialised tensor (heads and biases alike) is replaced by
    small random weights first: with zero flow every warp sample lands on an integer pixel, where bilinear
    interpolation is not differentiable.
    """
    cfg = ModelConfig(**{**TINY_CONFIG, "seed": seed, **overrides})
    model = InterpolationModel(cfg)
    rng = np.random.default_rng(seed + 1)
    for p in model.parameters():
        if not p.data.any():
            p.data = rng.normal(0.0, init_scale, size=p.shape)
    i_prev, i_gt, i_next = (rng.random((1, 3, size, size)) for _ in range(3))
    gt = Tensor(i_gt)

    def f():
        return loss_terms(gt, model(i_prev, i_next), cfg)["total"]

    return grad_check(f, model.parameters(), eps=eps, max_coords=max_coords, seed=seed,
                      analytic_hook=analytic_hook, floor=floor)


__all__ = [
    "MODEL_GRAD_FLOOR", "TINY_CONFIG", "tiny_model_grad_check", "AdamW", "GradCheckResult", "LossRecord", "MOTION_KINDS", "OptimState", "SyntheticTriplet", "adamw_step",
    "augment", "gen_synthetic", "grad_check", "relative_error", "synthetic_dataset", "train_loop",
    "write_history_csv",
]
