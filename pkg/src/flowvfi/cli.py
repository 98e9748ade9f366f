"""``flowvfi`` command line: interpolate, train, eval, check-grad, bench-complexity.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable/mismatched images, bad checkpoints), 3 verification failure.

Model configuration comes from, in increasing priority: the checkpoint's
stored config (when ``--ckpt`` is given), a JSON file passed with
``--config`` whose keys are ``ModelConfig`` field names, and explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import complexity
from .errors import CheckpointError, ConfigurationError, DimensionError, TrainingDivergedError
from .eval_io import load_checkpoint, load_image, psnr, save_checkpoint, save_image, scan_triplets, ssim
from .flow_attention import AttnVariant
from .pipeline import InterpolationModel, InterpolationOutput, ModelConfig, export_frame
from .tensor import no_grad
from .training import (
    MOTION_KINDS, SyntheticTriplet, synthetic_dataset, tiny_model_grad_check, train_loop, write_history_csv,
)

log = logging.getLogger("flowvfi")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
MULTIPLE = 16


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="JSON file with ModelConfig keys")
    g.add_argument("--window", dest="L", type=int, help="attention window size L (odd)")
    g.add_argument("--heads", type=int)
    g.add_argument("--attn-width", type=int)
    g.add_argument("--feature-channels", type=int)
    g.add_argument("--encoder-channels", type=_int_tuple, help="four comma-separated widths")
    g.add_argument("--num-scales", type=int)
    g.add_argument("--variant", choices=[v.value for v in AttnVariant])
    g.add_argument("--seed", type=int, default=None)


FLAG_KEYS = ("L", "heads", "attn_width", "feature_channels", "encoder_channels", "num_scales", "variant", "seed")


def _read_config_file(path: Path) -> dict:
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return data


def resolve_config(args, base: dict | None = None) -> ModelConfig:
    d = dict(base or {})
    if getattr(args, "config", None) is not None:
        d.update(_read_config_file(args.config))
    for key in FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    try:
        return ModelConfig.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def build_model(args) -> InterpolationModel:
    """Model from ``--ckpt`` (validated and loaded) or a fresh initialisation."""
    ckpt = getattr(args, "ckpt", None)
    if ckpt is None:
        return InterpolationModel(resolve_config(args))
    ckpt = Path(ckpt)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    stored, _ = load_checkpoint(ckpt)
    model = InterpolationModel(resolve_config(args, stored.get("model", {})))
    load_checkpoint(ckpt, model)
    return model


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------

def pad_to_multiple(img: np.ndarray, multiple: int = MULTIPLE) -> np.ndarray:
    """Reflect-pad the bottom/right of ``[..., H, W]`` up to a multiple of ``multiple``."""
    h, w = img.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return img
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="reflect")


def interpolate_pair(model: InterpolationModel, prev: np.ndarray, nxt: np.ndarray):
    """Run the model on ``[3, H, W]`` frames of any size.

    Returns ``(frame, output, padded)`` where ``frame`` is the clamped
    ``[3, H, W]`` result cropped back to the input size.
    """
    if prev.shape != nxt.shape:
        raise DimensionError(f"frame sizes differ: {prev.shape[1:]} vs {nxt.shape[1:]}")
    h, w = prev.shape[-2:]
    padded = (h % MULTIPLE, w % MULTIPLE) != (0, 0)
    a, b = pad_to_multiple(prev), pad_to_multiple(nxt)
    try:
        model.cfg.check_input(*a.shape[-2:])
    except ConfigurationError as exc:
        raise DimensionError(str(exc)) from exc
    with no_grad():
        out = model(a[None], b[None])
    return export_frame(out)[0, :, :h, :w], out, padded


def flow_to_rgb(flow: np.ndarray) -> np.ndarray:
    """HSV wheel: hue = direction, saturation = magnitude / per-image max, value = 1."""
    dy, dx = flow[0], flow[1]
    mag = np.hypot(dy, dx)
    hue = (np.arctan2(dy, dx) % (2 * np.pi)) / (2 * np.pi)
    sat = mag / mag.max() if mag.max() > 0 else np.zeros_like(mag)
    hsv = np.stack([hue, sat, np.ones_like(mag)], axis=-1)
    h, w = mag.shape
    raw = np.ascontiguousarray(np.rint(hsv * 255).astype(np.uint8)).tobytes()
    rgb = Image.frombytes("HSV", (w, h), raw).convert("RGB")
    return np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0


def gray_to_rgb(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.clip(x, 0.0, 1.0)[None], 3, axis=0)


def residual_heatmap(delta: np.ndarray) -> np.ndarray:
    """Signed channel-mean residual: red positive, blue negative, white zero; scaled by the max magnitude."""
    m = delta.mean(axis=0)
    peak = np.abs(m).max()
    s = m / peak if peak > 0 else np.zeros_like(m)
    pos, neg = np.clip(s, 0, 1), np.clip(-s, 0, 1)
    return np.stack([1 - neg, 1 - pos - neg, 1 - pos])


def dump_intermediates(out: InterpolationOutput, h: int, w: int, directory: Path, suffix: str = ".png") -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    crop = (slice(None), slice(0, h), slice(0, w))
    images = {
        "warped_prev": np.clip(out.warped_prev.data[0], 0, 1),
        "warped_next": np.clip(out.warped_next.data[0], 0, 1),
        "blend": np.clip(out.O_t.data[0], 0, 1),
        "occlusion": gray_to_rgb(out.occlusion.data[0, 0]),
        "flow_prev": flow_to_rgb(out.flows[0].data[0][crop]),
        "flow_next": flow_to_rgb(out.flows[1].data[0][crop]),
        "residual": residual_heatmap(out.delta.data[0][crop]),
    }
    written = []
    for name, img in images.items():
        path = directory / f"{name}{suffix}"
        save_image(img[crop], path)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_interpolate(args) -> int:
    model = build_model(args)
    prev, nxt = load_image(args.prev), load_image(args.next)
    frame, out, padded = interpolate_pair(model, prev, nxt)
    h, w = frame.shape[-2:]
    if padded:
        log.warning("%dx%d is not a multiple of %d; reflect-padded to %dx%d and cropped back",
                    h, w, MULTIPLE, out.I_t.shape[-2], out.I_t.shape[-1])
    save_image(frame, args.out)
    if args.dump_intermediates is not None:
        dump_intermediates(out, h, w, args.dump_intermediates, Path(args.out).suffix or ".png")
    print(f"wrote {args.out}")
    return EXIT_OK


class _DirTriplet(SyntheticTriplet):
    @classmethod
    def from_record(cls, rec):
        prev, gt, nxt = rec.load()
        zero = np.zeros((2,) + prev.shape[1:])
        return cls(prev, gt, nxt, zero, zero.copy(), "dir")


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    seed = cfg.seed
    if args.data == "synthetic":
        data = synthetic_dataset(args.num_samples, args.motion, args.size, seed=seed)
    else:
        root = Path(args.data)
        if not root.is_dir():
            raise FileNotFoundError(f"training data directory not found: {root}")
        data = [_DirTriplet.from_record(r) for r in scan_triplets(root)]
        if not data:
            raise DimensionError(f"no complete triplets under {root}")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    model = InterpolationModel(cfg)
    model, history = train_loop(model, data, args.steps, batch_size=args.batch_size, lr=args.lr,
                                weight_decay=args.weight_decay, augment_data=not args.no_augment, crop=args.crop,
                                seed=seed)
    save_checkpoint(args.ckpt_out, model, {"model": cfg.to_dict(), "steps": args.steps})
    loss_csv = args.loss_csv or Path(args.ckpt_out).with_suffix(".csv")
    write_history_csv(history, loss_csv)
    if history:
        print(f"step 0 total={history[0].total:.6g}  step {history[-1].step} total={history[-1].total:.6g}")
    print(f"wrote {args.ckpt_out} and {loss_csv}")
    return EXIT_OK


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


def cmd_eval(args) -> int:
    root = Path(args.data)
    if not root.is_dir():
        raise FileNotFoundError(f"evaluation directory not found: {root}")
    model = build_model(args)
    records = scan_triplets(root)
    rows = []
    for rec in records:
        prev, gt, nxt = rec.load()
        frame, _, _ = interpolate_pair(model, prev, nxt)
        rows.append((rec.name, psnr(frame, gt), ssim(frame, gt)))
    if not records:
        log.warning("no complete triplets under %s; nothing evaluated", root)

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["sequence", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, _fmt(p), _fmt(s)])
        if rows:
            finite = [p for _, p, _ in rows if math.isfinite(p)]
            # identical frames give the inf sentinel; the mean covers finite rows only
            mean_p = float(np.mean(finite)) if finite else math.inf
            w.writerow(["mean", _fmt(mean_p), _fmt(float(np.mean([s for _, _, s in rows])))])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def cmd_check_grad(args) -> int:
    hook = (lambda g: g * 1.5 + 1e-3) if args.corrupt_grad else None
    res = tiny_model_grad_check(seed=args.seed, max_coords=args.coords, eps=args.eps, analytic_hook=hook)
    ok = res.checked > 0 and res.max_rel_error < args.tol
    print(f"checked {res.checked} coordinates ({res.skipped} skipped at kinks); "
          f"max relative error {res.max_rel_error:.3e} (tol {args.tol:g})")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench_complexity(args) -> int:
    rep = complexity.verify_inequalities()
    scaling = complexity.flow_attention_scaling(args.sides, args.channels, args.window)
    rows = complexity.complexity_rows(args.sides, args.channels, args.window)
    if args.out:
        complexity.write_rows_csv(rows, args.out)
    else:
        complexity.write_rows_csv(rows, sys.stdout)
    ok = rep.ok and scaling.r2 > 0.999
    print(f"conv inequality: {rep.conv_checked} points, {len(rep.conv_violations)} violations, "
          f"equality at {rep.conv_equalities}", file=sys.stderr)
    print(f"global inequality: {rep.global_checked} points, {len(rep.global_violations)} violations", file=sys.stderr)
    print(f"flow attention ops = {scaling.slope:.1f} * H*W (R^2 = {scaling.r2:.6f})", file=sys.stderr)
    print("PASS" if ok else "FAIL", file=sys.stderr)
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowvfi", description="Flow-guided local attention frame interpolation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("interpolate", help="synthesize the middle frame of a pair")
    s.add_argument("prev", type=Path)
    s.add_argument("next", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--ckpt", type=Path, help="checkpoint (default: freshly initialised model)")
    s.add_argument("--dump-intermediates", type=Path, metavar="DIR")
    _add_model_flags(s)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("train", help="desk-scale training")
    s.add_argument("--data", default="synthetic", help="'synthetic' or a triplet directory")
    s.add_argument("--motion", choices=MOTION_KINDS, default="translate")
    s.add_argument("--num-samples", type=int, default=1)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--batch-size", type=int, default=1)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--weight-decay", type=float, default=1e-4)
    s.add_argument("--crop", type=int)
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--ckpt-out", type=Path, required=True)
    s.add_argument("--loss-csv", type=Path)
    _add_model_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="PSNR/SSIM over a triplet directory")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--ckpt", type=Path)
    s.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    _add_model_flags(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("check-grad", help="finite-difference check of the tiny model")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("bench-complexity", help="cost models, inequality grid, op-count scaling")
    s.add_argument("--out", type=Path, help="CSV path (default: stdout)")
    s.add_argument("--sides", type=_int_tuple, default=(16, 32, 64, 128))
    s.add_argument("--channels", type=int, default=16)
    s.add_argument("--window", type=int, default=5)
    s.set_defaults(func=cmd_bench_complexity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as exc:
        print(f"flowvfi: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, DimensionError, TrainingDivergedError) as exc:
        print(f"flowvfi: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
