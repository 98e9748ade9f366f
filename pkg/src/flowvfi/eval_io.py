"""Image I/O, triplet dataset scanning, checkpoints and quality metrics.

Images live in memory as float64 ``[3, H, W]`` arrays in ``[0, 1]``. PNG and
binary PPM (P6) are read and written through Pillow.

Checkpoint layout (all integers little-endian)::

    b"VFIFTCKP" | u32 version | u32 n | n bytes UTF-8 JSON config
    then until EOF, per tensor:
    u32 name_len | name | u32 rank | rank x u64 dims | prod(dims) x f64
"""

from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .errors import CheckpointError, DimensionError
from .tensor import Tensor

IMAGE_SUFFIXES = {".png": "PNG", ".ppm": "PPM"}

CKPT_MAGIC = b"VFIFTCKP"
CKPT_VERSION = 1

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _image_format(path: Path) -> str:
    fmt = IMAGE_SUFFIXES.get(path.suffix.lower())
    if fmt is None:
        raise OSError(f"{path}: unsupported image format {path.suffix!r} (use .png or .ppm)")
    return fmt


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB image as a ``[3, H, W]`` float array (byte / 255)."""
    path = Path(path)
    _image_format(path)
    try:
        with Image.open(path) as im:
            im.load()
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"{path}: cannot read image ({exc})") from exc
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes(img) -> np.ndarray:
    """Quantize ``[3, H, W]`` values to ``[H, W, 3]`` uint8 via round(clamp(v)*255)."""
    arr = _array(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected a [3, H, W] image, got {arr.shape}")
    q = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def save_image(img, path) -> None:
    path = Path(path)
    fmt = _image_format(path)
    try:
        Image.fromarray(to_bytes(img)).save(path, format=fmt)
    except OSError as exc:
        raise OSError(f"{path}: cannot write image ({exc})") from exc


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical inputs give ``inf``."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    blur = lambda z: gaussian_filter(z, SSIM_SIGMA, mode="reflect", truncate=SSIM_RADIUS / SSIM_SIGMA)
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def ssim_map(a, b) -> np.ndarray:
    """Per-pixel SSIM for each channel of ``[C, H, W]`` inputs (dynamic range 1)."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"ssim expects [C, H, W] or [H, W], got {a.shape}")
    return np.stack([_ssim_map(a[c], b[c]) for c in range(a.shape[0])])


def ssim(a, b) -> float:
    """Mean local SSIM with an 11x11 Gaussian window, averaged over channels."""
    return float(np.mean(ssim_map(a, b)))


# ---------------------------------------------------------------------------
# triplet datasets
# ---------------------------------------------------------------------------

TRIPLET_NAMES = ("im1.png", "im2.png", "im3.png")


@dataclass(frozen=True)
class TripletRecord:
    name: str
    prev_path: Path
    gt_path: Path
    next_path: Path

    def load(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(I_prev, I_gt, I_next)``."""
        frames = tuple(load_image(p) for p in (self.prev_path, self.gt_path, self.next_path))
        if len({f.shape for f in frames}) != 1:
            raise DimensionError(f"{self.name}: frame shapes differ {[f.shape for f in frames]}")
        return frames


def scan_triplets(root) -> list[TripletRecord]:
    """List ``<root>/<seq>/im{1,2,3}.png`` folders in lexicographic order.

    Folders missing a frame are skipped with one ``UserWarning`` each; ``im2``
    is the ground truth.
    """
    root = Path(root)
    try:
        entries = sorted(os.listdir(root))
    except OSError as exc:
        raise OSError(f"{root}: cannot read triplet directory ({exc})") from exc
    records = []
    for name in entries:
        seq = root / name
        if not seq.is_dir():
            continue
        paths = [seq / f for f in TRIPLET_NAMES]
        missing = [p.name for p in paths if not p.is_file()]
        if missing:
            warnings.warn(f"skipping {seq}: missing {', '.join(missing)}", UserWarning, stacklevel=2)
            continue
        records.append(TripletRecord(name, *paths))
    return records


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _named_arrays(params) -> dict[str, np.ndarray]:
    if hasattr(params, "named_parameters"):
        return {k: v.data for k, v in params.named_parameters()}
    return {k: _array(v) for k, v in dict(params).items()}


def save_checkpoint(path, params, cfg: dict | None = None) -> None:
    """Write named float64 tensors plus a JSON config snapshot."""
    arrays = _named_arrays(params)
    cfg_bytes = json.dumps(cfg or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(nb)) + nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into ``(config, {name: array})``."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read checkpoint ({exc})") from exc
    r = _Reader(buf, path)
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version = r.u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block ({exc})") from exc
    tensors: dict[str, np.ndarray] = {}
    while not r.done:
        name = r.take(r.u32()).decode("utf-8", errors="replace")
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return cfg, tensors


def load_checkpoint(path, model=None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint and, if ``model`` is given, validate then load it.

    Every parameter name and shape is checked before anything is assigned, so
    a failed load leaves the model untouched.
    """
    cfg, tensors = read_checkpoint(path)
    if model is not None:
        own = dict(model.named_parameters())
        bad = []
        for name, p in own.items():
            if name not in tensors:
                bad.append(f"{name} (missing)")
            elif tensors[name].shape != p.shape:
                bad.append(f"{name} (checkpoint {tensors[name].shape}, model {p.shape})")
        bad += [f"{name} (unexpected)" for name in tensors if name not in own]
        if bad:
            raise CheckpointError(
                f"{path}: incompatible with current config; first mismatch: {bad[0]}"
                + (f" (+{len(bad) - 1} more)" if len(bad) > 1 else "")
            )
        for name, p in own.items():
            p.data = tensors[name].copy()
    return cfg, tensors


__all__ = [
    "TripletRecord", "load_checkpoint", "load_image", "psnr", "read_checkpoint", "save_checkpoint", "save_image",
    "scan_triplets", "ssim", "ssim_map", "to_bytes",
]
