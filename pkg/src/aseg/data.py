"""Image and mask ingestion, resizing, synthetic data and heatmap export.

Images live on disk as binary PGM (P5, maxval 255). A dataset directory
pairs ``<id>.pgm`` with ``<id>_mask.pgm``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = (128, 128)
MASK_SUFFIX = "_mask"


class PGMError(ValueError):
    """Malformed or unsupported PGM input."""


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ay: float
    ax: float
    theta: float

    def level(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Ellipse level-set value at pixel centers; <= 1 is inside."""
        dy = rows - self.cy
        dx = cols - self.cx
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.ax) ** 2 + (v / self.ay) ** 2


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    ellipses: tuple[Ellipse, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")
        if not np.isfinite(self.image).all() or self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"sample {self.id}: image values must be finite and in [0, 1]")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.id}: mask must be binary")


# --------------------------------------------------------------------------- #
# PGM
# --------------------------------------------------------------------------- #

def _header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError(f"truncated PGM header at byte {start}")
    return data[start:pos], pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode P5 bytes into a uint8 (H, W) array."""
    if data[:2] != b"P5":
        raise PGMError(f"not a binary PGM: magic {data[:2]!r} at byte 0 (expected b'P5')")
    pos = 2
    fields = []
    for what in ("width", "height", "maxval"):
        offset = pos
        tok, pos = _header_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PGMError(f"bad {what} {tok!r} at byte {offset}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise PGMError(f"unsupported maxval {maxval} (only 255) in header ending at byte {pos}")
    if width < 1 or height < 1:
        raise PGMError(f"invalid size {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    need = width * height
    if len(data) - pos < need:
        raise PGMError(f"truncated payload: need {need} bytes from byte {pos}, file has {len(data) - pos}")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("encode_pgm expects a 2-D uint8 array")
    h, w = arr.shape
    return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()


def load_image_pgm(path) -> np.ndarray:
    """Read a binary PGM as float64 values in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return decode_pgm(data).astype(np.float64) / 255.0
    except PGMError as exc:
        raise PGMError(f"{path}: {exc}") from None


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image_pgm(img: np.ndarray, path) -> None:
    """Write a [0, 1] image as 8-bit P5."""
    _write_bytes(path, encode_pgm(quantize(img)))


def _write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


# --------------------------------------------------------------------------- #
# Resizing and binarization
# --------------------------------------------------------------------------- #

def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    scale = n_in / n_out
    return np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (align_corners=False)."""
    img = np.asarray(img, dtype=np.float64)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape
    if h < 1 or w < 1:
        raise ValueError("source image is empty")
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = _source_coords(h, out_h)
    xs = _source_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = img.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return np.asarray(img)[rows][:, cols]


def binarize_mask(img: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(img) >= threshold).astype(np.uint8)


# --------------------------------------------------------------------------- #
# Synthetic ultrasound-like data
# --------------------------------------------------------------------------- #

def _random_ellipse(rng: np.random.Generator, h: int, w: int) -> Ellipse:
    s = min(h, w) / 128.0
    ay = rng.uniform(9.0, 24.0) * s
    ax = rng.uniform(9.0, 24.0) * s
    margin = max(ay, ax) + 6.0 * s
    cy = rng.uniform(margin, h - margin)
    cx = rng.uniform(margin, w - margin)
    return Ellipse(cy, cx, ay, ax, rng.uniform(0.0, math.pi))


def synth_sample(rng: np.random.Generator, sample_id: str, size=IMAGE_SIZE) -> Sample:
    """One speckled image with 1-2 dark, bright-rimmed ellipses.

    The mask marks exactly the pixel centers inside the ellipses.
    """
    h, w = size
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    ellipses = tuple(_random_ellipse(rng, h, w) for _ in range(rng.integers(1, 3)))
    tissue = 0.35 + 0.1 * np.sin(rows / h * math.pi * rng.uniform(0.5, 2.0))
    mask = np.zeros((h, w), dtype=bool)
    rim = np.zeros((h, w), dtype=bool)
    for e in ellipses:
        lv = e.level(rows, cols)
        inside = lv <= 1.0
        mask |= inside
        rim |= (lv > 1.0) & (lv <= 1.45)
    img = tissue.copy()
    img[rim & ~mask] = 0.85
    img[mask] = 0.08
    speckle = rng.gamma(shape=4.0, scale=0.25, size=(h, w))  # unit mean
    img = np.clip(img * speckle, 0.0, 1.0)
    return Sample(sample_id, img, mask.astype(np.uint8), ellipses)


def synth_dataset(n: int, seed: int = 0, size=IMAGE_SIZE) -> list[Sample]:
    if n < 1:
        raise ValueError("synthetic dataset needs n >= 1")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, f"synth_{i:04d}", size) for i in range(n)]


def save_dataset_dir(samples, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image_pgm(s.image, directory / f"{s.id}.pgm")
        save_image_pgm(s.mask.astype(np.float64), directory / f"{s.id}{MASK_SUFFIX}.pgm")


def load_dataset_dir(directory, size=IMAGE_SIZE) -> list[Sample]:
    """Load ``<id>.pgm`` / ``<id>_mask.pgm`` pairs, resized to ``size``.

    Images are resized bilinearly, masks by nearest neighbour.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    samples = []
    for img_path in sorted(directory.glob("*.pgm")):
        stem = img_path.stem
        if stem.endswith(MASK_SUFFIX):
            continue
        mask_path = directory / f"{stem}{MASK_SUFFIX}.pgm"
        if not mask_path.exists():
            raise FileNotFoundError(f"image {img_path} has no mask {mask_path.name}")
        img = resize_bilinear(load_image_pgm(img_path), *size)
        mask = binarize_mask(resize_nearest(load_image_pgm(mask_path), *size))
        samples.append(Sample(stem, np.clip(img, 0.0, 1.0), mask))
    if not samples:
        raise FileNotFoundError(f"no image/mask pairs found in {directory}")
    return samples


# --------------------------------------------------------------------------- #
# Heatmaps
# --------------------------------------------------------------------------- #

def heatmap_bytes(attn: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255; a constant map becomes mid-gray 128."""
    a = np.asarray(attn, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("heatmap values must be finite")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def save_heatmap(attn: np.ndarray, path) -> None:
    _write_bytes(path, encode_pgm(heatmap_bytes(attn)))


def stack_samples(samples, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, H, W) image and mask arrays."""
    x = np.stack([s.image for s in samples])[:, None].astype(dtype)
    y = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    return x, y


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
