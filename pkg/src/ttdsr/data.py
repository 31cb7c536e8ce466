"""Image I/O, YCbCr conversion, bicubic degradation, augmentation and patches."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".bmp")


@dataclass
class ImagePlane:
    """Single-channel float image with a declared value range."""

    pixels: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"ImagePlane needs a 2-D array, got shape {self.pixels.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __array__(self, dtype=None, copy=None):
        return self.pixels if dtype is None else self.pixels.astype(dtype)

    def clipped(self) -> "ImagePlane":
        lo, hi = self.value_range
        return ImagePlane(np.clip(self.pixels, lo, hi), self.value_range)


@dataclass
class TrainingPair:
    lr: np.ndarray
    hr: np.ndarray
    scale: int


# ---------------------------------------------------------------- colour

# ITU-R BT.601, full range (JFIF)
_RGB2YCC = np.array([[0.299, 0.587, 0.114],
                     [-0.168735892, -0.331264108, 0.5],
                     [0.5, -0.418687589, -0.081312411]])
_YCC_OFFSET = np.array([0.0, 128.0, 128.0])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def rgb_to_ycbcr(rgb) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(H, W, 3) RGB in [0, 255] -> float Y, Cb, Cr planes in [0, 255]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {rgb.shape}")
    ycc = rgb @ _RGB2YCC.T + _YCC_OFFSET
    return ycc[..., 0], ycc[..., 1], ycc[..., 2]


def ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    """Inverse of :func:`rgb_to_ycbcr`, rounded and clipped to uint8."""
    ycc = np.stack([np.asarray(c, dtype=np.float64) for c in (y, cb, cr)], axis=-1)
    rgb = (ycc - _YCC_OFFSET) @ _YCC2RGB.T
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- I/O

def read_image(path: str | Path) -> np.ndarray:
    """Read PNG/BMP as uint8, (H, W) for grayscale or (H, W, 3) for colour."""
    with Image.open(path) as im:
        gray = im.mode in ("1", "L", "LA", "I", "I;16", "F")
        arr = np.asarray(im.convert("L" if gray else "RGB"))
    if arr.ndim == 3 and np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2]):
        arr = arr[..., 0]
    return np.ascontiguousarray(arr)


def write_image(path: str | Path, pixels, value_range: tuple[float, float] = (0.0, 255.0)) -> None:
    """Write a 2-D plane or (H, W, 3) array as PNG, rescaling from ``value_range``."""
    arr = np.asarray(pixels, dtype=np.float64)
    lo, hi = value_range
    arr = np.clip(np.rint((arr - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def luminance(img: np.ndarray) -> np.ndarray:
    """Y plane in [0, 1]. Grayscale input is taken as Y directly."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.float64) / 255.0
    return rgb_to_ycbcr(img)[0] / 255.0


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def read_manifest(path: str | Path) -> list[Path]:
    """Image paths listed one per line; blank lines and ``#`` comments skipped.
    Relative paths resolve against the manifest's directory."""
    base = Path(path).parent
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def is_validation(path: str | Path, val_percent: int = 20) -> bool:
    """Deterministic train/val assignment from a hash of the path string."""
    digest = hashlib.sha256(str(path).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % 100 < val_percent


def split_manifest(paths: Iterable[str | Path], val_percent: int = 20) -> tuple[list[Path], list[Path]]:
    train, val = [], []
    for p in paths:
        (val if is_validation(p, val_percent) else train).append(Path(p))
    return train, val


# ---------------------------------------------------------------- bicubic

def keys_kernel(t, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    return np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))


def _resize_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation matrix: centre-aligned, clamped edges."""
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    for off in (-1, 0, 1, 2):
        idx = np.clip(base + off, 0, src - 1)
        np.add.at(m, (rows, idx), keys_kernel(frac - off))
    return m


def bicubic_resize(img, target_h: int, target_w: int) -> np.ndarray:
    """Separable Keys (a = -0.5) bicubic resampling without antialiasing.

    Output pixel ``i`` samples source coordinate ``(i + 0.5) * src / dst - 0.5``;
    taps outside the image are clamped to the edge.
    """
    img = np.asarray(img, dtype=np.float64)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target size must be positive, got {target_h}x{target_w}")
    h, w = img.shape
    if (h, w) == (target_h, target_w):
        return img.copy()
    return _resize_matrix(h, target_h) @ img @ _resize_matrix(w, target_w).T


def bicubic_sample(img, ys, xs) -> np.ndarray:
    """Sample ``img`` at arbitrary float coordinates (row, col), clamped edges."""
    img = np.asarray(img, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    out = np.zeros(np.broadcast(ys, xs).shape)
    for dy in (-1, 0, 1, 2):
        wy = keys_kernel(fy - dy)
        yi = np.clip(y0 + dy, 0, h - 1)
        for dx in (-1, 0, 1, 2):
            out += wy * keys_kernel(fx - dx) * img[yi, np.clip(x0 + dx, 0, w - 1)]
    return out


def crop_to_multiple(img, scale: int) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[:2]
    return img[:h - h % scale, :w - w % scale]


def degrade(hr, scale: int, clip: tuple[float, float] | None = (0.0, 1.0)) -> TrainingPair:
    """Bicubic down by ``scale`` then back up to the (cropped) HR size."""
    if int(scale) != scale or scale < 1:
        raise ValueError(f"scale must be a positive integer, got {scale!r}")
    hr = crop_to_multiple(np.asarray(hr, dtype=np.float64), scale)
    h, w = hr.shape
    if scale == 1:
        return TrainingPair(hr.copy(), hr, 1)
    small = bicubic_resize(hr, h // scale, w // scale)
    lr = bicubic_resize(small, h, w)
    if clip is not None:
        lr = np.clip(lr, *clip)
    return TrainingPair(lr, hr, int(scale))


# ---------------------------------------------------------------- augmentation

def _inscribed_rect(h: int, w: int, angle: float) -> tuple[int, int]:
    """Largest axis-aligned rectangle inside an h x w rectangle rotated by ``angle``."""
    sin_a, cos_a = abs(math.sin(angle)), abs(math.cos(angle))
    long_side, short_side = max(h, w), min(h, w)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        wr, hr = (x / sin_a, x / cos_a) if w >= h else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return max(1, int(math.floor(hr + 1e-9))), max(1, int(math.floor(wr + 1e-9)))


def rotate(img, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise. Multiples of 90 degrees are exact; other
    angles are bicubic-resampled and cropped to the inscribed rectangle."""
    img = np.asarray(img, dtype=np.float64)
    quarter, rem = divmod(degrees % 360.0, 90.0)
    if abs(rem) < 1e-12:
        return np.rot90(img, int(quarter)).copy()
    h, w = img.shape
    theta = math.radians(degrees)
    oh, ow = _inscribed_rect(h, w, theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
    yy -= (oh - 1) / 2.0
    xx -= (ow - 1) / 2.0
    # inverse map output -> source for a counter-clockwise rotation (row axis points down)
    c, s = math.cos(theta), math.sin(theta)
    src_x = c * xx - s * yy + cx
    src_y = s * xx + c * yy + cy
    return bicubic_sample(img, src_y, src_x)


ROTATIONS = (45, 90, 135, 180, 225)
DOWNSCALES = (0.6, 0.7, 0.8, 0.9)


def augment(img) -> list[np.ndarray]:
    """Original, 5 rotations, horizontal and vertical flips, 4 downscales."""
    img = np.asarray(img, dtype=np.float64)
    out = [img.copy()]
    out += [rotate(img, a) for a in ROTATIONS]
    out += [img[:, ::-1].copy(), img[::-1, :].copy()]
    h, w = img.shape
    for f in DOWNSCALES:
        out.append(bicubic_resize(img, max(1, round(h * f)), max(1, round(w * f))))
    if img.min() >= 0.0 and img.max() <= 1.0:
        # resampling overshoot must not leave the unit range
        out = [np.clip(v, 0.0, 1.0) for v in out]
    return out


# ---------------------------------------------------------------- patches

def extract_patches(images: Sequence[np.ndarray], patch: int = 32, stride: int = 16,
                    scale: int = 3, seed: int = 0) -> list[TrainingPair]:
    """Grid of HR patches, each degraded on its own, in seeded shuffled order.

    The patch side is rounded down to a multiple of ``scale`` so every patch
    degrades without cropping. Images smaller than a patch are skipped.
    """
    if patch < 16:
        raise ValueError(f"patch must be >= 16, got {patch}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    side = patch - patch % scale
    pairs: list[TrainingPair] = []
    for n, img in enumerate(images):
        img = np.asarray(img, dtype=np.float64)
        h, w = img.shape
        if h < side or w < side:
            log.warning("image %d (%dx%d) is smaller than the %d px patch; skipped", n, h, w, side)
            continue
        for y in range(0, h - side + 1, stride):
            for x in range(0, w - side + 1, stride):
                pairs.append(degrade(img[y:y + side, x:x + side], scale))
    order = np.random.default_rng(seed).permutation(len(pairs))
    return [pairs[i] for i in order]


def stack_pairs(pairs: Sequence[TrainingPair]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 1, P, P) LR and HR arrays."""
    lr = np.stack([p.lr for p in pairs])[:, None]
    hr = np.stack([p.hr for p in pairs])[:, None]
    return lr, hr


def load_training_planes(paths: Iterable[str | Path], augmentation: bool = True) -> list[np.ndarray]:
    """Y planes in [0, 1] of every source image, optionally with all 12 variants."""
    planes = []
    for p in paths:
        y = luminance(read_image(p))
        planes.extend(augment(y) if augmentation else [y])
    return planes
