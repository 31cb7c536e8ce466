"""PSNR and SSIM on the luminance plane, and directory-level evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import data

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

# Returned for identical images; aggregates skip it.
PSNR_IDENTICAL = math.inf


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 255.0) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; :data:`PSNR_IDENTICAL` when MSE is 0."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = taps.size
    h, w = img.shape
    rows = sum(taps[i] * img[i:h - n + 1 + i, :] for i in range(n))
    return sum(taps[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def ssim_map(a, b, peak: float = 255.0) -> np.ndarray:
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 255.0) -> float:
    """Mean single-scale SSIM over all fully-contained 11x11 Gaussian windows."""
    a, b = _pair(a, b)
    if np.array_equal(a, b) and min(a.shape) >= SSIM_WINDOW:
        return 1.0
    return float(ssim_map(a, b, peak).mean())


@dataclass
class ImageScore:
    path: str
    psnr: float
    ssim: float


@dataclass
class ScoreReport:
    scale: int
    entries: list[ImageScore] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        vals = [e.psnr for e in self.entries if math.isfinite(e.psnr)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([e.ssim for e in self.entries])) if self.entries else math.nan

    @property
    def n_identical(self) -> int:
        return sum(1 for e in self.entries if not math.isfinite(e.psnr))

    def to_text(self) -> str:
        lines = [f"{e.path}\tPSNR {_fmt_psnr(e.psnr)} dB\tSSIM {e.ssim:.4f}" for e in self.entries]
        lines.append(f"mean ({len(self.entries)} images, x{self.scale})\t"
                     f"PSNR {self.mean_psnr:.4f} dB\tSSIM {self.mean_ssim:.4f}")
        if self.n_identical:
            lines.append(f"{self.n_identical} image(s) identical to reference; excluded from mean PSNR")
        return "\n".join(lines) + "\n"

    def write_table(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["path", "psnr", "ssim"])
            for e in self.entries:
                w.writerow([e.path, _fmt_psnr(e.psnr), f"{e.ssim:.10f}"])


def _fmt_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


Upscaler = Callable[[np.ndarray, int], np.ndarray]


def bicubic_upscaler(small: np.ndarray, scale: int) -> np.ndarray:
    h, w = small.shape
    return np.clip(data.bicubic_resize(small, h * scale, w * scale), 0.0, 1.0)


def score_planes(sr: np.ndarray, hr: np.ndarray, border: int) -> tuple[float, float]:
    """PSNR/SSIM of [0, 1] planes on the 8-bit scale after cropping ``border`` px."""
    if border:
        sr = sr[border:-border, border:-border]
        hr = hr[border:-border, border:-border]
    return psnr(sr * 255.0, hr * 255.0, 255.0), ssim(sr * 255.0, hr * 255.0, 255.0)


def evaluate_dir(model: Upscaler, hr_dir: str | Path, scale: int,
                 border: int | None = None) -> ScoreReport:
    """Score ``model`` on every PNG/BMP in ``hr_dir``.

    Each HR image is reduced to its Y plane, cropped to a multiple of
    ``scale`` and bicubic-downscaled; ``model(small, scale)`` must return the
    upscaled plane. Scores skip a border of ``scale`` pixels by default.
    """
    paths = data.list_images(hr_dir)
    if not paths:
        raise ValueError(f"no PNG/BMP images in {hr_dir}")
    return evaluate_paths(model, paths, scale, border)


def evaluate_paths(model: Upscaler, paths, scale: int, border: int | None = None) -> ScoreReport:
    border = scale if border is None else border
    report = ScoreReport(scale)
    for p in paths:
        hr = data.crop_to_multiple(data.luminance(data.read_image(p)), scale)
        h, w = hr.shape
        small = data.bicubic_resize(hr, h // scale, w // scale)
        sr = np.asarray(model(small, scale), dtype=np.float64)
        if sr.shape != hr.shape:
            raise ValueError(f"upscaler returned {sr.shape} for {p}, expected {hr.shape}")
        report.entries.append(ImageScore(str(p), *score_planes(sr, hr, border)))
    return report
