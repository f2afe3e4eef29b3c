"""PSNR / SSIM on [0, 1] images and directory-level evaluation reports."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import imaging
from .dataset import list_images
from .errors import PairingError, RangeError, ShapeError

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB with peak 1.0; identical images give the 100 dB cap."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable weighted average over every fully-contained window
    k = len(g)
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def _ssim_channel(a: np.ndarray, b: np.ndarray, g: np.ndarray) -> float:
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Single-scale SSIM (11x11 Gaussian, sigma 1.5, L = 1), averaged over RGB channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise RangeError(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    if np.array_equal(a, b):
        return 1.0
    g = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g) for c in range(a.shape[2])]))


@dataclass
class EvalReport:
    rows: list[tuple[str, float, float]] = field(default_factory=list)

    @property
    def psnr_values(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def ssim_values(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    @property
    def mean_psnr(self) -> float:
        return float(self.psnr_values.mean())

    @property
    def mean_ssim(self) -> float:
        return float(self.ssim_values.mean())

    @property
    def std_psnr(self) -> float:
        return float(self.psnr_values.std())

    @property
    def std_ssim(self) -> float:
        return float(self.ssim_values.std())

    def summary(self) -> str:
        return (
            f"images: {len(self.rows)}\n"
            f"PSNR: {self.mean_psnr:.4f} +/- {self.std_psnr:.4f} dB\n"
            f"SSIM: {self.mean_ssim:.6f} +/- {self.std_ssim:.6f}\n"
        )

    def write(self, out_dir: str | os.PathLike) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, txt_path = out_dir / "report.csv", out_dir / "report.txt"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "psnr", "ssim"])
            for name, p, s in self.rows:
                writer.writerow([name, repr(p), repr(s)])
        txt_path.write_text(self.summary(), encoding="utf-8")
        return csv_path, txt_path


def evaluate(
    pred_dir: str | os.PathLike, target_dir: str | os.PathLike, out_dir: str | os.PathLike | None = None
) -> EvalReport:
    """Score every prediction against the same-named target image."""
    preds = {p.name: p for p in list_images(pred_dir)}
    targets = {p.name: p for p in list_images(target_dir)}
    for name in sorted(set(preds) ^ set(targets)):
        side = "target" if name in preds else "prediction"
        raise PairingError(f"{name} has no matching {side} image")
    if not preds:
        raise PairingError(f"no images to evaluate in {pred_dir}")
    report = EvalReport()
    for name in sorted(preds):
        a, b = imaging.load_image(preds[name]), imaging.load_image(targets[name])
        report.rows.append((name, psnr(a, b), ssim(a, b)))
    if out_dir is not None:
        report.write(out_dir)
    return report
