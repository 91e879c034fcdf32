"""Quality metrics over decoded grids and latents: PSNR, SSIM, relative L2."""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError

PSNR_CAP = 99.0

# SSIM stabilizers for a [0, 1] dynamic range.
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2
SSIM_WINDOW = 8
SSIM_STRIDE = 4


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0, 1] grids, capped at 99 dB."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _window_starts(length: int) -> list[int]:
    # stride-4 8x8 windows; the trailing window is always included so the
    # bottom/right border contributes even when length % stride != 0
    starts = list(range(0, length - SSIM_WINDOW + 1, SSIM_STRIDE))
    last = length - SSIM_WINDOW
    if last >= 0 and last not in starts:
        starts.append(last)
    return starts


def _ssim_window(x: np.ndarray, y: np.ndarray) -> float:
    mx, my = x.mean(), y.mean()
    # population (1/n) moments, fixed so fixture values are stable
    vx = (x * x).mean() - mx * mx
    vy = (y * y).mean() - my * my
    cov = (x * y).mean() - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean of windowed SSIM (8x8 windows, stride 4; whole grid when smaller)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < 2:
        raise DimensionError(f"ssim needs a grid of at least 2x2, got {a.shape}")
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        return float(_ssim_window(a, b))
    values = [
        _ssim_window(a[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW],
                     b[i : i + SSIM_WINDOW, j : j + SSIM_WINDOW])
        for i in _window_starts(h)
        for j in _window_starts(w)
    ]
    return float(np.mean(values))


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / ||b||; the reference b goes in the denominator."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"rel_l2 shape mismatch: {a.shape} vs {b.shape}")
    diff = float(np.linalg.norm(a - b))
    ref = float(np.linalg.norm(b))
    if ref == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / ref
