"""PSNR and SSIM for images in [0, 1], shaped ``[H, W]`` or ``[H, W, C]``."""

from __future__ import annotations

import numpy as np
from scipy.signal import correlate

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def _check(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1]."""
    if img.ndim < 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an RGB image, got shape {img.shape}")
    return img @ LUMA


def psnr(a, b, mode: str = "rgb") -> float:
    a, b = _check(a, b)
    if mode == "y":
        a, b = to_y(a), to_y(b)
    elif mode != "rgb":
        raise ValueError(f"mode must be 'rgb' or 'y', got {mode!r}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    return correlate(x, win, mode="valid", method="direct")


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Per-window SSIM of two single-channel images (valid region only)."""
    win = gaussian_window()
    if min(a.shape) < win.shape[0]:
        raise ValueError(f"image {a.shape} smaller than the {win.shape[0]}x{win.shape[0]} window")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    saa = _filter(a * a, win) - mu_a ** 2
    sbb = _filter(b * b, win) - mu_b ** 2
    sab = _filter(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, mode: str = "rgb") -> float:
    """Mean SSIM, averaged over channels; 11x11 Gaussian window, sigma 1.5."""
    a, b = _check(a, b)
    if mode == "y":
        a, b = to_y(a), to_y(b)
    elif mode != "rgb":
        raise ValueError(f"mode must be 'rgb' or 'y', got {mode!r}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[-1])]))
