"""Luma-channel PSNR and SSIM."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 studio-range luma of a [0, 1] RGB image, returned in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return (65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0) / 255.0


def _prepare(sr, hr, crop):
    sr, hr = np.asarray(sr, dtype=np.float64), np.asarray(hr, dtype=np.float64)
    if sr.shape != hr.shape:
        raise ValueError(f"shape mismatch: {sr.shape} vs {hr.shape}")
    a, b = rgb_to_y(sr), rgb_to_y(hr)
    if crop:
        a, b = a[crop:-crop, crop:-crop], b[crop:-crop, crop:-crop]
    if a.size == 0:
        raise ValueError(f"crop {crop} leaves nothing of a {sr.shape[:2]} image")
    return a, b


def psnr_y(sr: np.ndarray, hr: np.ndarray, crop: int = 0) -> float:
    a, b = _prepare(sr, hr, crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - size // 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_y(sr: np.ndarray, hr: np.ndarray, crop: int = 0) -> float:
    """Single-scale SSIM on luma, 11x11 Gaussian window, valid windows only."""
    a, b = _prepare(sr, hr, crop)
    if min(a.shape) < 11:
        raise ValueError(f"SSIM needs at least 11x11 after cropping, got {a.shape}")
    c1, c2 = (0.01 * 1.0) ** 2, (0.03 * 1.0) ** 2
    win = gaussian_window()

    def filt(x):
        return ndimage.correlate(x, win, mode="constant")[5:-5, 5:-5]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
