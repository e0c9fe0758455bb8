"""PSNR and SSIM on H x W (x C) float images."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
MSE_FLOOR = 1e-12


def _check(pred, target) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE), capped at 100 dB once MSE < 1e-12."""
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    pred, target = _check(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering along both spatial axes
    n = g.size
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(pred, target, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM with a Gaussian window; multichannel inputs average per channel."""
    pred, target = _check(pred, target)
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if pred.ndim != 3:
        raise ValueError(f"expected H x W or H x W x C images, got {pred.shape}")
    if min(pred.shape[:2]) < win_size:
        raise ValueError(f"image {pred.shape[:2]} smaller than the {win_size}x{win_size} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    g = gaussian_window(win_size, sigma)
    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], target[..., c]
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mx * mx
        syy = _filter_valid(y * y, g) - my * my
        sxy = _filter_valid(x * y, g) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
