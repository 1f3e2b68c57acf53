"""Reference image-quality metrics over [0, 1]-range images."""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import convolve2d

from ..errors import DataError

__all__ = ["psnr", "ssim", "depth_abs_rel"]

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise DataError("empty images")
    for name, arr in (("first", a), ("second", b)):
        if not np.all(np.isfinite(arr)):
            raise DataError(f"{name} image contains non-finite values")
        if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
            raise DataError(f"{name} image outside [0, 1]")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    win = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    mu_a = convolve2d(a, win, mode="valid")
    mu_b = convolve2d(b, win, mode="valid")
    var_a = convolve2d(a * a, win, mode="valid") - mu_a**2
    var_b = convolve2d(b * b, win, mode="valid") - mu_b**2
    cov = convolve2d(a * b, win, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a**2 + mu_b**2 + _C1) * (var_a + var_b + _C2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Statistics come from valid (fully inside) windows only; multichannel
    images are scored per channel and averaged.
    """
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < _SSIM_WINDOW:
        raise DataError("image smaller than the SSIM window")
    if a.ndim == 2:
        return _ssim_single(a, b)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[..., c], b[..., c]) for c in range(a.shape[2])]))
    raise DataError(f"ssim expects 2-D or 3-D arrays, got shape {a.shape}")


def depth_abs_rel(
    pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None, eps: float = 1e-6
) -> float:
    """Mean absolute relative depth error over valid pixels with gt > eps."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    valid = np.isfinite(gt) & (gt > eps)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DataError("no valid pixels for depth error")
    return float(np.mean(np.abs(pred[valid] - gt[valid]) / gt[valid]))
