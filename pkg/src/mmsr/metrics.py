"""Image quality metrics: peak signal-to-noise ratio and structural similarity."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor

__all__ = ["psnr", "psnr_from_mse", "ssim", "gaussian_window"]


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def psnr_from_mse(mse: float, peak: float = 1.0) -> float:
    """10 * log10(peak^2 / mse) in decibels; +inf when the error is zero."""
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def psnr(x, y, peak: float = 1.0) -> float:
    """PSNR between two equal-shape images (any rank); higher is better."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    return psnr_from_mse(float(np.mean((a - b) ** 2)), peak)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 2-d Gaussian window."""
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _gauss_filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid'-mode correlation with a 1-d Gaussian tap vector."""
    k = g.size
    tmp = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(tmp, k, axis=1) @ g


def ssim(x, y, peak: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local structural similarity over the valid region.

    Local means/variances/covariance are Gaussian-weighted (11x11, sigma 1.5
    by default); stabilizers are C1 = (0.01*peak)^2 and C2 = (0.03*peak)^2.
    Returns a value in [-1, 1], exactly 1 for identical inputs.
    """
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a = a.reshape(-1, *a.shape[-2:]) if a.ndim > 2 else a[None]
    b = b.reshape(-1, *b.shape[-2:]) if b.ndim > 2 else b[None]
    h, w = a.shape[-2:]
    if h < window_size or w < window_size:
        raise ShapeError(f"ssim: image {h}x{w} smaller than {window_size}x{window_size} window")
    coords = np.arange(window_size, dtype=np.float64) - window_size // 2
    g1 = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    g1 /= g1.sum()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    vals = []
    for plane_a, plane_b in zip(a, b):
        mu_a = _gauss_filter_valid(plane_a, g1)
        mu_b = _gauss_filter_valid(plane_b, g1)
        var_a = _gauss_filter_valid(plane_a * plane_a, g1) - mu_a * mu_a
        var_b = _gauss_filter_valid(plane_b * plane_b, g1) - mu_b * mu_b
        cov = _gauss_filter_valid(plane_a * plane_b, g1) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
        den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
