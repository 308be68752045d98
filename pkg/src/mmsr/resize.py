"""Separable bicubic resampling (Catmull-Rom kernel, a = -0.5), edge-clamped.

Used both to synthesize low-resolution inputs from high-resolution slices and
as the interpolation baseline.  Sampling uses the center-aligned convention
src = (dst + 0.5) * n_in / n_out - 0.5; out-of-range taps clamp to the border
pixel, which keeps every row of the weight matrix summing to one.
"""

from __future__ import annotations

import numpy as np

__all__ = ["cubic_kernel", "bicubic_weight_matrix", "bicubic_resize"]

_A = -0.5


def cubic_kernel(t):
    """Catmull-Rom cubic, nonzero on |t| < 2, interpolating (partition of unity)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    w = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    w[near] = (_A + 2.0) * t[near] ** 3 - (_A + 3.0) * t[near] ** 2 + 1.0
    w[far] = _A * t[far] ** 3 - 5.0 * _A * t[far] ** 2 + 8.0 * _A * t[far] - 4.0 * _A
    return w


def bicubic_weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis; rows sum to 1."""
    if n_out < 1 or n_in < 1:
        raise ValueError(f"resize sizes must be >= 1, got {n_in} -> {n_out}")
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * ratio - 0.5
        base = int(np.floor(src))
        for tap in range(base - 1, base + 3):
            w = float(cubic_kernel(src - tap))
            if w != 0.0:
                mat[o, min(max(tap, 0), n_in - 1)] += w
    return mat


def bicubic_resize(img, out_h: int, out_w: int) -> np.ndarray:
    """Resize the trailing two axes of ``img`` to (out_h, out_w)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"expected at least 2 dims, got shape {arr.shape}")
    h, w = arr.shape[-2:]
    wh = bicubic_weight_matrix(h, out_h)
    ww = bicubic_weight_matrix(w, out_w)
    return np.matmul(np.matmul(wh, arr), ww.T)
