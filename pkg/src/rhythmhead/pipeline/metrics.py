"""Evaluation metrics: landmark distance, SSIM, L1."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


class MetricError(ValueError):
    pass


def compute_lmd(generated, target) -> float:
    """Mean per-point Euclidean distance after removing each frame's centroid offset."""
    g = np.asarray(generated, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if g.ndim == 2:
        g, t = g[None], t[None] if t.ndim == 2 else t
    if g.shape != t.shape:
        raise MetricError(f"landmark sequences differ in shape: {g.shape} vs {t.shape}")
    g = g - g.mean(axis=1, keepdims=True)
    t = t - t.mean(axis=1, keepdims=True)
    return float(np.linalg.norm(g - t, axis=-1).mean())


def to_gray(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            return img[..., 0]
        return img[..., :3] @ np.array([0.299, 0.587, 0.114])
    if img.ndim != 2:
        raise MetricError(f"expected an H×W or H×W×C image, got {img.shape}")
    return img


def compute_ssim(a, b, data_range: float = 1.0, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (11×11, σ = 1.5), averaged over the region the window fully covers."""
    x, y = to_gray(a), to_gray(b)
    if x.shape != y.shape:
        raise MetricError(f"image sizes differ: {x.shape} vs {y.shape}")
    truncate = 3.5  # radius 5 at σ = 1.5 → 11 taps
    pad = int(truncate * sigma + 0.5)
    if min(x.shape) <= 2 * pad:
        raise MetricError(f"images must be larger than {2 * pad + 1} pixels per side")

    def filt(z):
        return gaussian_filter(z, sigma=sigma, truncate=truncate, mode="reflect")

    n = (2 * pad + 1) ** 2
    cov = n / (n - 1.0)
    ux, uy = filt(x), filt(y)
    vx = cov * (filt(x * x) - ux * ux)
    vy = cov * (filt(y * y) - uy * uy)
    vxy = cov * (filt(x * y) - ux * uy)
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux**2 + uy**2 + c1) * (vx + vy + c2))
    return float(s[pad:-pad, pad:-pad].mean())


def mean_l1(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shapes differ: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())
