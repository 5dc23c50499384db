"""Image-quality metrics on magnitude images.

Conventions: NRMSE divides the RMSE of magnitudes by the magnitude range of
the reference; PSNR uses ``max|ref|`` as peak; SSIM is single-scale with an
11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range
``max|ref| - min|ref|``, evaluated per frame on the valid (un-padded)
region and averaged.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from scipy.signal import convolve2d

__all__ = ["nrmse", "psnr", "ssim", "gaussian_window", "METRIC_CONVENTIONS"]

METRIC_CONVENTIONS = {
    "nrmse": "rmse(|x|-|ref|) / (max|ref| - min|ref|)",
    "psnr": "10 log10(max|ref|^2 / mse(|x|-|ref|)), inf on exact match",
    "ssim": "gaussian 11x11 sigma=1.5, K1=0.01, K2=0.03, L=max|ref|-min|ref|, valid region, mean over frames",
}


def _mag(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.abs(np.asarray(a)).astype(np.float64)


def _pair(x, ref) -> tuple[np.ndarray, np.ndarray]:
    mx, mr = _mag(x), _mag(ref)
    if mx.shape != mr.shape:
        raise ValueError(f"shape mismatch: {mx.shape} vs {mr.shape}")
    return mx, mr


def nrmse(x, ref) -> float:
    mx, mr = _pair(x, ref)
    span = mr.max() - mr.min()
    if span == 0:
        raise ValueError("reference is constant; NRMSE range normalisation undefined")
    return float(np.sqrt(np.mean((mx - mr) ** 2)) / span)


def psnr(x, ref) -> float:
    mx, mr = _pair(x, ref)
    mse = np.mean((mx - mr) ** 2)
    if mse == 0:
        return math.inf
    return float(10 * np.log10(mr.max() ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, ref, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    mx, mr = _pair(x, ref)
    if mx.ndim < 2 or min(mx.shape[-2:]) < win_size:
        raise ValueError(f"image {mx.shape[-2:]} smaller than the {win_size}x{win_size} window")
    span = mr.max() - mr.min()
    c1, c2 = (k1 * span) ** 2, (k2 * span) ** 2
    w = gaussian_window(win_size, sigma)

    def filt(a):
        return convolve2d(a, w, mode="valid")

    values = []
    for a, b in zip(mx.reshape(-1, *mx.shape[-2:]), mr.reshape(-1, *mr.shape[-2:])):
        mu_a, mu_b = filt(a), filt(b)
        saa = filt(a * a) - mu_a**2
        sbb = filt(b * b) - mu_b**2
        sab = filt(a * b) - mu_a * mu_b
        smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2))
        values.append(smap.mean())
    return float(np.mean(values))
