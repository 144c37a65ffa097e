"""PSNR and SSIM for RGB images with values in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
# truncate 3.5 sigma gives the 11x11 window for sigma 1.5
_TRUNCATE = 3.5


def psnr(a, b, data_range=1.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def _filter(x):
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=_TRUNCATE, mode="reflect")


def ssim(a, b, data_range=1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Border pixels whose window leaves the image are excluded.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    pad = int(_TRUNCATE * SSIM_SIGMA + 0.5)
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        ux, uy = _filter(x), _filter(y)
        vx = _filter(x * x) - ux * ux
        vy = _filter(y * y) - uy * uy
        vxy = _filter(x * y) - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        if s.shape[0] > 2 * pad and s.shape[1] > 2 * pad:
            s = s[pad:-pad, pad:-pad]
        vals.append(float(np.mean(s)))
    return float(np.mean(vals))
