"""Reconstruction fidelity metrics: PSNR, SSIM, MRAE, RMSE.

All four operate on [0, 1]-ranged arrays of equal shape. SSIM follows the
standard index with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03 and dynamic range L = 1, computed per spectral channel over fully
valid window positions and averaged across channels. MRAE divides by the
truth with a 1e-3 floor against empty pixels.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .optics import HsiCube

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MRAE_FLOOR = 1e-3


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.data if isinstance(a, HsiCube) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, HsiCube) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric shape mismatch: {a.shape} vs {b.shape}")
    for name, arr in (("first", a), ("second", b)):
        if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
            raise ContractError(f"{name} argument outside [0, 1]: "
                                f"[{arr.min():.4g}, {arr.max():.4g}]")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 1; +inf for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-0.5 * (coords / sigma) ** 2)
    k = np.outer(g1, g1)
    return k / k.sum()


_SSIM_KERNEL = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)


def _ssim_channel(x: np.ndarray, y: np.ndarray) -> float:
    k = _SSIM_KERNEL
    wx = sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    wy = sliding_window_view(y, (SSIM_WINDOW, SSIM_WINDOW))
    mx = np.tensordot(wx, k, axes=([2, 3], [0, 1]))
    my = np.tensordot(wy, k, axes=([2, 3], [0, 1]))
    mxx = np.tensordot(wx * wx, k, axes=([2, 3], [0, 1]))
    myy = np.tensordot(wy * wy, k, axes=([2, 3], [0, 1]))
    mxy = np.tensordot(wx * wy, k, axes=([2, 3], [0, 1]))
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean structural similarity, per channel then averaged."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"ssim expects (H, W) or (H, W, C), got {a.shape}")
    h, w, _ = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x"
                         f"{SSIM_WINDOW} SSIM window")
    return float(np.mean([_ssim_channel(a[:, :, c], b[:, :, c])
                          for c in range(a.shape[2])]))


def mrae(a, b) -> float:
    """Mean relative absolute error of estimate ``a`` against truth ``b``."""
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b) / np.maximum(b, MRAE_FLOOR)))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def evaluate_pair(estimate, truth) -> dict:
    """All four metrics for one scene."""
    return {
        "psnr": psnr(estimate, truth),
        "ssim": ssim(estimate, truth),
        "mrae": mrae(estimate, truth),
        "rmse": rmse(estimate, truth),
    }
