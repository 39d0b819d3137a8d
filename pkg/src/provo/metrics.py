"""Volumetric image quality metrics.

Both metrics compute in float64 regardless of input precision and accept
either plain ndarrays or Volume objects (complex inputs are compared by
magnitude). Reference and test must have identical shapes; the reference
supplies the intensity peak / dynamic range.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import uniform_filter

from provo.geometry import Volume


def _as_array(x, name: str) -> np.ndarray:
    if isinstance(x, Volume):
        x = x.data
    arr = np.asarray(x)
    if np.iscomplexobj(arr):
        arr = np.abs(arr)
    return arr.astype(np.float64, copy=False)


def psnr(ref, test) -> float:
    """Peak signal-to-noise ratio in dB, peak taken from the reference.

    Identical inputs return +inf.
    """
    ref = _as_array(ref, "ref")
    test = _as_array(test, "test")
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: ref {ref.shape} vs test {test.shape}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(ref.max())
    return 10.0 * math.log10(peak * peak / mse)


def ssim(ref, test, win_size: int = 7, K1: float = 0.01, K2: float = 0.03,
         data_range: float | None = None) -> float:
    """Mean structural similarity with a uniform (moving-average) window.

    Local means, variances and covariance come from a win_size^d box filter
    with sample (n-1) variance normalization; the score map is cropped by
    the filter half-width before averaging. data_range defaults to
    max(ref) - min(ref) and must be positive.
    """
    ref = _as_array(ref, "ref")
    test = _as_array(test, "test")
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: ref {ref.shape} vs test {test.shape}")
    if ref.ndim == 4 and ref.shape[0] == 1:
        # rank-4 single-channel volumes window over the three spatial axes
        ref, test = ref[0], test[0]
    if win_size % 2 == 0 or win_size < 3:
        raise ValueError(f"win_size must be odd and >= 3, got {win_size}")
    if any(d < win_size for d in ref.shape):
        raise ValueError(f"window {win_size} exceeds an image dim {ref.shape}")
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if data_range <= 0:
        raise ValueError("data_range must be positive; pass it explicitly for flat references")

    np_win = win_size ** ref.ndim
    cov_norm = np_win / (np_win - 1)
    filt = lambda a: uniform_filter(a, size=win_size)

    ux = filt(ref)
    uy = filt(test)
    uxx = filt(ref * ref)
    uyy = filt(test * test)
    uxy = filt(ref * test)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)

    C1 = (K1 * data_range) ** 2
    C2 = (K2 * data_range) ** 2
    score = ((2 * ux * uy + C1) * (2 * vxy + C2)) / ((ux**2 + uy**2 + C1) * (vx + vy + C2))

    pad = (win_size - 1) // 2
    crop = tuple(slice(pad, d - pad) for d in score.shape)
    return float(score[crop].mean())
