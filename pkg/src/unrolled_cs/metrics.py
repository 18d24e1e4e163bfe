"""Image quality metrics: SNR in dB and single-scale SSIM."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

__all__ = ["snr", "ssim", "gaussian_window", "SNR_CAP_DB"]

SNR_CAP_DB = 300.0


def snr(truth: np.ndarray, estimate: np.ndarray) -> float:
    """``20 log10(||x|| / ||x - x_hat||)`` on magnitudes of complex inputs.

    Exact reconstructions report :data:`SNR_CAP_DB` instead of infinity.
    """
    t = np.abs(truth) if np.iscomplexobj(truth) else np.asarray(truth, float)
    e = np.abs(estimate) if np.iscomplexobj(estimate) else np.asarray(estimate, float)
    if t.shape != e.shape:
        raise ValueError(f"shape mismatch {t.shape} vs {e.shape}")
    num = np.linalg.norm(t)
    if num == 0:
        raise ValueError("SNR undefined for an all-zero reference")
    den = np.linalg.norm(t - e)
    if den == 0:
        return SNR_CAP_DB
    return float(min(20 * np.log10(num / den), SNR_CAP_DB))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img, g):
    # separable correlation restricted to fully-contained windows
    n = len(g)
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h = n // 2
    return out[h : img.shape[0] - (n - 1 - h), h : img.shape[1] - (n - 1 - h)]


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean SSIM over all valid Gaussian windows.

    Inputs are 2-D (grayscale or magnitude) or ``[C, H, W]``, in which case
    the per-channel scores are averaged. Complex inputs are compared by
    magnitude.
    """
    a = np.abs(a) if np.iscomplexobj(a) else np.asarray(a, float)
    b = np.abs(b) if np.iscomplexobj(b) else np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(x, y, window, sigma, data_range, k1, k2) for x, y in zip(a, b)]))
    if a.ndim != 2:
        raise ValueError("ssim expects [H, W] or [C, H, W]")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    ma, mb = _filter(a, g), _filter(b, g)
    va = _filter(a * a, g) - ma * ma
    vb = _filter(b * b, g) - mb * mb
    cov = _filter(a * b, g) - ma * mb
    s = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return float(s.mean())
