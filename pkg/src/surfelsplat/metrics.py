"""Image similarity: Gaussian-window SSIM (with gradient) and PSNR."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


def _blur(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # zero padding; the window is symmetric so this operator is self-adjoint
    out = correlate1d(img, w, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, w, axis=1, mode="constant", cval=0.0)


def _as_channels(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def ssim_with_grad(x: np.ndarray, y: np.ndarray, window: int = 11, sigma: float = 1.5):
    """Mean SSIM of ``x`` against ``y`` and its gradient with respect to ``x``.

    Statistics use an 11x11 Gaussian window (sigma 1.5) with zero padding at
    the borders; the mean runs over all pixels and channels.
    """
    x = _as_channels(x)
    y = _as_channels(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    w = gaussian_window(window, sigma)
    grad = np.empty_like(x)
    total = 0.0
    for ch in range(x.shape[2]):
        X, Y = x[..., ch], y[..., ch]
        mx, my = _blur(X, w), _blur(Y, w)
        sxx = _blur(X * X, w) - mx * mx
        syy = _blur(Y * Y, w) - my * my
        sxy = _blur(X * Y, w) - mx * my
        n1 = 2.0 * mx * my + SSIM_C1
        n2 = 2.0 * sxy + SSIM_C2
        d1 = mx * mx + my * my + SSIM_C1
        d2 = sxx + syy + SSIM_C2
        s = n1 * n2 / (d1 * d2)
        total += s.sum()

        dS_dsxy = 2.0 * n1 / (d1 * d2)
        dS_dsxx = -s / d2
        dS_dmx = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1
        # rewrite in terms of the blurred moments E[X], E[X^2], E[XY]
        g_mean = dS_dmx - 2.0 * mx * dS_dsxx - my * dS_dsxy
        grad[..., ch] = _blur(g_mean, w) + 2.0 * X * _blur(dS_dsxx, w) + Y * _blur(dS_dsxy, w)
    n = x.size
    return total / n, grad / n


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    return ssim_with_grad(x, y)[0]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images on a unit peak, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def metrics_report(a: np.ndarray, b: np.ndarray) -> dict:
    return {"psnr": psnr(a, b), "ssim": ssim(a, b)}
