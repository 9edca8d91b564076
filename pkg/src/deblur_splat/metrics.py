"""Image quality metrics: PSNR, SSIM, Laplacian variance and shift-invariant wrappers."""

from __future__ import annotations

import itertools

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def _pair(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"image shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def psnr(pred, target, mask=None):
    """PSNR in dB for images in [0, 1]; identical inputs report ``PSNR_CAP``.

    With ``mask`` (H, W) only the selected pixels enter the MSE.
    """
    pred, target = _pair(pred, target)
    sq = (pred - target) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return float("nan")
        sq = sq[mask]
    mse = float(np.mean(sq))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def ssim(pred, target, data_range=1.0, k1=0.01, k2=0.03, win_size=11, sigma=1.5):
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    pred, target = _pair(pred, target)
    if pred.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if min(pred.shape[:2]) < win_size:
        raise ValueError(f"SSIM needs images of at least {win_size}x{win_size}, got {pred.shape[:2]}")
    win = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    pad = win_size // 2
    crop = (slice(pad, -pad or None), slice(pad, -pad or None))
    vals = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], target[..., ch]
        filt = lambda im: ndimage.correlate(im, win, mode="reflect")[crop]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def laplacian_variance(img):
    """Variance of the 3x3 Laplacian of the luma image on the 0-255 scale."""
    img = np.asarray(img, dtype=float)
    gray = img @ LUMA if img.ndim == 3 else img
    resp = ndimage.correlate(gray * 255.0, LAPLACIAN, mode="nearest")[1:-1, 1:-1]
    return float(np.var(resp))


def shift_offsets(max_shift: int, symmetric=False):
    """Integer ``(dy, dx)`` grid: ``0..max_shift`` per axis, or ``-max..max``."""
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    rng = range(-max_shift, max_shift + 1) if symmetric else range(0, max_shift + 1)
    return list(itertools.product(rng, rng))


def _overlap(pred, target, dy, dx):
    H, W = target.shape[:2]
    ps = (slice(max(dy, 0), H + min(dy, 0)), slice(max(dx, 0), W + min(dx, 0)))
    ts = (slice(max(-dy, 0), H - max(dy, 0)), slice(max(-dx, 0), W - max(dx, 0)))
    return pred[ps], target[ts]


def shift_invariant(metric, pred, target, max_shift=5, symmetric=False, higher_is_better=True):
    """Best ``metric(pred shifted, target)`` over integer translations on the overlap.

    ``pred[y + dy, x + dx]`` is compared with ``target[y, x]``. The default
    grid ``{0..5}^2`` gives 36 evaluations.
    """
    pred, target = _pair(pred, target)
    best = None
    for dy, dx in shift_offsets(max_shift, symmetric):
        p, t = _overlap(pred, target, dy, dx)
        val = metric(p, t)
        if not np.isfinite(val):
            continue
        if best is None or (val > best if higher_is_better else val < best):
            best = val
    if best is None:
        raise ValueError("metric undefined at every shift")
    return float(best)
