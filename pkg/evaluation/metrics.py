"""PSNR on RGB with peak 1.0 and SSIM on BT.601 luma.

Both take H x W x C (or H x W) float frames in [0, 1] and are pure functions.
"""
import math

import numpy as np
from django.conf import settings
from scipy.signal import convolve2d

from .exceptions import MetricShapeError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _pair(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricShapeError(f'Frames differ in shape: {a.shape} vs {b.shape}.')
    return a, b


def psnr(a, b, cap=None):
    a, b = _pair(a, b)
    cap = settings.RONIN['PSNR_CAP'] if cap is None else cap
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return float(cap)
    return float(min(cap, 10.0 * math.log10(1.0 / mse)))


def to_luma(frame):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[-1] == 1:
        return frame[..., 0]
    # elementwise, so the result does not depend on memory layout
    wr, wg, wb = LUMA_WEIGHTS
    return wr * frame[..., 0] + wg * frame[..., 1] + wb * frame[..., 2]


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    window = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma))
    return window / window.sum()


def _filter(x, window):
    return convolve2d(x, np.rot90(window, 2), mode='valid')


def ssim_map(a, b, data_range=1.0):
    a, b = _pair(a, b)
    a, b = to_luma(a), to_luma(b)
    if min(a.shape) < SSIM_WINDOW:
        raise MetricShapeError(f'Frames of {a.shape} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window.')
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    window = gaussian_window()
    mu_a, mu_b = _filter(a, window), _filter(b, window)
    var_a = _filter(a * a, window) - mu_a * mu_a
    var_b = _filter(b * b, window) - mu_b * mu_b
    cov = _filter(a * b, window) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b):
    return float(np.mean(ssim_map(a, b)))


def clip_scores(restored, gt):
    """Per-frame (psnr, ssim) lists for two equally long clips."""
    restored, gt = np.asarray(restored), np.asarray(gt)
    if restored.shape != gt.shape:
        raise MetricShapeError(f'Clips differ in shape: {restored.shape} vs {gt.shape}.')
    return [psnr(x, y) for x, y in zip(restored, gt)], [ssim(x, y) for x, y in zip(restored, gt)]
