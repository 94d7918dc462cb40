"""Image quality metrics: PSNR (capped), SSIM, and a perceptual distance
computed with the pluggable feature extractor."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import InputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10*log10(1/MSE) for [0,1] images, capped at 99 dB."""
    if a.shape != b.shape:
        raise InputError(f"shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float((a - b).pow(2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g.view(-1, 1) @ g.view(1, -1)).view(1, 1, size, size)


_WINDOW = _gaussian_window()


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean local SSIM (11x11 Gaussian window, L=1), averaged over channels."""
    if a.shape != b.shape:
        raise InputError(f"shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise InputError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c = a.shape[1]
    win = _WINDOW.expand(c, 1, -1, -1).to(a.dtype)
    mu_a = F.conv2d(a, win, groups=c)
    mu_b = F.conv2d(b, win, groups=c)
    var_a = F.conv2d(a * a, win, groups=c) - mu_a**2
    var_b = F.conv2d(b * b, win, groups=c) - mu_b**2
    cov = F.conv2d(a * b, win, groups=c) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor) -> float:
    """Sum over levels of the mean squared feature difference."""
    if a.shape != b.shape:
        raise InputError(f"shapes disagree: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa = extractor.features(a)
        fb = extractor.features(b)
    return float(sum((x - y).pow(2).mean() for x, y in zip(fa, fb)))
