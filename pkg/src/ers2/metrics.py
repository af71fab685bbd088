"""Distortion metrics: MSE, PSNR and a differentiable MS-SSIM."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def mse(x: Tensor, x_hat: Tensor, scale: float = 1.0) -> Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) * scale).pow(2).mean()


def psnr(x: Tensor, x_hat: Tensor, max_val: float = 1.0) -> float:
    """PSNR in dB; ``inf`` for identical inputs."""
    err = float(mse(x.double(), x_hat.double()))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / err)


def _gaussian_window(size: int, sigma: float, dtype, device) -> Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _ssim_terms(x: Tensor, y: Tensor, win: Tensor, data_range: float):
    C = x.shape[1]
    k = win.numel()
    wh = win.reshape(1, 1, 1, k).expand(C, 1, 1, k)
    wv = win.reshape(1, 1, k, 1).expand(C, 1, k, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wh, groups=C), wv, groups=C)

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return (lum * cs).mean(dim=(1, 2, 3)), cs.mean(dim=(1, 2, 3))


def num_scales(height: int, width: int, window: int = WINDOW_SIZE) -> int:
    """Largest pyramid depth (<= 5) whose coarsest level still fits the window."""
    m = min(height, width)
    levels = 1
    while levels < len(MS_SSIM_WEIGHTS) and m // (2 ** levels) >= window:
        levels += 1
    return levels


def ms_ssim(x: Tensor, x_hat: Tensor, data_range: float = 1.0) -> Tensor:
    """Multi-scale SSIM averaged over the batch.

    Uses the standard 11-tap Gaussian window (sigma 1.5) without padding and
    2x average pooling between scales. Images smaller than 176 px use fewer
    scales with the leading weights renormalized; images smaller than the
    window shrink the window to fit.
    """
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    H, W = x.shape[-2:]
    size = min(WINDOW_SIZE, H, W)
    if size % 2 == 0:
        size -= 1
    levels = num_scales(H, W, size)
    weights = torch.tensor(MS_SSIM_WEIGHTS[:levels], dtype=x.dtype, device=x.device)
    weights = weights / weights.sum()
    win = _gaussian_window(size, WINDOW_SIGMA, x.dtype, x.device)
    vals = []
    for i in range(levels):
        ssim_val, cs = _ssim_terms(x, x_hat, win, data_range)
        if i < levels - 1:
            vals.append(F.relu(cs))
            x = F.avg_pool2d(x, 2)
            x_hat = F.avg_pool2d(x_hat, 2)
        else:
            vals.append(F.relu(ssim_val))
    stacked = torch.stack(vals, dim=0)
    score = torch.prod(stacked ** weights.reshape(-1, 1), dim=0)
    return score.mean()
