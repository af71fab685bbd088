"""Analysis / synthesis transforms and the hyper transforms."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import torch.nn as nn
from torch import Tensor

from .nn_blocks import RS2TB, RS2TBConfig

MSE_LAMBDAS = (0.0016, 0.0032, 0.0075, 0.015, 0.023, 0.03, 0.045)
MSSSIM_LAMBDAS = (6.0, 12.0, 40.0, 80.0, 120.0)
METRICS = ("mse", "ms-ssim")
PAD_MULTIPLE = 64


@dataclass
class ModelConfig:
    N: int = 128
    M: int = 192
    enhancement: bool = True
    metric: str = "mse"
    lam: float = 0.015
    main_window: int = 8
    hyper_window: int = 4
    depth: int = 2
    mlp_ratio: float = 4.0
    cpb_hidden: int = 512
    norm_init: float = 0.1
    growth: int = 32
    c_ctx: Optional[int] = None
    factorized_init_scale: float = 1.0

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.c_ctx is None:
            self.c_ctx = 2 * self.N

    def rs2tb(self, hyper: bool = False) -> RS2TBConfig:
        return RS2TBConfig(depth=self.depth,
                           window_size=self.hyper_window if hyper else self.main_window,
                           mlp_ratio=self.mlp_ratio, cpb_hidden=self.cpb_hidden,
                           norm_init=self.norm_init)

    @property
    def lam_index(self) -> int:
        table = MSE_LAMBDAS if self.metric == "mse" else MSSSIM_LAMBDAS
        for i, v in enumerate(table):
            if abs(v - self.lam) < 1e-12:
                return i
        return 255

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:8]


def parity_config(metric: str, lam: float, **overrides) -> ModelConfig:
    """Config for one of the published rate points (N=128 low rate, 192 high rate)."""
    if metric == "mse":
        table, n_low = MSE_LAMBDAS, 4
    elif metric == "ms-ssim":
        table, n_low = MSSSIM_LAMBDAS, 2
    else:
        raise ValueError(f"unknown metric {metric!r}")
    idx = min(range(len(table)), key=lambda i: abs(table[i] - lam))
    if abs(table[idx] - lam) > 1e-12:
        raise ValueError(f"lambda {lam} is not a published {metric} rate point")
    cfg = dict(N=128 if idx < n_low else 192, metric=metric, lam=table[idx])
    cfg.update(overrides)
    return ModelConfig(**cfg)


def conv(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 2) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 2) -> nn.ConvTranspose2d:
    return nn.ConvTranspose2d(in_ch, out_ch, kernel_size, stride=stride,
                              padding=kernel_size // 2, output_padding=stride - 1)


def _check_channels(x: Tensor, ch: int) -> None:
    if x.dim() != 4 or x.shape[1] != ch:
        raise ValueError(f"expected {ch} channels, got shape {tuple(x.shape)}")


class AnalysisTransform(nn.Module):
    """Conv5x5/2 followed by three [RS2TB -> Conv3x3/2] levels (16x downsampling)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N = cfg.N
        layers = [conv(3, N, 5)]
        for _ in range(3):
            layers += [RS2TB(N, cfg.rs2tb()), conv(N, N, 3)]
        self.layers = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        _check_channels(x, 3)
        H, W = x.shape[-2:]
        if H % PAD_MULTIPLE or W % PAD_MULTIPLE:
            raise ValueError(f"input {H}x{W} must be padded to multiples of {PAD_MULTIPLE}")
        return self.layers(x)


class SynthesisTransform(nn.Module):
    """Mirror of the analysis transform; output is clamped to [0, 1] in eval mode."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        N = cfg.N
        self.N = N
        layers = []
        for _ in range(3):
            layers += [deconv(N, N, 3), RS2TB(N, cfg.rs2tb())]
        layers.append(deconv(N, 3, 5))
        self.layers = nn.Sequential(*layers)

    def forward(self, y_hat: Tensor) -> Tensor:
        _check_channels(y_hat, self.N)
        x_hat = self.layers(y_hat)
        if not self.training:
            x_hat = x_hat.clamp(0.0, 1.0)
        return x_hat


class HyperAnalysis(nn.Module):
    """Two [RS2TB -> Conv3x3/2] levels mapping y (N ch) to z (M ch)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.N = cfg.N
        self.layers = nn.Sequential(
            RS2TB(cfg.N, cfg.rs2tb(hyper=True)), conv(cfg.N, cfg.M, 3),
            RS2TB(cfg.M, cfg.rs2tb(hyper=True)), conv(cfg.M, cfg.M, 3),
        )

    def forward(self, y: Tensor) -> Tensor:
        _check_channels(y, self.N)
        return self.layers(y)


class HyperSynthesis(nn.Module):
    """Mirror of the hyper analysis; emits ``c_ctx`` feature channels on y's grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.M = cfg.M
        self.layers = nn.Sequential(
            deconv(cfg.M, cfg.M, 3), RS2TB(cfg.M, cfg.rs2tb(hyper=True)),
            deconv(cfg.M, cfg.c_ctx, 3), RS2TB(cfg.c_ctx, cfg.rs2tb(hyper=True)),
        )

    def forward(self, z_hat: Tensor) -> Tensor:
        _check_channels(z_hat, self.M)
        return self.layers(z_hat)
