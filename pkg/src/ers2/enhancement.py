"""Nonlinear feature enhancement: one dense block applied residually to the input image."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
from torch import Tensor


class FeatureEnhancement(nn.Module):
    """``x + proj(DB(x))`` with a single three-layer dense block.

    Layer ``i`` sees the input concatenated with every earlier layer output.
    The 1x1 projection back to ``in_channels`` is zero-initialized, so the
    module is the identity until training moves it.
    """

    def __init__(self, in_channels: int = 3, growth: int = 32,
                 kernel_sizes: Sequence[int] = (1, 3, 1), negative_slope: float = 0.2):
        super().__init__()
        self.in_channels = in_channels
        self.layers = nn.ModuleList()
        ch = in_channels
        for k in kernel_sizes:
            self.layers.append(nn.Conv2d(ch, growth, k, padding=k // 2))
            ch += growth
        self.act = nn.LeakyReLU(negative_slope)
        self.proj = nn.Conv2d(ch, in_channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def dense(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.layers:
            feats.append(self.act(conv(torch.cat(feats, dim=1))))
        return torch.cat(feats, dim=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels}-channel input, got {tuple(x.shape)}")
        return x + self.proj(self.dense(x))
