"""Quantization, likelihood models for y and z, and the causal attention context model."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .nn_blocks import heads_for, scaled_cosine_attention, TAU_MIN

SIGMA_MIN = 0.11
SIGMA_MAX = 256.0
SCALE_LEVELS = 64
P_MIN = 1e-9
TAIL_MASS = 1e-9
SYMBOL_BOUND = 255
TAIL_SIGMAS = 30.0


@dataclass
class EntropyParams:
    mu: Tensor
    sigma: Tensor


def quantize(v: Tensor, mode: str, mu: Optional[Tensor] = None,
             generator: Optional[torch.Generator] = None) -> Tensor:
    """``noise``: add U(-0.5, 0.5); ``round``: ``round(v - mu) + mu``."""
    if mode == "noise":
        u = torch.empty_like(v).uniform_(-0.5, 0.5, generator=generator)
        return v + u
    if mode == "round":
        if mu is None:
            return torch.round(v)
        if mu.shape != v.shape:
            raise ValueError(f"mean shape {tuple(mu.shape)} != input shape {tuple(v.shape)}")
        return torch.round(v - mu) + mu
    raise ValueError(f"unknown quantization mode {mode!r}")


def gaussian_likelihood(y_hat: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Probability of the unit-width bin around ``y_hat`` under N(mu, sigma^2)."""
    sigma = sigma.clamp(min=SIGMA_MIN)
    v = (y_hat - mu).abs()
    # evaluate on the upper tail to avoid cancellation far from the mean
    upper = torch.special.ndtr((0.5 - v) / sigma)
    lower = torch.special.ndtr((-0.5 - v) / sigma)
    return (upper - lower).clamp(min=P_MIN)


def rate_estimate(*likelihoods: Union[Tensor, Sequence[Tensor]]) -> Tensor:
    """Total information content ``sum(-log2 p)`` in bits."""
    flat = []
    for item in likelihoods:
        flat.extend(item if isinstance(item, (list, tuple)) else [item])
    total = None
    for p in flat:
        if bool((p <= 0).any()):
            raise ValueError("likelihoods must be strictly positive")
        bits = -torch.log2(p).sum()
        total = bits if total is None else total + bits
    if total is None:
        return torch.zeros(())
    return total


class ScaleTable:
    """Log-spaced sigma grid shared by the encoder and decoder for y."""

    def __init__(self, lo: float = SIGMA_MIN, hi: float = SIGMA_MAX, levels: int = SCALE_LEVELS):
        self.scales = np.exp(np.linspace(math.log(lo), math.log(hi), levels))
        log_s = np.log(self.scales)
        self._mid = torch.from_numpy(np.exp(0.5 * (log_s[1:] + log_s[:-1])))
        self.half_widths = np.minimum(np.ceil(TAIL_SIGMAS * self.scales), SYMBOL_BOUND).astype(np.int64)
        self._half = torch.from_numpy(self.half_widths)

    def __len__(self) -> int:
        return len(self.scales)

    def index(self, sigma: Tensor) -> Tensor:
        """Nearest table entry in log space."""
        return torch.bucketize(sigma.detach().to(torch.float64).cpu(), self._mid)

    def half_width(self, index: Tensor) -> Tensor:
        return self._half[index]


class FactorizedPrior(nn.Module):
    """Per-channel learned univariate density for z (monotone cumulative network)."""

    def __init__(self, channels: int, filters: Sequence[int] = (3, 3, 3),
                 init_scale: float = 1.0, tail_mass: float = TAIL_MASS):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        self.tail_mass = tail_mass
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1 / scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def logits_cumulative(self, x: Tensor) -> Tensor:
        """``x`` is ``(C, 1, L)``; returns the CDF logits with the same shape."""
        logits = x
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix.to(x.dtype)), logits) + self.biases[i].to(x.dtype)
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i].to(x.dtype)) * torch.tanh(logits)
        return logits

    def _per_channel(self, z: Tensor) -> Tuple[Tensor, tuple]:
        if z.dim() != 4 or z.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {tuple(z.shape)}")
        shape = z.shape
        return z.permute(1, 0, 2, 3).reshape(self.channels, 1, -1), shape

    def cdf(self, z: Tensor) -> Tensor:
        v, shape = self._per_channel(z)
        c = torch.sigmoid(self.logits_cumulative(v))
        return c.reshape(shape[1], shape[0], shape[2], shape[3]).permute(1, 0, 2, 3)

    def likelihood(self, z_hat: Tensor) -> Tensor:
        v, shape = self._per_channel(z_hat)
        lower = self.logits_cumulative(v - 0.5)
        upper = self.logits_cumulative(v + 0.5)
        sign = -torch.sign(lower + upper).detach()
        p = (torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower)).abs()
        p = p.reshape(shape[1], shape[0], shape[2], shape[3]).permute(1, 0, 2, 3)
        return p.clamp(min=P_MIN)

    @torch.no_grad()
    def integer_pmfs(self, bound: int = SYMBOL_BOUND):
        """Per-channel ``(offset, pmf)`` over the integer support, in float64.

        Each support keeps 0 and is trimmed to where a tail of ``tail_mass / 2``
        remains on either side; the trimmed tails are folded into the edge bins.
        """
        ks = torch.arange(-bound, bound + 1, dtype=torch.float64)
        edges = torch.cat([ks - 0.5, ks[-1:] + 0.5])
        logits = self.logits_cumulative(edges.expand(self.channels, 1, -1).contiguous())[:, 0, :]
        below = torch.sigmoid(logits).numpy()   # CDF at each edge
        above = torch.sigmoid(-logits).numpy()  # 1 - CDF at each edge
        half = self.tail_mass / 2
        out = []
        for c in range(self.channels):
            # bin k spans edges[k + bound] .. edges[k + bound + 1]
            lo_candidates = np.nonzero(below[c, 1:] >= half)[0]
            hi_candidates = np.nonzero(above[c, :-1] >= half)[0]
            lo = -bound if len(lo_candidates) == 0 else int(lo_candidates[0]) - bound
            hi = bound if len(hi_candidates) == 0 else int(hi_candidates[-1]) - bound
            lo, hi = min(lo, 0), max(hi, 0)
            a, b = lo + bound, hi + bound
            pmf = below[c, a + 1:b + 2] - below[c, a:b + 1]
            pmf[0] = below[c, a + 1]
            pmf[-1] = above[c, b]
            if lo == hi:
                pmf[:] = 1.0
            out.append((lo, np.clip(pmf, 0.0, None)))
        return out


class CausalAttentionModule(nn.Module):
    """Context model predicting (mu, sigma) for each latent position.

    Each position looks at its 5x5 neighborhood of quantized latents; only the
    12 positions that precede it in raster order are visible through the
    attention mask. The attended summary is fused with the hyper features by
    a pointwise two-layer MLP.
    """

    def __init__(self, N: int, c_ctx: int, kernel: int = 5, num_heads: Optional[int] = None,
                 hidden: Optional[int] = None):
        super().__init__()
        self.N = N
        self.c_ctx = c_ctx
        self.kernel = kernel
        self.num_heads = num_heads or heads_for(N)
        h = self.num_heads
        n = kernel * kernel
        self.query = nn.Linear(c_ctx, N)
        self.key = nn.Linear(N, N)
        self.value = nn.Linear(N, N)
        self.proj = nn.Linear(N, N)
        self.log_tau = nn.Parameter(torch.full((h,), math.log(0.1)))
        self.pos_bias = nn.Parameter(torch.zeros(h, 1, n))
        hidden = hidden or 2 * N
        self.fuse = nn.Sequential(nn.Linear(N + c_ctx, hidden), nn.GELU(), nn.Linear(hidden, 2 * N))
        visible = torch.arange(n) < n // 2
        self.register_buffer("mask", ~visible.reshape(1, 1, n), persistent=False)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp().clamp(min=TAU_MIN)

    def params_from_tokens(self, tokens: Tensor, phi: Tensor) -> Tuple[Tensor, Tensor]:
        """``tokens``: ``(T, k*k, N)`` neighborhoods; ``phi``: ``(T, c_ctx)``."""
        T, n, N = tokens.shape
        h = self.num_heads
        d = N // h
        q = self.query(phi).reshape(T, 1, h, d).transpose(1, 2)
        k = self.key(tokens).reshape(T, n, h, d).transpose(1, 2)
        v = self.value(tokens).reshape(T, n, h, d).transpose(1, 2)
        ctx = scaled_cosine_attention(q, k, v, self.tau.reshape(1, h, 1, 1), self.pos_bias, self.mask)
        ctx = self.proj(ctx.transpose(1, 2).reshape(T, N))
        mu, log_sigma = self.fuse(torch.cat([ctx, phi], dim=-1)).chunk(2, dim=-1)
        return mu, log_sigma.exp().clamp(min=SIGMA_MIN)

    def forward(self, y_hat: Tensor, phi: Tensor) -> EntropyParams:
        """Parallel (training) pass; causality comes from the mask alone."""
        B, N, H, W = y_hat.shape
        if N != self.N or phi.shape != (B, self.c_ctx, H, W):
            raise ValueError(f"shape mismatch: y_hat {tuple(y_hat.shape)}, phi {tuple(phi.shape)}")
        k = self.kernel
        patches = F.unfold(y_hat, k, padding=k // 2)  # (B, N*k*k, H*W)
        tokens = patches.reshape(B, N, k * k, H * W).permute(0, 3, 2, 1).reshape(B * H * W, k * k, N)
        phi_t = phi.permute(0, 2, 3, 1).reshape(B * H * W, self.c_ctx)
        mu, sigma = self.params_from_tokens(tokens, phi_t)
        mu = mu.reshape(B, H, W, N).permute(0, 3, 1, 2)
        sigma = sigma.reshape(B, H, W, N).permute(0, 3, 1, 2)
        return EntropyParams(mu, sigma)

    def sequential(self, phi: Tensor,
                   step: Callable[[int, int, Tensor, Tensor], Tensor]) -> Tuple[Tensor, EntropyParams]:
        """Raster-order pass used by the codec.

        ``step(i, j, mu, sigma)`` returns the quantized latent ``(B, N)`` at
        position ``(i, j)``; positions not yet visited stay zero in the buffer.
        """
        B, _, H, W = phi.shape
        k = self.kernel
        r = k // 2
        buf = phi.new_zeros(B, self.N, H + 2 * r, W + 2 * r)
        mu_all = phi.new_zeros(B, self.N, H, W)
        sigma_all = phi.new_zeros(B, self.N, H, W)
        for i in range(H):
            for j in range(W):
                tokens = buf[:, :, i:i + k, j:j + k].reshape(B, self.N, k * k).transpose(1, 2)
                mu, sigma = self.params_from_tokens(tokens, phi[:, :, i, j])
                buf[:, :, i + r, j + r] = step(i, j, mu, sigma)
                mu_all[:, :, i, j] = mu
                sigma_all[:, :, i, j] = sigma
        return buf[:, :, r:r + H, r:r + W], EntropyParams(mu_all, sigma_all)
