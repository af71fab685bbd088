"""SwinV2 attention primitives and the residual SwinV2 transformer block (RS2TB).

Feature maps enter the blocks channels-first ``(B, C, H, W)``; inside a block
tokens are kept channels-last ``(B, H, W, C)`` so that linear layers and layer
norms act on the trailing channel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

TAU_MIN = 0.01
COS_EPS = 1e-6
# Effectively -inf: logits are bounded by 1 / TAU_MIN + max|S| (~116).
MASK_VALUE = -1e4
CPB_NORM = math.log(8.0)
CPB_BIAS_SCALE = 16.0


def heads_for(channels: int, min_heads: int = 4, head_width: int = 32) -> int:
    """Default head count: channels / 32, at least 4, always a divisor."""
    target = max(min_heads, channels // head_width)
    for h in range(min(target, channels), 0, -1):
        if channels % h == 0:
            return h
    return 1


@dataclass
class RS2TBConfig:
    depth: int = 2
    window_size: int = 8
    num_heads: Optional[int] = None
    mlp_ratio: float = 4.0
    cpb_hidden: int = 512
    norm_init: float = 0.1

    def __post_init__(self):
        if self.depth < 2 or self.depth % 2:
            raise ValueError(f"depth must be even and >= 2, got {self.depth}")
        if self.window_size < 1:
            raise ValueError(f"window_size must be positive, got {self.window_size}")


@dataclass
class TokenWindows:
    """Tokens grouped into non-overlapping ``w x w`` windows.

    ``windows`` has shape ``(B * rows * cols, w * w, C)``.
    """

    windows: Tensor
    grid: Tuple[int, int]
    window_size: int
    shift: int
    padded_hw: Tuple[int, int]
    batch: int


def window_partition(f: Tensor, window_size: int, shift: int = 0) -> TokenWindows:
    """Split a channels-last map ``(B, H, W, C)`` into (optionally shifted) windows.

    The map is replicate-padded on the bottom/right to a multiple of the
    window size, then cyclically rolled by ``-shift`` along both spatial axes.
    """
    w = int(window_size)
    if w < 1:
        raise ValueError(f"window size must be positive, got {window_size}")
    if shift not in (0, w // 2):
        raise ValueError(f"shift must be 0 or {w // 2}, got {shift}")
    if f.dim() != 4:
        raise ValueError(f"expected (B, H, W, C) tensor, got shape {tuple(f.shape)}")
    B, H, W, C = f.shape
    if H < 1 or W < 1:
        raise ValueError("feature map must have non-empty spatial dims")
    Hp, Wp = -(-H // w) * w, -(-W // w) * w
    if (Hp, Wp) != (H, W):
        f = F.pad(f.permute(0, 3, 1, 2), (0, Wp - W, 0, Hp - H), mode="replicate")
        f = f.permute(0, 2, 3, 1)
    if shift:
        f = torch.roll(f, shifts=(-shift, -shift), dims=(1, 2))
    rows, cols = Hp // w, Wp // w
    win = f.reshape(B, rows, w, cols, w, C).permute(0, 1, 3, 2, 4, 5)
    win = win.reshape(B * rows * cols, w * w, C)
    return TokenWindows(win, (rows, cols), w, shift, (Hp, Wp), B)


def window_unpartition(tw: TokenWindows, orig_hw: Tuple[int, int]) -> Tensor:
    """Inverse of :func:`window_partition`: undo the shift and crop the padding."""
    rows, cols = tw.grid
    w = tw.window_size
    Hp, Wp = tw.padded_hw
    H, W = orig_hw
    if rows * w != Hp or cols * w != Wp:
        raise ValueError("token windows are internally inconsistent")
    if not (0 < H <= Hp and 0 < W <= Wp) or Hp - H >= w or Wp - W >= w:
        raise ValueError(f"original dims {orig_hw} do not match padded dims {tw.padded_hw}")
    n, tokens, C = tw.windows.shape
    if n != tw.batch * rows * cols or tokens != w * w:
        raise ValueError("token windows are internally inconsistent")
    f = tw.windows.reshape(tw.batch, rows, cols, w, w, C).permute(0, 1, 3, 2, 4, 5)
    f = f.reshape(tw.batch, Hp, Wp, C)
    if tw.shift:
        f = torch.roll(f, shifts=(tw.shift, tw.shift), dims=(1, 2))
    return f[:, :H, :W, :]


@lru_cache(maxsize=64)
def _shift_mask_cpu(Hp: int, Wp: int, w: int, shift: int) -> Tensor:
    # labels live in the already-rolled frame: the last `shift` rows/cols wrapped around
    labels = torch.zeros(Hp, Wp, dtype=torch.long)
    cnt = 0
    bounds = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    for hs in bounds:
        for ws in bounds:
            labels[hs, ws] = cnt
            cnt += 1
    labels = labels.reshape(Hp // w, w, Wp // w, w).permute(0, 2, 1, 3).reshape(-1, w * w)
    return labels[:, :, None] != labels[:, None, :]


def shifted_window_mask(padded_hw: Tuple[int, int], window_size: int, shift: int,
                        device=None) -> Optional[Tensor]:
    """Boolean mask ``(num_windows, w*w, w*w)``; True blocks wrapped-around pairs."""
    if shift == 0:
        return None
    return _shift_mask_cpu(padded_hw[0], padded_hw[1], window_size, shift).to(device)


def cosine_logits(q: Tensor, k: Tensor, tau: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``cos(q, k) / max(tau, TAU_MIN) + bias``; bounded by ``1 / TAU_MIN + max|bias|``."""
    tau = torch.as_tensor(tau, dtype=q.dtype, device=q.device).clamp(min=TAU_MIN)
    qn = F.normalize(q, dim=-1, eps=COS_EPS)
    kn = F.normalize(k, dim=-1, eps=COS_EPS)
    logits = (qn @ kn.transpose(-2, -1)) / tau
    if bias is not None:
        logits = logits + bias
    return logits


def scaled_cosine_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    tau: Tensor,
    bias: Optional[Tensor] = None,
    mask: Optional[Tensor] = None,
    return_weights: bool = False,
):
    """``softmax(cos(q, k) / tau + bias) @ v``.

    Args:
        q: queries ``(..., n_q, d)``.
        k, v: keys and values ``(..., n_k, d)``.
        tau: temperature, broadcastable against ``(..., n_q, n_k)``; it is
            clamped to ``TAU_MIN`` here as well.
        bias: additive bias broadcastable against the logits.
        mask: boolean, True where attention is forbidden.
    """
    logits = cosine_logits(q, k, tau, bias)
    if mask is not None:
        logits = logits.masked_fill(mask, MASK_VALUE)
    weights = logits.softmax(dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def relative_offsets(window_size: int) -> Tensor:
    """All ``(2w-1)^2`` integer offsets ``(dy, dx)`` in row-major order."""
    r = torch.arange(-(window_size - 1), window_size)
    dy, dx = torch.meshgrid(r, r, indexing="ij")
    return torch.stack([dy.reshape(-1), dx.reshape(-1)], dim=-1)


def log_spaced_coords(offsets: Tensor) -> Tensor:
    offsets = offsets.to(torch.get_default_dtype())
    return torch.sign(offsets) * torch.log1p(offsets.abs()) / CPB_NORM


class LogCPB(nn.Module):
    """Log-spaced continuous position bias for a ``w x w`` window.

    A two-layer MLP maps each log-scaled relative offset to one bias per head;
    the result is squashed to ``(0, 16)`` as in SwinV2.
    """

    def __init__(self, window_size: int, num_heads: int, hidden: int = 512):
        super().__init__()
        self.window_size = window_size
        self.num_heads = num_heads
        self.mlp = nn.Sequential(
            nn.Linear(2, hidden, bias=True),
            nn.ReLU(inplace=False),
            nn.Linear(hidden, num_heads, bias=False),
        )
        offsets = relative_offsets(window_size)
        self.register_buffer("coords", log_spaced_coords(offsets), persistent=False)
        # pair (i, j) inside the window -> row of the offset table
        pos = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size),
                                         indexing="ij"), dim=-1).reshape(-1, 2)
        rel = pos[:, None, :] - pos[None, :, :] + (window_size - 1)
        index = rel[..., 0] * (2 * window_size - 1) + rel[..., 1]
        self.register_buffer("index", index, persistent=False)

    def table(self) -> Tensor:
        """Bias per unique offset, shape ``((2w-1)^2, heads)``."""
        return CPB_BIAS_SCALE * torch.sigmoid(self.mlp(self.coords.to(self.mlp[0].weight.dtype)))

    def forward(self) -> Tensor:
        n = self.window_size ** 2
        return self.table()[self.index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)


class WindowAttentionV2(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, cpb_hidden: int = 512):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.log_tau = nn.Parameter(torch.full((num_heads,), math.log(0.1)))
        self.cpb = LogCPB(window_size, num_heads, cpb_hidden)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp().clamp(min=TAU_MIN)

    def forward(self, x: Tensor, mask: Optional[Tensor] = None) -> Tensor:
        Bw, n, C = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(Bw, n, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        bias = self.cpb()
        if mask is not None:
            nw = mask.shape[0]
            q, k, v = (t.reshape(Bw // nw, nw, h, n, C // h) for t in (q, k, v))
            mask = mask[None, :, None]
            tau = self.tau.reshape(1, 1, h, 1, 1)
        else:
            tau = self.tau.reshape(1, h, 1, 1)
        out = scaled_cosine_attention(q, k, v, tau, bias, mask)
        out = out.reshape(Bw, h, n, C // h).transpose(1, 2).reshape(Bw, n, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class SwinV2Block(nn.Module):
    """One (shifted) window attention block with post-normalization.

    ``x + LN(attn(x))`` followed by ``x + LN(mlp(x))``. ``prenorm=True``
    gives the Swin V1 ordering and exists only as a comparison baseline.
    """

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: int = 0,
                 mlp_ratio: float = 4.0, cpb_hidden: int = 512, norm_init: Optional[float] = 0.1,
                 prenorm: bool = False):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.prenorm = prenorm
        self.attn = WindowAttentionV2(dim, num_heads, window_size, cpb_hidden)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self.norm2 = nn.LayerNorm(dim)
        if norm_init is not None and not prenorm:
            nn.init.constant_(self.norm1.weight, norm_init)
            nn.init.constant_(self.norm2.weight, norm_init)

    def _window_attn(self, x: Tensor) -> Tensor:
        H, W = x.shape[1:3]
        tw = window_partition(x, self.window_size, self.shift)
        mask = shifted_window_mask(tw.padded_hw, self.window_size, self.shift, x.device)
        tw.windows = self.attn(tw.windows, mask)
        return window_unpartition(tw, (H, W))

    def forward(self, x: Tensor) -> Tensor:
        if self.prenorm:
            x = x + self._window_attn(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        x = x + self.norm1(self._window_attn(x))
        return x + self.norm2(self.mlp(x))


class RS2TB(nn.Module):
    """Residual SwinV2 transformer block: ``FU(blocks(FE(f))) + f``."""

    def __init__(self, dim: int, cfg: Optional[RS2TBConfig] = None):
        super().__init__()
        cfg = cfg or RS2TBConfig()
        self.dim = dim
        self.cfg = cfg
        heads = cfg.num_heads or heads_for(dim)
        w = cfg.window_size
        self.blocks = nn.ModuleList(
            SwinV2Block(dim, heads, w, shift=0 if i % 2 == 0 else w // 2,
                        mlp_ratio=cfg.mlp_ratio, cpb_hidden=cfg.cpb_hidden,
                        norm_init=cfg.norm_init)
            for i in range(cfg.depth)
        )

    def forward(self, f: Tensor) -> Tensor:
        if f.dim() != 4 or f.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} channels, got shape {tuple(f.shape)}")
        t = f.permute(0, 2, 3, 1)  # FE
        for blk in self.blocks:
            t = blk(t)
        return t.permute(0, 3, 1, 2) + f  # FU + skip


def clamp_tau_(module: nn.Module) -> None:
    """Project every attention temperature back onto ``tau >= TAU_MIN``."""
    floor = math.log(TAU_MIN)
    for m in module.modules():
        log_tau = getattr(m, "log_tau", None)
        if isinstance(log_tau, nn.Parameter):
            with torch.no_grad():
                log_tau.clamp_(min=floor)
