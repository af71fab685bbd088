"""The full codec network and its checkpoint format."""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .enhancement import FeatureEnhancement
from .entropy_models import (
    CausalAttentionModule,
    FactorizedPrior,
    ScaleTable,
    gaussian_likelihood,
    quantize,
)
from .transforms import (
    PAD_MULTIPLE,
    AnalysisTransform,
    HyperAnalysis,
    HyperSynthesis,
    ModelConfig,
    SynthesisTransform,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "ers2-checkpoint"
CHECKPOINT_VERSION = 1


def pad_image(x: Tensor, multiple: int = PAD_MULTIPLE) -> Tensor:
    H, W = x.shape[-2:]
    Hp, Wp = -(-H // multiple) * multiple, -(-W // multiple) * multiple
    if (Hp, Wp) == (H, W):
        return x
    return F.pad(x, (0, Wp - W, 0, Hp - H), mode="replicate")


class ERS2Model(nn.Module):
    """Enhancement -> g_a -> (h_a, h_s, CAM) -> g_s.

    In training mode both latents are perturbed with uniform noise and the
    context model runs in parallel. In eval mode z is rounded and y is
    quantized with mean-centered rounding in raster order, exactly as the
    codec does it.
    """

    def __init__(self, cfg: Optional[ModelConfig] = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.enhance = FeatureEnhancement(3, cfg.growth) if cfg.enhancement else None
        self.g_a = AnalysisTransform(cfg)
        self.g_s = SynthesisTransform(cfg)
        self.h_a = HyperAnalysis(cfg)
        self.h_s = HyperSynthesis(cfg)
        self.cam = CausalAttentionModule(cfg.N, cfg.c_ctx)
        self.z_prior = FactorizedPrior(cfg.M, init_scale=cfg.factorized_init_scale)
        self.scale_table = ScaleTable()

    def analyse(self, x_padded: Tensor) -> Tensor:
        t = self.enhance(x_padded) if self.enhance is not None else x_padded
        return self.g_a(t)

    def quantize_y_sequential(self, y: Tensor, phi: Tensor):
        """Mean-centered rounding in raster order, clamped to the coder's alphabet.

        Returns ``(y_hat, params, symbols, scale_indexes, clamped_count)``.
        """
        symbols = torch.zeros(y.shape, dtype=torch.int64)
        indexes = torch.zeros(y.shape, dtype=torch.int64)
        clamped = [0]

        def step(i, j, mu, sigma):
            idx = self.scale_table.index(sigma)
            half = self.scale_table.half_width(idx)
            q = torch.round(y[:, :, i, j] - mu).to(torch.int64).cpu()
            qc = torch.maximum(torch.minimum(q, half), -half)
            clamped[0] += int((qc != q).sum())
            symbols[:, :, i, j] = qc
            indexes[:, :, i, j] = idx
            return qc.to(mu.dtype).to(mu.device) + mu

        y_hat, params = self.cam.sequential(phi, step)
        return y_hat, params, symbols, indexes, clamped[0]

    def forward(self, x: Tensor, generator: Optional[torch.Generator] = None) -> Dict[str, object]:
        H, W = x.shape[-2:]
        xp = pad_image(x)
        y = self.analyse(xp)
        z = self.h_a(y)
        if self.training:
            z_hat = quantize(z, "noise", generator=generator)
            phi = self.h_s(z_hat)
            y_hat = quantize(y, "noise", generator=generator)
            params = self.cam(y_hat, phi)
        else:
            z_hat = quantize(z, "round")
            phi = self.h_s(z_hat)
            y_hat, params, _, _, n_clamped = self.quantize_y_sequential(y, phi)
            if n_clamped:
                logger.warning("%d latent symbols clamped to the coder alphabet", n_clamped)
        x_hat = self.g_s(y_hat)[..., :H, :W]
        return {
            "x_hat": x_hat,
            "y": y,
            "z": z,
            "y_hat": y_hat,
            "z_hat": z_hat,
            "params": params,
            "likelihoods": {
                "y": gaussian_likelihood(y_hat, params.mu, params.sigma),
                "z": self.z_prior.likelihood(z_hat),
            },
        }

    def module_groups(self) -> Dict[str, nn.Module]:
        groups = {"enhance": self.enhance, "g_a": self.g_a, "g_s": self.g_s, "h_a": self.h_a,
                  "h_s": self.h_s, "cam": self.cam, "z_prior": self.z_prior}
        return {k: v for k, v in groups.items() if v is not None}

    def param_counts(self) -> Dict[str, int]:
        return {k: sum(p.numel() for p in m.parameters()) for k, m in self.module_groups().items()}

    def fingerprint(self) -> bytes:
        """8-byte digest of the config and every parameter value."""
        h = hashlib.sha256(self.cfg.digest())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.detach().cpu().float().numpy()).tobytes())
        return h.digest()[:8]


def save_checkpoint(model: ERS2Model, path: Union[str, Path], **meta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "params": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": meta,
    }, path)
    return path


def load_checkpoint(path: Union[str, Path], map_location="cpu") -> ERS2Model:
    blob = torch.load(path, map_location=map_location, weights_only=True)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an ERS2 checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = ERS2Model(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["params"])
    model.eval()
    return model
