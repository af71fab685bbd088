"""Rate-distortion objective and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import torch
from torch import Tensor

from .codec import load_image
from .entropy_models import rate_estimate
from .metrics import ms_ssim
from .model import ERS2Model, save_checkpoint
from .nn_blocks import clamp_tau_
from .transforms import MSE_LAMBDAS, MSSSIM_LAMBDAS, METRICS, ModelConfig

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def get_device() -> torch.device:
    return torch.device(os.environ.get("ERS2_DEVICE", "cpu"))


def rd_loss(x: Tensor, x_hat: Tensor, bits_y: Tensor, bits_z: Tensor, lam: float,
            metric: str, num_pixels: int, mse_scale: float = 255.0) -> Dict[str, Tensor]:
    """``bpp + lam * D`` with D = MSE (on the ``mse_scale`` range) or 1 - MS-SSIM."""
    bpp = (bits_y + bits_z) / num_pixels
    if metric == "mse":
        dist = ((x - x_hat) * mse_scale).pow(2).mean()
    elif metric == "ms-ssim":
        dist = 1.0 - ms_ssim(x, x_hat, data_range=1.0)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return {"loss": bpp + lam * dist, "bpp": bpp, "distortion": dist}


def model_loss(model: ERS2Model, x: Tensor, generator: Optional[torch.Generator] = None,
               mse_scale: float = 255.0) -> Dict[str, Tensor]:
    out = model(x, generator=generator)
    lik = out["likelihoods"]
    B, _, H, W = x.shape
    res = rd_loss(x, out["x_hat"], rate_estimate(lik["y"]), rate_estimate(lik["z"]),
                  model.cfg.lam, model.cfg.metric, B * H * W, mse_scale)
    res["x_hat"] = out["x_hat"]
    return res


@dataclass
class TrainConfig:
    lam: float = 0.015
    metric: str = "mse"
    N: Optional[int] = None
    M: int = 192
    enhancement: bool = True
    crop: int = 256
    lr: float = 1e-4
    epochs: int = 1
    steps: Optional[int] = None
    batch_size: int = 8
    seed: int = 0
    clip: float = 1.0
    mse_scale: float = 255.0
    log_every: int = 10
    ckpt_every: int = 1000
    model: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.N is None:
            self.N = default_width(self.metric, self.lam)

    def model_config(self) -> ModelConfig:
        return ModelConfig(N=self.N, M=self.M, enhancement=self.enhancement,
                           metric=self.metric, lam=self.lam, **self.model)

    @classmethod
    def from_json(cls, path: Union[str, Path], **overrides) -> "TrainConfig":
        with open(path) as f:
            d = json.load(f)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def to_json(self, path: Union[str, Path]) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)


def default_width(metric: str, lam: float) -> int:
    """N=128 for the low-rate published points, 192 above them."""
    if metric == "mse":
        return 128 if lam <= MSE_LAMBDAS[3] else 192
    return 128 if lam <= MSSSIM_LAMBDAS[1] else 192


class ImageFolder:
    """RGB images under a directory, served as random square crops."""

    def __init__(self, root: Union[str, Path], crop: int):
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
        self.crop = crop
        self.images: List[Tensor] = []
        for p in files:
            try:
                img = load_image(p)
            except Exception as e:  # unreadable files are skipped, not fatal
                logger.warning("skipping %s: %s", p, e)
                continue
            if min(img.shape[-2:]) < crop:
                logger.warning("skipping %s: smaller than crop %d", p, crop)
                continue
            self.images.append(img[0])
        if not self.images:
            raise ValueError(f"no usable training images (>= {crop}px) under {root}")

    def __len__(self) -> int:
        return len(self.images)

    def sample(self, index: int, generator: torch.Generator) -> Tensor:
        img = self.images[index]
        H, W = img.shape[-2:]
        top = int(torch.randint(0, H - self.crop + 1, (1,), generator=generator))
        left = int(torch.randint(0, W - self.crop + 1, (1,), generator=generator))
        return img[:, top:top + self.crop, left:left + self.crop]


@dataclass
class TrainResult:
    model: ERS2Model
    checkpoints: List[Path]
    history: List[Dict[str, float]]


def train(cfg: TrainConfig, dataset_dir: Union[str, Path], out_dir: Union[str, Path],
          model: Optional[ERS2Model] = None) -> TrainResult:
    """Adam on the noise-relaxed RD loss; writes ``train_log.csv`` and checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = ImageFolder(dataset_dir, cfg.crop)
    device = get_device()
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    noise_gen = torch.Generator(device=device).manual_seed(cfg.seed + 1)
    if model is None:
        model = ERS2Model(cfg.model_config())
    model.to(device).train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    batches_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * batches_per_epoch
    cfg.to_json(out_dir / "train_config.json")
    history: List[Dict[str, float]] = []
    checkpoints: List[Path] = []
    order: List[int] = []
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        log = csv.writer(f)
        log.writerow(["step", "loss", "bpp", "distortion"])
        for step in range(1, total + 1):
            if len(order) < cfg.batch_size:
                order += torch.randperm(len(data), generator=gen).tolist() * max(
                    1, math.ceil(cfg.batch_size / len(data)))
            idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
            x = torch.stack([data.sample(i, gen) for i in idx]).to(device)
            res = model_loss(model, x, noise_gen, cfg.mse_scale)
            opt.zero_grad()
            res["loss"].backward()
            if cfg.clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip)
            opt.step()
            clamp_tau_(model)
            rec = {"step": step, "loss": res["loss"].item(), "bpp": res["bpp"].item(),
                   "distortion": res["distortion"].item()}
            history.append(rec)
            log.writerow([step, rec["loss"], rec["bpp"], rec["distortion"]])
            if step % cfg.log_every == 0 or step == 1:
                logger.info("step %d loss %.4f bpp %.4f D %.4f", step, rec["loss"], rec["bpp"],
                            rec["distortion"])
            if step % cfg.ckpt_every == 0 or step == total:
                checkpoints.append(save_checkpoint(model, out_dir / f"ckpt_{step:07d}.pt", step=step))
    model.eval()
    return TrainResult(model, checkpoints, history)
