"""Dataset evaluation, RD records, complexity reports and the enhancement ablation."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import Tensor

from .codec import compress, decompress, load_image, save_image
from .metrics import ms_ssim, psnr
from .model import ERS2Model, save_checkpoint
from .training import IMAGE_SUFFIXES, TrainConfig, get_device, train

logger = logging.getLogger(__name__)

CSV_FIELDS = ("image_id", "bpp", "psnr_db", "ms_ssim", "enc_s", "dec_s")


@dataclass
class RDRecord:
    image_id: str
    bpp: float
    psnr_db: float
    ms_ssim: float
    enc_s: float
    dec_s: float


def bpp_from_size(num_bytes: int, width: int, height: int) -> float:
    return 8.0 * num_bytes / (width * height)


def _mean_finite(values: Sequence[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else math.inf


def aggregate(records: Sequence[RDRecord], image_id: str = "mean") -> RDRecord:
    cols = {f: _mean_finite([getattr(r, f) for r in records]) for f in CSV_FIELDS[1:]}
    return RDRecord(image_id=image_id, **cols)


def evaluate_image(model: ERS2Model, x: Tensor, image_id: str) -> Tuple[RDRecord, Tensor]:
    t0 = time.perf_counter()
    data = compress(x, model).to_bytes()
    t1 = time.perf_counter()
    x_hat = decompress(data, model)
    t2 = time.perf_counter()
    H, W = x.shape[-2:]
    rec = RDRecord(
        image_id=image_id,
        bpp=bpp_from_size(len(data), W, H),
        psnr_db=psnr(x, x_hat),
        ms_ssim=float(ms_ssim(x.double(), x_hat.double())),
        enc_s=t1 - t0,
        dec_s=t2 - t1,
    )
    return rec, x_hat


def list_images(directory: Union[str, Path]) -> List[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def aggregate_path(out_csv: Union[str, Path]) -> Path:
    out_csv = Path(out_csv)
    return out_csv.with_name(out_csv.stem + "_mean.csv")


def write_csv(path: Union[str, Path], records: Sequence[RDRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(asdict(r))


def eval_dataset(model: ERS2Model, directory: Union[str, Path], out_csv: Optional[Union[str, Path]] = None,
                 dump_dir: Optional[Union[str, Path]] = None) -> Tuple[List[RDRecord], RDRecord]:
    """Compress and decompress every image; bpp comes from the real file size.

    ``out_csv`` gets one row per image. The aggregate row goes to a sibling
    ``<stem>_mean.csv`` with the same columns, so the per-image file stays a
    plain table.
    """
    records = []
    paths = list_images(directory)
    if dump_dir is not None:
        Path(dump_dir).mkdir(parents=True, exist_ok=True)
    for p in paths:
        try:
            x = load_image(p)
        except Exception as e:
            logger.warning("skipping unreadable image %s: %s", p, e)
            continue
        rec, x_hat = evaluate_image(model, x, p.stem)
        logger.info("%s: %.4f bpp, %.2f dB", p.stem, rec.bpp, rec.psnr_db)
        records.append(rec)
        if dump_dir is not None:
            save_image(x_hat, Path(dump_dir) / f"{p.stem}.png")
    if not records:
        raise RuntimeError(f"no decodable images in {directory}")
    mean = aggregate(records)
    if out_csv is not None:
        write_csv(out_csv, records)
        write_csv(aggregate_path(out_csv), [mean])
    return records, mean


@dataclass
class ComplexityReport:
    param_total: int
    params: Dict[str, int]
    checkpoint_bytes: int
    enc_s: float
    dec_s: float
    device: str
    runs: int
    images: List[str] = field(default_factory=list)


def load_images(paths: Sequence[Path]) -> List[Tuple[str, Tensor]]:
    """Decode what can be decoded, warning about the rest."""
    out = []
    for p in paths:
        try:
            out.append((p.stem, load_image(p)))
        except Exception as e:
            logger.warning("skipping unreadable image %s: %s", p, e)
    return out


def report_complexity(model: ERS2Model, images: Sequence[Tuple[str, Tensor]], runs: int = 3) -> ComplexityReport:
    """Parameter counts, checkpoint size and mean enc/dec wall-clock over warm runs."""
    if runs < 3:
        raise ValueError("need at least 3 timed runs")
    counts = model.param_counts()
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = save_checkpoint(model, Path(tmp) / "model.pt")
        size = os.path.getsize(ckpt)
    enc, dec = [], []
    for _, x in images:
        data = compress(x, model).to_bytes()  # warm-up
        decompress(data, model)
        for _ in range(runs):
            t0 = time.perf_counter()
            data = compress(x, model).to_bytes()
            t1 = time.perf_counter()
            decompress(data, model)
            t2 = time.perf_counter()
            enc.append(t1 - t0)
            dec.append(t2 - t1)
    return ComplexityReport(
        param_total=sum(counts.values()),
        params=counts,
        checkpoint_bytes=size,
        enc_s=sum(enc) / len(enc) if enc else 0.0,
        dec_s=sum(dec) / len(dec) if dec else 0.0,
        device=f"{get_device()} ({torch.get_num_threads()} threads)",
        runs=runs,
        images=[name for name, _ in images],
    )


ABLATION_FIELDS = ("variant", "enhancement", "params", "bpp", "psnr_db", "ms_ssim", "enc_s", "dec_s")


def ablate(cfg: TrainConfig, train_dir: Union[str, Path], eval_dir: Union[str, Path],
           work_dir: Union[str, Path], out_csv: Optional[Union[str, Path]] = None) -> List[Dict[str, object]]:
    """Train with and without the enhancement module under one seed and compare them."""
    work_dir = Path(work_dir)
    rows = []
    for name, enh in (("swinv2", False), ("enhance+swinv2", True)):
        run_cfg = TrainConfig(**{**asdict(cfg), "enhancement": enh})
        result = train(run_cfg, train_dir, work_dir / name)
        _, mean = eval_dataset(result.model, eval_dir, work_dir / f"{name}_rd.csv")
        rows.append({
            "variant": name,
            "enhancement": enh,
            "params": sum(result.model.param_counts().values()),
            "bpp": mean.bpp,
            "psnr_db": mean.psnr_db,
            "ms_ssim": mean.ms_ssim,
            "enc_s": mean.enc_s,
            "dec_s": mean.dec_s,
        })
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
            w.writeheader()
            w.writerows(rows)
    return rows
