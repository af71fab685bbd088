"""Command line entry point: ``ers2 {train,compress,decompress,eval,bench,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

from .codec import Bitstream, compress, decompress, load_image, save_image
from .evaluation import ablate, eval_dataset, list_images, load_images, report_complexity
from .model import load_checkpoint
from .training import TrainConfig, get_device, train

logger = logging.getLogger("ers2")


def _train_config(args) -> TrainConfig:
    overrides = dict(lam=args.lam, metric=args.metric, N=args.N, steps=args.steps, epochs=args.epochs,
                     batch_size=args.batch_size, crop=args.crop, seed=args.seed, lr=args.lr)
    if args.enhancement is not None:
        overrides["enhancement"] = args.enhancement == "on"
    if args.config:
        return TrainConfig.from_json(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None})


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--lam", type=float)
    p.add_argument("--metric", choices=["mse", "ms-ssim"])
    p.add_argument("--N", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--enhancement", choices=["on", "off"])


def cmd_train(args) -> int:
    cfg = _train_config(args)
    result = train(cfg, args.dataset, args.out)
    print(f"wrote {len(result.checkpoints)} checkpoint(s); last: {result.checkpoints[-1]}")
    return 0


def cmd_compress(args) -> int:
    model = load_checkpoint(args.model, map_location=get_device()).cpu()
    bs = compress(load_image(args.input), model)
    data = bs.to_bytes()
    Path(args.output).write_bytes(data)
    print(f"{args.output}: {len(data)} bytes, {8 * len(data) / (bs.width * bs.height):.4f} bpp")
    return 0


def cmd_decompress(args) -> int:
    model = load_checkpoint(args.model).cpu()
    x_hat = decompress(Bitstream.from_bytes(Path(args.input).read_bytes()), model)
    save_image(x_hat, args.output)
    print(f"{args.output}: {x_hat.shape[-1]}x{x_hat.shape[-2]}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model).cpu()
    records, mean = eval_dataset(model, args.dataset, args.out, args.dump_dir)
    print(f"{len(records)} images: {mean.bpp:.4f} bpp, {mean.psnr_db:.2f} dB, "
          f"MS-SSIM {mean.ms_ssim:.4f} -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    model = load_checkpoint(args.model).cpu()
    images = load_images(list_images(args.images))[: args.max_images]
    if not images:
        print(f"no readable images in {args.images}", file=sys.stderr)
        return 1
    rep = report_complexity(model, images, runs=args.runs)
    rep.checkpoint_bytes = Path(args.model).stat().st_size
    text = json.dumps(asdict(rep), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    rows = ablate(cfg, args.dataset, args.eval_dataset or args.dataset, args.work_dir, args.out)
    for r in rows:
        print(f"{r['variant']:>16}: params={r['params']} bpp={r['bpp']:.4f} "
              f"psnr={r['psnr_db']:.2f} ms-ssim={r['ms_ssim']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ers2", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an image folder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="encode a PNG into an .ers2 file")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="decode an .ers2 file into a PNG")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="RD evaluation over an image folder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--dump-dir", help="also write reconstructions here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="parameter count, model size and coding time")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--max-images", type=int, default=4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="paired enhancement on/off training and evaluation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--eval-dataset")
    p.add_argument("--work-dir", required=True)
    p.add_argument("--out", required=True, help="paired report CSV")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError) as e:
        print(f"ers2 {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
