import csv
import json
import math

import numpy as np
import pytest
import torch
from PIL import Image

from ers2.cli import main
from ers2.codec import compress, decompress, load_image
from ers2.evaluation import (
    CSV_FIELDS,
    RDRecord,
    aggregate,
    aggregate_path,
    bpp_from_size,
    eval_dataset,
    report_complexity,
)
from ers2.model import save_checkpoint


TINY_JSON = {"N": 8, "M": 8, "crop": 64, "batch_size": 2, "seed": 3,
             "model": {"cpb_hidden": 16, "growth": 4, "mlp_ratio": 2.0}}


@pytest.fixture
def ckpt(tiny_model, tmp_path):
    return save_checkpoint(tiny_model, tmp_path / "tiny.pt")


def read_csv(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_bpp_from_file_size():
    assert bpp_from_size(24576, 768, 512) == 0.5


def test_aggregate_uses_finite_psnr_only():
    recs = [RDRecord("a", 0.2, 30.0, 0.9, 1, 1), RDRecord("b", 0.4, math.inf, 1.0, 1, 1),
            RDRecord("c", 0.6, 40.0, 0.8, 1, 1)]
    mean = aggregate(recs)
    assert abs(mean.psnr_db - 35.0) < 1e-9
    assert abs(mean.bpp - 0.4) < 1e-12


def test_eval_dataset_24_images(tiny_model, tmp_path):
    d = tmp_path / "kodak_like"
    d.mkdir()
    rng = np.random.default_rng(0)
    for i in range(24):
        Image.fromarray(rng.integers(0, 256, (24, 36, 3), dtype=np.uint8)).save(d / f"kodim{i + 1:02d}.png")
    out = tmp_path / "rd.csv"
    records, mean = eval_dataset(tiny_model, d, out, tmp_path / "dump")
    rows = read_csv(out)
    assert tuple(rows[0]) == CSV_FIELDS and len(rows) == 25
    assert len(records) == 24
    agg = read_csv(aggregate_path(out))
    assert agg[1][0] == "mean"
    assert abs(mean.psnr_db - np.mean([r.psnr_db for r in records])) < 1e-9
    for r in records:
        size = len(compress(load_image(d / f"{r.image_id}.png"), tiny_model).to_bytes())
        assert r.bpp == 8 * size / (36 * 24)
        assert 0 <= r.ms_ssim <= 1
    assert len(list((tmp_path / "dump").iterdir())) == 24


def test_eval_skips_unreadable(tiny_model, photo_dir, tmp_path, caplog):
    (photo_dir / "broken.png").write_bytes(b"not a png")
    records, _ = eval_dataset(tiny_model, photo_dir)
    assert len(records) == 4
    assert "broken" in caplog.text


def test_eval_all_unreadable_fails(tiny_model, tmp_path, ckpt):
    (tmp_path / "e").mkdir()
    (tmp_path / "e" / "x.png").write_bytes(b"junk")
    with pytest.raises(RuntimeError):
        eval_dataset(tiny_model, tmp_path / "e")
    assert main(["eval", "--dataset", str(tmp_path / "e"), "--model", str(ckpt),
                 "--out", str(tmp_path / "rd.csv")]) != 0


def test_complexity_report(tiny_model):
    rep = report_complexity(tiny_model, [("r", torch.rand(1, 3, 16, 16))], runs=3)
    assert rep.param_total == sum(rep.params.values()) == sum(p.numel() for p in tiny_model.parameters())
    assert rep.checkpoint_bytes > 4 * rep.param_total
    assert rep.enc_s > 0 and rep.dec_s > 0 and "cpu" in rep.device
    with pytest.raises(ValueError):
        report_complexity(tiny_model, [], runs=2)


def test_param_count_matches_checkpoint_walk(tiny_model, ckpt):
    blob = torch.load(ckpt, weights_only=True)
    walked = sum(t.numel() for t in blob["params"].values())
    assert walked == sum(tiny_model.param_counts().values())


def test_cli_roundtrip(tiny_model, ckpt, photo_dir, tmp_path):
    src = photo_dir / "coffee.png"
    enc, dec = tmp_path / "c.ers2", tmp_path / "c.png"
    assert main(["compress", "-i", str(src), "-o", str(enc), "--model", str(ckpt)]) == 0
    assert main(["decompress", "-i", str(enc), "-o", str(dec), "--model", str(ckpt)]) == 0
    assert enc.read_bytes() == compress(load_image(src), tiny_model).to_bytes()
    expected = decompress(enc.read_bytes(), tiny_model)
    got = load_image(dec)
    assert got.shape == expected.shape
    assert torch.equal(got, (expected * 255).round() / 255)


def test_cli_usage_errors(capsys):
    assert main(["compress", "-i", "x.png"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main([]) == 2
    assert main(["frobnicate"]) == 2


def test_cli_eval_and_bench(ckpt, photo_dir, tmp_path, capsys):
    out = tmp_path / "rd.csv"
    assert main(["eval", "--dataset", str(photo_dir), "--model", str(ckpt), "--out", str(out)]) == 0
    assert len(read_csv(out)) == 5
    rep = tmp_path / "bench.json"
    assert main(["bench", "--model", str(ckpt), "--images", str(photo_dir), "--max-images", "1",
                 "--out", str(rep)]) == 0
    data = json.loads(rep.read_text())
    assert data["checkpoint_bytes"] == ckpt.stat().st_size
    assert data["param_total"] == sum(data["params"].values())


def test_cli_train_and_ablate(photo_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY_JSON))
    assert main(["train", "--dataset", str(photo_dir), "--out", str(tmp_path / "run"),
                 "--config", str(cfg), "--steps", "2"]) == 0
    assert (tmp_path / "run" / "ckpt_0000002.pt").exists()

    report = tmp_path / "ablation.csv"
    assert main(["ablate", "--dataset", str(photo_dir), "--work-dir", str(tmp_path / "abl"),
                 "--out", str(report), "--config", str(cfg), "--steps", "2"]) == 0
    rows = list(csv.DictReader(open(report)))
    assert [r["variant"] for r in rows] == ["swinv2", "enhance+swinv2"]
    assert int(rows[0]["params"]) < int(rows[1]["params"])
    for col in ("bpp", "psnr_db", "ms_ssim", "enc_s", "dec_s"):
        assert all(math.isfinite(float(r[col])) for r in rows)
