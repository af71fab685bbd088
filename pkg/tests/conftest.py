from __future__ import annotations

import numpy as np
import pytest
import torch
from PIL import Image

from ers2.model import ERS2Model
from ers2.transforms import ModelConfig

# photographs bundled with scikit-image; no download needed
PHOTOS = ("astronaut", "coffee", "chelsea", "rocket", "hubble_deep_field",
          "immunohistochemistry", "retina", "colorwheel", "camera", "coins")


def photo(name: str, size=(256, 256)) -> np.ndarray:
    import skimage.data

    a = getattr(skimage.data, name)()
    if a.ndim == 2:
        a = np.stack([a] * 3, axis=-1)
    h, w = size
    return np.ascontiguousarray(a[:h, :w, :3])


def to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(a.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def tiny_config(**kw) -> ModelConfig:
    base = dict(N=8, M=8, cpb_hidden=16, growth=4, mlp_ratio=2.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ERS2Model(tiny_config()).eval()


@pytest.fixture
def photo_dir(tmp_path):
    """Folder of four 96x128 photo crops as PNG."""
    d = tmp_path / "photos"
    d.mkdir()
    for name in PHOTOS[:4]:
        Image.fromarray(photo(name, (96, 128))).save(d / f"{name}.png")
    return d


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: int(k[1:])):
        terminalreporter.write_line(results[key])
