import pytest
import torch

from ers2.model import ERS2Model, pad_image
from ers2.nn_blocks import RS2TB
from ers2.transforms import (
    MSE_LAMBDAS,
    MSSSIM_LAMBDAS,
    AnalysisTransform,
    HyperAnalysis,
    HyperSynthesis,
    ModelConfig,
    SynthesisTransform,
    parity_config,
)

from conftest import tiny_config


def test_published_lambda_sets():
    assert MSE_LAMBDAS == (0.0016, 0.0032, 0.0075, 0.015, 0.023, 0.03, 0.045)
    assert MSSSIM_LAMBDAS == (6.0, 12.0, 40.0, 80.0, 120.0)


@pytest.mark.parametrize("metric,lam,N", [
    ("mse", 0.0016, 128), ("mse", 0.015, 128), ("mse", 0.023, 192), ("mse", 0.045, 192),
    ("ms-ssim", 6, 128), ("ms-ssim", 12, 128), ("ms-ssim", 40, 192), ("ms-ssim", 120, 192),
])
def test_parity_width_split(metric, lam, N):
    cfg = parity_config(metric, lam)
    assert cfg.N == N and cfg.M == 192 and cfg.c_ctx == 2 * N


def test_parity_rejects_unknown_lambda():
    with pytest.raises(ValueError):
        parity_config("mse", 0.02)
    with pytest.raises(ValueError):
        ModelConfig(metric="l1")


def test_lam_index_and_digest():
    assert ModelConfig(lam=0.015).lam_index == 3
    assert ModelConfig(lam=0.02).lam_index == 255
    assert ModelConfig(metric="ms-ssim", lam=40).lam_index == 2
    assert ModelConfig().digest() != ModelConfig(N=192).digest()
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


def test_transform_layouts():
    cfg = tiny_config()
    kinds = [type(m).__name__ for m in AnalysisTransform(cfg).layers]
    assert kinds == ["Conv2d", "RS2TB", "Conv2d", "RS2TB", "Conv2d", "RS2TB", "Conv2d"]
    kinds = [type(m).__name__ for m in SynthesisTransform(cfg).layers]
    assert kinds == ["ConvTranspose2d", "RS2TB"] * 3 + ["ConvTranspose2d"]
    ha = HyperAnalysis(cfg).layers
    assert [type(m).__name__ for m in ha] == ["RS2TB", "Conv2d", "RS2TB", "Conv2d"]
    assert all(b.cfg.window_size == 4 for b in ha if isinstance(b, RS2TB))
    assert all(b.cfg.window_size == 8 for b in AnalysisTransform(cfg).layers if isinstance(b, RS2TB))


def test_shapes_tiny():
    cfg = tiny_config()
    x = torch.rand(1, 3, 128, 64)
    y = AnalysisTransform(cfg)(x)
    assert y.shape == (1, 8, 8, 4)
    z = HyperAnalysis(cfg)(y)
    assert z.shape == (1, 8, 2, 1)
    assert HyperSynthesis(cfg)(z).shape == (1, 16, 8, 4)
    assert SynthesisTransform(cfg)(y).shape == x.shape


def test_analysis_requires_padding():
    with pytest.raises(ValueError):
        AnalysisTransform(tiny_config())(torch.rand(1, 3, 70, 64))


def test_pad_image_replicates():
    x = torch.rand(1, 3, 5, 70)
    p = pad_image(x)
    assert p.shape == (1, 3, 64, 128)
    torch.testing.assert_close(p[..., :5, :70], x)
    torch.testing.assert_close(p[..., 63, 127], x[..., 4, 69])


def test_synthesis_clamps_only_in_eval():
    torch.manual_seed(0)
    g = SynthesisTransform(tiny_config())
    y = 50 * torch.randn(1, 8, 4, 4)
    assert g.train()(y).abs().max() > 1
    out = g.eval()(y)
    assert out.min() >= 0 and out.max() <= 1


def test_zero_hyper_input_is_input_weight_independent():
    # phi(0) depends on biases and later layers only, not on the first deconv's weights
    torch.manual_seed(0)
    h = HyperSynthesis(tiny_config()).eval()
    z = torch.zeros(1, 8, 2, 2)
    with torch.no_grad():
        a = h(z)
        h.layers[0].weight.normal_()
        b = h(z)
    torch.testing.assert_close(a, b)


def test_enhancement_off_has_fewer_params():
    on = ERS2Model(tiny_config())
    off = ERS2Model(tiny_config(enhancement=False))
    assert sum(off.param_counts().values()) < sum(on.param_counts().values())
    assert "enhance" not in off.param_counts()


def test_width_increases_params():
    small = ERS2Model(ModelConfig(N=128))
    big = ERS2Model(ModelConfig(N=192))
    assert sum(big.param_counts().values()) > sum(small.param_counts().values())
