import pytest
import torch

from ers2.enhancement import FeatureEnhancement


def test_identity_at_init():
    enh = FeatureEnhancement()
    x = torch.rand(2, 3, 17, 9)
    torch.testing.assert_close(enh(x), x)


def test_dense_block_channels_and_shape():
    enh = FeatureEnhancement(growth=32)
    d = enh.dense(torch.rand(1, 3, 8, 8))
    assert d.shape == (1, 3 + 3 * 32, 8, 8)
    assert [c.kernel_size for c in enh.layers] == [(1, 1), (3, 3), (1, 1)]
    assert enh.proj.in_channels == 99 and enh.proj.out_channels == 3


def test_dense_concatenation_order():
    # the last 32 channels of layer 2's input are layer 1's output
    enh = FeatureEnhancement(growth=4)
    x = torch.rand(1, 3, 6, 6)
    d = enh.dense(x)
    torch.testing.assert_close(d[:, :3], x)
    torch.testing.assert_close(d[:, 3:7], enh.act(enh.layers[0](x)))
    torch.testing.assert_close(d[:, 7:11], enh.act(enh.layers[1](d[:, :7])))


def test_residual_path_after_training_step():
    torch.manual_seed(0)
    enh = FeatureEnhancement(growth=8)
    x = torch.rand(1, 3, 8, 8)
    loss = (enh(x) - 0.5).pow(2).mean()
    loss.backward()
    assert enh.proj.weight.grad.abs().sum() > 0
    with torch.no_grad():
        enh.proj.weight.add_(0.01)
    assert not torch.allclose(enh(x), x)


def test_negative_slope():
    assert FeatureEnhancement().act.negative_slope == 0.2


def test_rejects_wrong_channels():
    with pytest.raises(ValueError):
        FeatureEnhancement()(torch.rand(1, 4, 8, 8))
