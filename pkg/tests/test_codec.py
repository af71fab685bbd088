import struct

import numpy as np
import pytest
import torch

from ers2.codec import (
    Bitstream,
    BitstreamError,
    DigestMismatchError,
    compress,
    decode_latents,
    decompress,
    encode_image,
    gaussian_table,
    load_image,
    save_image,
)
from ers2.model import ERS2Model
from ers2.range_coder import DecodeError

from conftest import photo, tiny_config, to_tensor


def test_header_layout(tiny_model):
    bs = compress(torch.rand(1, 3, 20, 30), tiny_model)
    data = bs.to_bytes()
    magic, ver, digest, lam_idx, N, W, H, zlen = struct.unpack_from("<4sB8sBHIII", data)
    assert (magic, ver, N, W, H) == (b"ERS2", 1, 8, 30, 20)
    assert lam_idx == 3  # default lambda 0.015
    assert digest == tiny_model.fingerprint()
    assert len(data) == 28 + zlen + len(bs.y_bytes) == len(bs)
    assert Bitstream.from_bytes(data) == bs


@pytest.mark.parametrize("hw", [(1, 1), (70, 100), (64, 64)])
def test_latent_roundtrip(tiny_model, hw):
    torch.manual_seed(hw[0])
    enc = encode_image(tiny_model, torch.rand(1, 3, *hw))
    y_hat, z_hat = decode_latents(enc.bitstream.to_bytes(), tiny_model)
    assert torch.equal(y_hat, enc.y_hat)
    assert torch.equal(z_hat, enc.z_hat)
    x_hat = decompress(enc.bitstream, tiny_model)
    assert x_hat.shape == (1, 3, *hw)


def test_matches_eval_forward(tiny_model):
    x = to_tensor(photo("astronaut", (80, 72)))
    torch.set_num_threads(1)
    with torch.no_grad():
        out = tiny_model(x)
    enc = encode_image(tiny_model, x)
    assert torch.equal(enc.y_hat, out["y_hat"])
    assert torch.equal(decompress(enc.bitstream, tiny_model), out["x_hat"])


def test_deterministic_across_thread_counts(tiny_model):
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    prev = torch.get_num_threads()
    try:
        torch.set_num_threads(1)
        a = compress(x, tiny_model).to_bytes()
        torch.set_num_threads(4)
        b = compress(x, tiny_model).to_bytes()
    finally:
        torch.set_num_threads(prev)
    assert a == b


def test_wrong_model_is_refused(tiny_model):
    data = compress(torch.rand(1, 3, 16, 16), tiny_model).to_bytes()
    torch.manual_seed(99)
    other = ERS2Model(tiny_config()).eval()
    with pytest.raises(DigestMismatchError, match="different model"):
        decompress(data, other)


def test_malformed_headers(tiny_model):
    data = compress(torch.rand(1, 3, 16, 16), tiny_model).to_bytes()
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(data[:10])
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(b"XXXX" + data[4:])
    bad_version = bytearray(data)
    bad_version[4] = 9
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(bytes(bad_version))
    bad_len = bytearray(data)
    struct.pack_into("<I", bad_len, 24, 10_000)
    with pytest.raises(BitstreamError):
        Bitstream.from_bytes(bytes(bad_len))


def test_truncated_payload_fails(tiny_model):
    data = compress(torch.rand(1, 3, 64, 64), tiny_model).to_bytes()
    with pytest.raises(DecodeError):
        decompress(data[:-1], tiny_model)


def test_gaussian_table_valid():
    table = gaussian_table()
    table.validate()
    assert len(table.cdfs) == 64
    assert table.offsets[0] == -4 and table.offsets[-1] == -255


def test_png_io_roundtrip(tmp_path):
    a = photo("coffee", (31, 17))
    p = tmp_path / "a.png"
    save_image(to_tensor(a), p)
    back = load_image(p)
    assert np.array_equal((back[0].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8), a)
