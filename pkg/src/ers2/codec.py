"""Compress/decompress pipelines and the ``.ers2`` container.

Container layout (little-endian)::

    magic     4s   b"ERS2"
    version   u8
    digest    8s   model fingerprint (config + parameters)
    lam_idx   u8   index into the published lambda list, 255 if custom
    N         u16
    width     u32  true image width
    height    u32  true image height
    z_len     u32
    z bytes, then y bytes up to the end of the file
"""

from __future__ import annotations

import contextlib
import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image
from scipy.special import ndtr
from torch import Tensor

from .entropy_models import ScaleTable
from .model import ERS2Model, pad_image
from .range_coder import QuantizedCDFTable, RangeDecoder, rc_decode, rc_encode
from .transforms import PAD_MULTIPLE

logger = logging.getLogger(__name__)

MAGIC = b"ERS2"
VERSION = 1
_HEADER = struct.Struct("<4sB8sBHIII")


class BitstreamError(ValueError):
    pass


class DigestMismatchError(ValueError):
    pass


@dataclass
class Bitstream:
    digest: bytes
    lam_index: int
    N: int
    width: int
    height: int
    z_bytes: bytes
    y_bytes: bytes
    version: int = VERSION

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.version, self.digest, self.lam_index, self.N,
                            self.width, self.height, len(self.z_bytes))
        return head + self.z_bytes + self.y_bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise BitstreamError(f"file too short for header ({len(data)} bytes)")
        magic, version, digest, lam_index, N, width, height, z_len = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != VERSION:
            raise BitstreamError(f"unsupported container version {version}")
        if width < 1 or height < 1:
            raise BitstreamError(f"invalid image size {width}x{height}")
        body = data[_HEADER.size:]
        if z_len > len(body):
            raise BitstreamError(f"declared z-stream length {z_len} exceeds remaining {len(body)} bytes")
        return cls(digest, lam_index, N, width, height, bytes(body[:z_len]), bytes(body[z_len:]), version)

    def __len__(self) -> int:
        return _HEADER.size + len(self.z_bytes) + len(self.y_bytes)


@dataclass
class EncodedImage:
    bitstream: Bitstream
    y_hat: Tensor
    z_hat: Tensor
    clamped: int


@lru_cache(maxsize=4)
def gaussian_table(levels: int = 64) -> QuantizedCDFTable:
    """Integer CDFs of zero-mean discretized Gaussians, one per table scale."""
    st = ScaleTable(levels=levels)
    pmfs, offsets = [], []
    for s, K in zip(st.scales, st.half_widths):
        k = np.arange(-K, K + 1, dtype=np.float64)
        upper = ndtr((k + 0.5) / s)
        lower = ndtr((k - 0.5) / s)
        pmf = upper - lower
        pmf[0] = upper[0]
        pmf[-1] = ndtr(-(K - 0.5) / s)
        pmfs.append(pmf)
        offsets.append(-int(K))
    return QuantizedCDFTable.from_pmfs(pmfs, offsets)


def factorized_table(model: ERS2Model) -> QuantizedCDFTable:
    entries = model.z_prior.integer_pmfs()
    return QuantizedCDFTable.from_pmfs([p for _, p in entries], [o for o, _ in entries])


@contextlib.contextmanager
def _deterministic():
    # encoder and decoder must see bit-identical floats, whatever the host's thread count
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        with torch.no_grad():
            yield
    finally:
        torch.set_num_threads(prev)


def _z_contexts(shape) -> list:
    C, h, w = shape
    return np.repeat(np.arange(C), h * w).tolist()


def encode_image(model: ERS2Model, x: Tensor) -> EncodedImage:
    """Run the encoder and keep the quantized latents next to the bitstream."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1 or x.shape[1] != 3:
        raise ValueError(f"expected a single RGB image, got shape {tuple(x.shape)}")
    H, W = x.shape[-2:]
    model.eval()
    with _deterministic():
        y = model.analyse(pad_image(x))
        z = model.h_a(y)

        ztab = factorized_table(model)
        zq = torch.round(z[0]).to(torch.int64)
        lo = torch.tensor(ztab.offsets).reshape(-1, 1, 1)
        hi = lo + torch.tensor(ztab.lengths).reshape(-1, 1, 1) - 1
        zc = torch.maximum(torch.minimum(zq, hi), lo)
        n_clamped = int((zc != zq).sum())
        z_bytes = rc_encode(zc.flatten().tolist(), ztab, _z_contexts(zc.shape))
        z_hat = zc.to(z.dtype).unsqueeze(0)

        phi = model.h_s(z_hat)
        y_hat, _, symbols, indexes, y_clamped = model.quantize_y_sequential(y, phi)
        n_clamped += y_clamped
        y_bytes = rc_encode(symbols[0].permute(1, 2, 0).flatten().tolist(), gaussian_table(),
                            indexes[0].permute(1, 2, 0).flatten().tolist())
    if n_clamped:
        logger.warning("%d latent symbols clamped to the coder alphabet", n_clamped)
    bs = Bitstream(model.fingerprint(), model.cfg.lam_index, model.cfg.N, W, H, z_bytes, y_bytes)
    return EncodedImage(bs, y_hat, z_hat, n_clamped)


def compress(x: Tensor, model: ERS2Model) -> Bitstream:
    return encode_image(model, x).bitstream


def decode_latents(bs: Union[Bitstream, bytes], model: ERS2Model):
    """Recover ``(y_hat, z_hat)`` from a bitstream."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    if bs.digest != model.fingerprint():
        raise DigestMismatchError(
            f"bitstream was produced by a different model (digest {bs.digest.hex()}, "
            f"model {model.fingerprint().hex()}, stream N={bs.N}, model N={model.cfg.N})")
    Hp = -(-bs.height // PAD_MULTIPLE) * PAD_MULTIPLE
    Wp = -(-bs.width // PAD_MULTIPLE) * PAD_MULTIPLE
    M = model.cfg.M
    model.eval()
    with _deterministic():
        ztab = factorized_table(model)
        zshape = (M, Hp // 64, Wp // 64)
        ctx = _z_contexts(zshape)
        zs = rc_decode(bs.z_bytes, ztab, ctx, len(ctx))
        dtype = next(model.parameters()).dtype
        z_hat = torch.tensor(zs, dtype=dtype).reshape(1, *zshape)
        phi = model.h_s(z_hat)

        ytab = gaussian_table()
        cdfs, offsets = ytab.cdfs, ytab.offsets
        dec = RangeDecoder(bs.y_bytes)
        index = model.scale_table.index

        def step(i, j, mu, sigma):
            q = [dec.decode_symbol(cdfs[k], offsets[k]) for k in index(sigma)[0].tolist()]
            return torch.tensor(q, dtype=mu.dtype).unsqueeze(0) + mu

        y_hat, _ = model.cam.sequential(phi, step)
        dec.finish()
    return y_hat, z_hat


def decompress(bs: Union[Bitstream, bytes], model: ERS2Model) -> Tensor:
    """Decode to a ``(1, 3, H, W)`` image in [0, 1], cropped to the true size."""
    if isinstance(bs, (bytes, bytearray)):
        bs = Bitstream.from_bytes(bytes(bs))
    y_hat, _ = decode_latents(bs, model)
    with _deterministic():
        x_hat = model.g_s(y_hat)
    return x_hat[..., :bs.height, :bs.width]


def load_image(path: Union[str, Path]) -> Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()


def save_image(x: Tensor, path: Union[str, Path]) -> None:
    arr = x.detach().squeeze(0).clamp(0, 1).mul(255).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path, format="PNG")
