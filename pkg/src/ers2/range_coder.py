"""32-bit range coder over 16-bit quantized CDF tables.

The encoder follows the carry-propagating (cache + pending 0xFF run) design,
so no symbol ever has to be re-scaled to avoid underflow. The flush rounds
``low`` up to a multiple of 256 and writes its top three bytes; the always-zero
leading and trailing bytes are dropped, so a stream is
``3 + number_of_renormalizations`` bytes long. On decode, a valid stream
leaves exactly one zero padding byte read and a residual code below 256;
anything else is reported as truncation or corruption.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
PHANTOM_BYTES = 1
_FLUSH_QUANTUM = 1 << 8


class CodingError(ValueError):
    pass


class DecodeError(ValueError):
    pass


def pmf_to_quantized_cdf(pmf: Sequence[float], precision: int = PRECISION) -> List[int]:
    """Integer CDF ``[0, ..., 2**precision]`` where every bin gets at least 1."""
    pmf = np.asarray(pmf, dtype=np.float64)
    n = len(pmf)
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"cannot quantize a pmf with {n} entries at {precision} bits")
    pmf = np.clip(pmf, 0.0, None)
    s = pmf.sum()
    pmf = pmf / s if s > 0 else np.full(n, 1.0 / n)
    freq = np.floor(pmf * (total - n)).astype(np.int64) + 1
    freq[int(np.argmax(pmf))] += total - int(freq.sum())
    cdf = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf.tolist()


@dataclass
class QuantizedCDFTable:
    """One integer CDF per context; symbol ``s`` in context ``c`` is ``s - offsets[c]``."""

    cdfs: List[List[int]]
    offsets: List[int]

    @property
    def lengths(self) -> List[int]:
        return [len(c) - 1 for c in self.cdfs]

    def validate(self) -> None:
        for i, c in enumerate(self.cdfs):
            if c[0] != 0 or c[-1] != TOTAL:
                raise ValueError(f"context {i}: CDF must run from 0 to {TOTAL}")
            if any(b <= a for a, b in zip(c, c[1:])):
                raise ValueError(f"context {i}: CDF must be strictly increasing")

    @classmethod
    def from_pmfs(cls, pmfs: Sequence[Sequence[float]], offsets: Sequence[int]) -> "QuantizedCDFTable":
        return cls([pmf_to_quantized_cdf(p) for p in pmfs], [int(o) for o in offsets])


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, symbol: int, cdf: Sequence[int], offset: int) -> None:
        i = symbol - offset
        if i < 0 or i >= len(cdf) - 1:
            raise CodingError(f"symbol {symbol} outside [{offset}, {offset + len(cdf) - 1})")
        self.encode(cdf[i], cdf[i + 1] - cdf[i])

    def finish(self) -> bytes:
        self.low = (self.low + _FLUSH_QUANTUM - 1) & ~(_FLUSH_QUANTUM - 1)
        for _ in range(5):
            self._shift_low()
        data = bytes(self.out)
        if len(data) < 2 or data[0] != 0 or data[-1] != 0:
            raise AssertionError("range coder invariant broken: edge bytes must be zero")
        return data[1:-1]


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.phantom = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
            self.pos += 1
            return b
        self.phantom += 1
        if self.phantom > PHANTOM_BYTES:
            raise DecodeError("range-coded stream is truncated")
        return 0

    def decode_symbol(self, cdf: Sequence[int], offset: int) -> int:
        r = self.range >> PRECISION
        count = self.code // r
        if count >= cdf[-1]:
            raise DecodeError("corrupt range-coded stream")
        i = bisect_right(cdf, count) - 1
        start = cdf[i]
        self.code -= r * start
        self.range = r * (cdf[i + 1] - start)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8
        return i + offset

    def finish(self) -> None:
        """Check that the whole stream, and nothing more, was consumed."""
        if self.pos != len(self.data) or self.phantom != PHANTOM_BYTES:
            raise DecodeError(
                f"stream length mismatch: consumed {self.pos}/{len(self.data)} bytes, "
                f"{self.phantom} padding bytes")
        if self.code >= _FLUSH_QUANTUM:
            raise DecodeError("corrupt range-coded stream (bad termination)")


def rc_encode(symbols: Sequence[int], table: QuantizedCDFTable, contexts: Sequence[int]) -> bytes:
    if len(symbols) != len(contexts):
        raise ValueError("symbols and contexts differ in length")
    enc = RangeEncoder()
    cdfs, offsets = table.cdfs, table.offsets
    for pos, (s, c) in enumerate(zip(symbols, contexts)):
        try:
            enc.encode_symbol(int(s), cdfs[c], offsets[c])
        except CodingError as e:
            raise CodingError(f"position {pos}: {e}") from None
    return enc.finish()


def rc_decode(data: bytes, table: QuantizedCDFTable, contexts: Sequence[int], count: int) -> List[int]:
    if len(contexts) != count:
        raise ValueError("need one context per symbol")
    dec = RangeDecoder(data)
    cdfs, offsets = table.cdfs, table.offsets
    out = [dec.decode_symbol(cdfs[c], offsets[c]) for c in contexts]
    dec.finish()
    return out
