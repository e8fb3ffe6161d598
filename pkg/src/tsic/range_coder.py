"""Arithmetic range coder over per-symbol probability tables.

Classic 32-bit low/high renormalizing coder. Probability tables are
quantized to 16-bit fixed-point frequencies (total 65536) so encoder and
decoder arithmetic is integer-exact and platform independent; every symbol
keeps nonzero coded mass. Each symbol may use its own table, which is how
the conditional-Gaussian latent model drives the coder.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = [
    "RangeCoderError",
    "PMF_PRECISION_BITS",
    "PMF_TOTAL",
    "quantize_pmf",
    "range_encode",
    "range_decode",
    "stream_crc32",
]

PMF_PRECISION_BITS = 16
PMF_TOTAL = 1 << PMF_PRECISION_BITS

_STATE_BITS = 32
_MASK = (1 << _STATE_BITS) - 1
_TOP = 1 << (_STATE_BITS - 1)
_SECOND = _TOP >> 1
_MAX_TOTAL = (1 << (_STATE_BITS - 2)) + 2

_PMF_SUM_TOL = 1e-9


class RangeCoderError(ValueError):
    """Raised on invalid tables, unsupported symbols, or corrupt payloads."""


def quantize_pmf(pmf) -> np.ndarray:
    """Fixed-point frequencies summing exactly to PMF_TOTAL, every bin >= 1."""
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise RangeCoderError("pmf must be a non-empty 1-D array")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise RangeCoderError("pmf must be finite and nonnegative")
    if abs(p.sum() - 1.0) > _PMF_SUM_TOL:
        raise RangeCoderError(f"pmf must sum to 1 within {_PMF_SUM_TOL}, got {p.sum()!r}")
    if p.size > PMF_TOTAL:
        raise RangeCoderError("pmf has more bins than fixed-point mass units")
    freqs = np.maximum(1, np.rint(p * PMF_TOTAL).astype(np.int64))
    # repair the rounding surplus/deficit on the largest bins, keeping >= 1
    diff = int(PMF_TOTAL - freqs.sum())
    if diff != 0:
        order = np.argsort(-freqs, kind="stable")
        i = 0
        step = 1 if diff > 0 else -1
        while diff != 0:
            j = order[i % p.size]
            if step < 0 and freqs[j] <= 1:
                i += 1
                continue
            freqs[j] += step
            diff -= step
            i += 1
    return freqs


def _cumulative(freqs: np.ndarray):
    cum = np.zeros(freqs.size + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    return cum.tolist()


class _Encoder:
    def __init__(self):
        self.low = 0
        self.high = _MASK
        self.underflow = 0
        self.bits = bytearray()  # one bit per entry; packed at the end

    def encode(self, cum, symbol):
        total = cum[-1]
        if total > _MAX_TOTAL:
            raise RangeCoderError("pmf total exceeds coder capacity")
        span = self.high - self.low + 1
        sym_low, sym_high = cum[symbol], cum[symbol + 1]
        if sym_low == sym_high:
            raise RangeCoderError("symbol has zero coded mass")
        self.high = self.low + sym_high * span // total - 1
        self.low = self.low + sym_low * span // total
        while True:
            if (self.low ^ self.high) & _TOP == 0:
                bit = self.low >> (_STATE_BITS - 1)
                self.bits.append(bit)
                if self.underflow:
                    self.bits.extend([bit ^ 1] * self.underflow)
                    self.underflow = 0
                self.low = (self.low << 1) & _MASK
                self.high = ((self.high << 1) & _MASK) | 1
            elif self.low & ~self.high & _SECOND:
                self.underflow += 1
                self.low = (self.low << 1) & (_MASK >> 1)
                self.high = ((self.high << 1) & (_MASK >> 1)) | _TOP | 1
            else:
                break

    def finish(self) -> bytes:
        # flush the full low register: the codeword is then self-contained
        # (no implicit-zero tail), so coded length never undercuts the
        # stream's information content
        for _ in range(_STATE_BITS):
            bit = self.low >> (_STATE_BITS - 1)
            self.bits.append(bit)
            if self.underflow:
                self.bits.extend([bit ^ 1] * self.underflow)
                self.underflow = 0
            self.low = (self.low << 1) & _MASK
        packed = bytearray()
        acc = 0
        n = 0
        for bit in self.bits:
            acc = (acc << 1) | bit
            n += 1
            if n == 8:
                packed.append(acc)
                acc = n = 0
        if n:
            packed.append(acc << (8 - n))
        return bytes(packed)


class _Decoder:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.bitpos = 0
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(_STATE_BITS):
            self.code = (self.code << 1) | self._read_bit()

    def _read_bit(self) -> int:
        byte_idx = self.bitpos >> 3
        if byte_idx >= len(self.payload):
            self.bitpos += 1
            return 0  # implicit trailing zeros past the terminator
        bit = (self.payload[byte_idx] >> (7 - (self.bitpos & 7))) & 1
        self.bitpos += 1
        return bit

    def decode(self, cum, nsymbols) -> int:
        total = cum[-1]
        if total > _MAX_TOTAL:
            raise RangeCoderError("pmf total exceeds coder capacity")
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        lo, hi = 0, nsymbols
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if cum[mid] > value:
                hi = mid
            else:
                lo = mid
        symbol = lo
        sym_low, sym_high = cum[symbol], cum[symbol + 1]
        self.high = self.low + sym_high * span // total - 1
        self.low = self.low + sym_low * span // total
        while True:
            if (self.low ^ self.high) & _TOP == 0:
                self.code = ((self.code << 1) & _MASK) | self._read_bit()
                self.low = (self.low << 1) & _MASK
                self.high = ((self.high << 1) & _MASK) | 1
            elif self.low & ~self.high & _SECOND:
                self.code = (self.code & _TOP) | ((self.code << 1) & (_MASK >> 1)) | self._read_bit()
                self.low = (self.low << 1) & (_MASK >> 1)
                self.high = ((self.high << 1) & (_MASK >> 1)) | _TOP | 1
            else:
                break
        return symbol


def _normalize_tables(symbols, pmfs, count):
    """Resolve (symbols, pmfs) into per-symbol cumulative tables.

    pmfs may be one shared 1-D table or a sequence with one table per symbol.
    Tables are float pmfs; quantization to fixed point happens here so the
    encoder and decoder share the exact integer tables.
    """
    if isinstance(pmfs, np.ndarray) and pmfs.ndim == 1:
        cum = _cumulative(quantize_pmf(pmfs))
        return [cum] * count, [pmfs.size] * count
    tables = list(pmfs)
    if len(tables) != count:
        raise RangeCoderError(f"need {count} pmfs, got {len(tables)}")
    cums, sizes = [], []
    for t in tables:
        t = np.asarray(t, dtype=np.float64)
        cums.append(_cumulative(quantize_pmf(t)))
        sizes.append(t.size)
    return cums, sizes


def stream_crc32(payload: bytes, symbols) -> int:
    """Integrity checksum chaining the coded bytes with the decoded symbols:
    catches both payload corruption (including dead padding bits) and
    probability-model mismatch (same bytes, different symbols)."""
    arr = np.ascontiguousarray(np.asarray(symbols, dtype=np.int64))
    return zlib.crc32(arr.tobytes(), zlib.crc32(payload)) & 0xFFFFFFFF


def range_encode(symbols, pmfs) -> bytes:
    """Encode integer symbol indices under their probability tables.

    Each symbol must index inside its table's support; violations raise
    before any output is produced.
    """
    sym = np.asarray(symbols, dtype=np.int64)
    if sym.ndim != 1:
        raise RangeCoderError("symbols must be a 1-D integer array")
    cums, sizes = _normalize_tables(sym, pmfs, sym.size)
    for i, s in enumerate(sym):
        if s < 0 or s >= sizes[i]:
            raise RangeCoderError(f"symbol {int(s)} at position {i} outside pmf support [0, {sizes[i]})")
    enc = _Encoder()
    for i, s in enumerate(sym.tolist()):
        enc.encode(cums[i], s)
    return enc.finish()


def range_decode(payload: bytes, pmfs, count: int, *, expected_crc=None) -> np.ndarray:
    """Decode `count` symbols; verifies the stream checksum when provided."""
    if count < 0:
        raise RangeCoderError("count must be nonnegative")
    cums, sizes = _normalize_tables(None, pmfs, count)
    dec = _Decoder(payload)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        out[i] = dec.decode(cums[i], sizes[i])
    if expected_crc is not None and stream_crc32(payload, out) != expected_crc:
        raise RangeCoderError(
            "stream checksum mismatch (corrupt payload or wrong probability model)"
        )
    return out
