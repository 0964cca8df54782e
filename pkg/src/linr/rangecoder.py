"""Deterministic binary/multi-symbol arithmetic coder.

32-bit low/high registers, 16-bit probabilities, bit-wise renormalization
with pending-bit (underflow) tracking.  The termination cost is two bits
plus byte padding, so even tiny per-stage streams stay within a few bytes
of their information content.

Streams are not self-delimiting: the container records each payload's byte
length, and the bit count to decode is known from the geometry.  The
decoder reads zero bits past the end of its buffer, which the terminator
relies on.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DecodeError, NumericError

PROB_BITS = 16
PROB_ONE = 1 << PROB_BITS
PROB_MAX = PROB_ONE - 1

_MASK = (1 << 32) - 1
_HALF = 1 << 31
_QUARTER = 1 << 30
_THREE_QUARTERS = _HALF + _QUARTER


def quantize_probability(p: float) -> int:
    """Fixed-point probability of bit=1: clamp(round(p * 2^16), 1, 65535)."""
    if not math.isfinite(p):
        raise NumericError(f"probability is not finite: {p}")
    return min(max(int(math.floor(p * PROB_ONE + 0.5)), 1), PROB_MAX)


def quantize_probabilities(p: np.ndarray) -> np.ndarray:
    """Vectorized :func:`quantize_probability`."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise NumericError("probabilities contain non-finite values")
    q = np.floor(p * PROB_ONE + 0.5).astype(np.int64)
    return np.clip(q, 1, PROB_MAX)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.high = _MASK
        self.pending = 0
        self._acc = 0
        self._nacc = 0
        self._out = bytearray()
        self._done = False

    def _emit(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nacc += 1
        if self._nacc == 8:
            self._out.append(self._acc)
            self._acc = 0
            self._nacc = 0

    def _emit_with_pending(self, bit: int) -> None:
        self._emit(bit)
        inv = bit ^ 1
        while self.pending:
            self._emit(inv)
            self.pending -= 1

    def _renormalize(self) -> None:
        low, high = self.low, self.high
        while True:
            if high < _HALF:
                self._emit_with_pending(0)
            elif low >= _HALF:
                self._emit_with_pending(1)
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _THREE_QUARTERS:
                self.pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
        self.low, self.high = low, high

    def encode_bit(self, p1: int, bit: int) -> None:
        """Code one bit under fixed-point probability p1 of bit=1."""
        span = self.high - self.low + 1
        split = self.low + ((span * (PROB_ONE - p1)) >> PROB_BITS) - 1
        if bit:
            self.low = split + 1
        else:
            self.high = split
        self._renormalize()

    def encode_symbol(self, cum: np.ndarray, symbol: int) -> None:
        """Code a symbol under a cumulative table with cum[-1] == 2^16."""
        span = self.high - self.low + 1
        low = self.low
        self.high = low + ((span * int(cum[symbol + 1])) >> PROB_BITS) - 1
        self.low = low + ((span * int(cum[symbol])) >> PROB_BITS)
        self._renormalize()

    def finish(self) -> bytes:
        """Terminate the stream; at most 2 bits plus byte padding."""
        if self._done:
            raise RuntimeError("finish() called twice")
        self._done = True
        self.pending += 1
        self._emit_with_pending(0 if self.low < _QUARTER else 1)
        if self._nacc:
            self._out.append(self._acc << (8 - self._nacc))
            self._acc = 0
            self._nacc = 0
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._bitpos = 0
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(32):
            self.code = (self.code << 1) | self._next_bit()

    @property
    def bits_consumed(self) -> int:
        """Source bits read so far, including zero padding past the end.

        A healthy stream never exceeds its own length by more than the
        32-bit register lookahead; more than that means truncation.
        """
        return self._bitpos

    def _next_bit(self) -> int:
        pos = self._bitpos
        self._bitpos = pos + 1
        byte = pos >> 3
        if byte >= len(self._data):
            return 0
        return (self._data[byte] >> (7 - (pos & 7))) & 1

    def _renormalize(self) -> None:
        low, high, code = self.low, self.high, self.code
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                code -= _HALF
            elif low >= _QUARTER and high < _THREE_QUARTERS:
                low -= _QUARTER
                high -= _QUARTER
                code -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
            code = (code << 1) | self._next_bit()
        self.low, self.high, self.code = low, high, code

    def decode_bit(self, p1: int) -> int:
        span = self.high - self.low + 1
        split = self.low + ((span * (PROB_ONE - p1)) >> PROB_BITS) - 1
        if self.code > split:
            bit = 1
            self.low = split + 1
        else:
            bit = 0
            self.high = split
        self._renormalize()
        return bit

    def decode_symbol(self, cum: np.ndarray) -> int:
        span = self.high - self.low + 1
        target = (((self.code - self.low + 1) << PROB_BITS) - 1) // span
        symbol = int(np.searchsorted(cum, target, side="right")) - 1
        if not 0 <= symbol < len(cum) - 1:
            raise DecodeError("decoded value outside the symbol table")
        low = self.low
        self.high = low + ((span * int(cum[symbol + 1])) >> PROB_BITS) - 1
        self.low = low + ((span * int(cum[symbol])) >> PROB_BITS)
        self._renormalize()
        return symbol


class LaplaceTable:
    """Frequency table for symbols 0..2^bits-1 under a Laplace density.

    The density is integrated over unit bins, renormalized to a total of
    2^16 with a per-symbol floor of 1, so every symbol stays codable even
    in the degenerate b -> 0 case.
    """

    def __init__(self, mu: float, b: float, bits: int):
        if not 1 <= bits <= 16:
            raise ValueError("symbol width must be between 1 and 16 bits")
        self.mu = float(mu)
        self.b = float(b)
        self.bits = bits
        n = 1 << bits
        mass = self._bin_masses(self.mu, self.b, n)
        freq = np.ones(n, dtype=np.int64)
        budget = PROB_ONE - n
        if budget > 0:
            freq += np.floor(mass / mass.sum() * budget).astype(np.int64)
            freq[int(np.argmax(mass))] += PROB_ONE - int(freq.sum())
        self.freq = freq
        self.cum = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(freq, out=self.cum[1:])

    @staticmethod
    def _bin_masses(mu: float, b: float, n: int) -> np.ndarray:
        if not (b > 0) or not math.isfinite(b) or not math.isfinite(mu):
            center = min(max(int(math.floor(mu + 0.5)), 0), n - 1)
            mass = np.zeros(n)
            mass[center] = 1.0
            return mass
        edges = np.arange(n + 1) - 0.5
        half_tail = 0.5 * np.exp(-np.abs(edges - mu) / b)
        cdf = np.where(edges < mu, half_tail, 1.0 - half_tail)
        mass = np.diff(cdf)
        if mass.sum() <= 0:
            return LaplaceTable._bin_masses(mu, 0.0, n)
        return mass

    def ideal_bits(self, symbols: np.ndarray) -> float:
        """Cross-entropy of the data under this table, in bits."""
        return float(-np.log2(self.freq[np.asarray(symbols)] / PROB_ONE).sum())
