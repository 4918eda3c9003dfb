"""Streaming rANS over quantised frequency tables.

State is a 64-bit integer kept in [2^32, 2^40) with byte-wise
renormalisation. Encoding runs over the symbols in reverse so the decoder
reads the stream forward; the stream is the final state (8 bytes,
little-endian) followed by the renormalisation bytes in decode order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend

PRECISION = 14
RANS_L = 1 << 32


class DecodeError(ValueError):
    """Corrupted or truncated rANS stream."""


@dataclass(frozen=True)
class FrequencyTable:
    freqs: np.ndarray
    cum: np.ndarray
    precision_bits: int = PRECISION
    lo: int = 0

    @property
    def m(self):
        return 1 << self.precision_bits

    @property
    def n_symbols(self):
        return len(self.freqs)

    def start_freq(self, symbol):
        i = symbol - self.lo
        if not 0 <= i < len(self.freqs):
            raise ValueError(f"symbol {symbol} outside table alphabet")
        return int(self.cum[i]), int(self.freqs[i])

    def lookup(self, slot):
        """Index ``i`` with ``cum[i] <= slot < cum[i + 1]``."""
        return int(np.searchsorted(self.cum, slot, side="right")) - 1


def build_table(pmf, precision_bits=PRECISION, lo=0):
    """Largest-remainder quantisation of ``pmf`` to integers summing to 2^bits.

    Every symbol keeps at least frequency 1. A shortfall is handed out by
    largest fractional remainder; an excess is taken back from the largest
    frequencies. Ties go to the lower index.
    """
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("pmf must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("pmf must be finite and non-negative")
    m = 1 << precision_bits
    n = p.size
    if n > m:
        raise ValueError(f"alphabet of {n} symbols does not fit total {m}")
    total = p.sum()
    raw = p / total * m if total > 0 else np.full(n, m / n)
    freqs = np.maximum(np.floor(raw).astype(np.int64), 1)
    diff = m - int(freqs.sum())
    if diff > 0:
        # the shortfall is below n because each floor loses less than one
        rem = raw - np.floor(raw)
        order = np.lexsort((np.arange(n), -rem))
        freqs[order[:diff]] += 1
    while diff < 0:
        order = np.lexsort((np.arange(n), -freqs))
        for i in order:
            if diff == 0 or freqs[i] <= 1:
                break
            step = min(int(freqs[i]) - 1, -diff, max(1, int(freqs[i]) // 16))
            freqs[i] -= step
            diff += step
    cum = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freqs, out=cum[1:])
    return FrequencyTable(freqs, cum, precision_bits, lo)


# single-step arithmetic --------------------------------------------------------

def encode_step(x, start, freq, precision_bits=PRECISION):
    """C(s, x) = m * floor(x / l_s) + b_s + (x mod l_s)."""
    return ((x // freq) << precision_bits) + start + (x % freq)


def decode_step(x, table):
    """D(x) = (s, l_s * floor(x / m) + (x mod m) - b_s); returns (index, x')."""
    m = table.m
    slot = x & (m - 1)
    i = table.lookup(slot)
    start, freq = int(table.cum[i]), int(table.freqs[i])
    return i, freq * (x >> table.precision_bits) + slot - start


@dataclass
class RansState:
    """Reference per-symbol coder; ``buf`` is a byte stack."""

    x: int = RANS_L
    buf: bytearray = field(default_factory=bytearray)

    def to_bytes(self):
        return self.x.to_bytes(8, "little") + bytes(reversed(self.buf))

    @classmethod
    def from_bytes(cls, data):
        if len(data) < 8:
            raise DecodeError("stream shorter than its 8-byte state")
        return cls(int.from_bytes(data[:8], "little"), bytearray(reversed(data[8:])))


def encode_symbol(state, symbol, table):
    start, freq = table.start_freq(symbol)
    x_max = freq << (32 - table.precision_bits + 8)
    x = state.x
    while x >= x_max:
        state.buf.append(x & 0xFF)
        x >>= 8
    state.x = encode_step(x, start, freq, table.precision_bits)
    return state


def decode_symbol(state, table):
    i, x = decode_step(state.x, table)
    while x < RANS_L:
        if not state.buf:
            raise DecodeError("stream exhausted during refill")
        x = (x << 8) | state.buf.pop()
    state.x = x
    return i + table.lo, state


# streams ------------------------------------------------------------------------

def encode_stream(starts, freqs, precision_bits=PRECISION):
    """Encode (start, freq) pairs listed in decode order."""
    starts = np.ascontiguousarray(starts, dtype=np.uint32)
    freqs = np.ascontiguousarray(freqs, dtype=np.uint32)
    if starts.shape != freqs.shape:
        raise ValueError("starts and freqs differ in length")
    if freqs.size and freqs.min() < 1:
        raise ValueError("zero frequency")
    return _backend.rans_encode(starts, freqs, precision_bits)


def encode_symbols(symbols, tables, precision_bits=PRECISION):
    """Encode ``symbols[i]`` with ``tables[i]`` (a table or one shared table)."""
    if isinstance(tables, FrequencyTable):
        tables = [tables] * len(symbols)
    pairs = [t.start_freq(int(s)) for s, t in zip(symbols, tables)]
    starts = [p[0] for p in pairs]
    freqs = [p[1] for p in pairs]
    return encode_stream(starts, freqs, precision_bits)


class TableBank:
    """Packs tables for the decode kernel: flat cum array plus offsets."""

    def __init__(self, tables=()):
        self.tables = []
        for t in tables:
            self.add(t)

    def add(self, table):
        self.tables.append(table)
        return len(self.tables) - 1

    def packed(self):
        sizes = np.array([t.n_symbols for t in self.tables], dtype=np.int64)
        offsets = np.zeros(len(self.tables), dtype=np.int64)
        if len(self.tables) > 1:
            offsets[1:] = np.cumsum(sizes[:-1] + 1)
        cum = np.concatenate([t.cum for t in self.tables]).astype(np.uint32) if self.tables \
            else np.zeros(0, np.uint32)
        return cum, offsets, sizes


class StreamDecoder:
    """Forward decoder; ``position`` is the count of bytes consumed so far."""

    def __init__(self, data, precision_bits=PRECISION):
        try:
            self._dec = _backend.rans_decoder(data)
        except ValueError as exc:
            raise DecodeError(str(exc)) from None
        self.precision_bits = precision_bits

    @property
    def position(self):
        return self._dec.pos

    @property
    def state(self):
        return int(self._dec.x)

    def decode_indices(self, bank, table_idx):
        """Symbol indices (not offset by ``lo``) for each entry of ``table_idx``."""
        cum, offsets, sizes = bank.packed() if isinstance(bank, TableBank) else bank
        try:
            return self._dec.decode(cum, offsets, sizes,
                                    np.ascontiguousarray(table_idx, dtype=np.int64),
                                    self.precision_bits)
        except EOFError as exc:
            raise DecodeError(str(exc)) from None

    def decode_symbols(self, tables):
        bank = TableBank()
        ids = {}
        idx = []
        for t in tables:
            if id(t) not in ids:
                ids[id(t)] = bank.add(t)
            idx.append(ids[id(t)])
        out = self.decode_indices(bank, np.array(idx, dtype=np.int64))
        return [int(i) + t.lo for i, t in zip(out, tables)]

    def finished(self, total_length):
        return self.state == RANS_L and self.position == total_length


def code_length_bound(freqs, precision_bits=PRECISION):
    """Ideal length in bytes: sum of -log2(l_s / m) over the coded symbols / 8."""
    freqs = np.asarray(freqs, dtype=np.float64)
    return float(np.sum(precision_bits - np.log2(freqs)) / 8.0)
