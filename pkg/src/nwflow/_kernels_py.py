"""Pure-Python/numpy versions of the hot kernels.

These must stay bit-identical to ``_ext.pyx``: the codec relies on encoder
and decoder computing the same network outputs and the same rANS stream
regardless of which backend is loaded.
"""
import numpy as np

RANS_L = 1 << 32


def conv1d_valid(xp, w, b):
    """Valid cross-correlation of a pre-padded ``[N, C, Lp]`` float32 batch.

    Each output element accumulates in float32 over input channel then tap,
    starting from zero, and adds the bias last.
    """
    n, c, lp = xp.shape
    o, c2, k = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input {c}, weight {c2}")
    lo = lp - k + 1
    acc = np.zeros((n, o, lo), dtype=np.float32)
    for ci in range(c):
        for t in range(k):
            acc += w[None, :, ci, t, None] * xp[:, None, ci, t:t + lo]
    acc += b[None, :, None]
    return acc


def conv2d_valid(xp, w, b):
    """2D twin of :func:`conv1d_valid` on ``[N, C, Hp, Wp]``."""
    n, c, hp, wp = xp.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"channel mismatch: input {c}, weight {c2}")
    ho, wo = hp - kh + 1, wp - kw + 1
    acc = np.zeros((n, o, ho, wo), dtype=np.float32)
    for ci in range(c):
        for ty in range(kh):
            for tx in range(kw):
                acc += (w[None, :, ci, ty, tx, None, None]
                        * xp[:, None, ci, ty:ty + ho, tx:tx + wo])
    acc += b[None, :, None, None]
    return acc


def rans_encode(starts, freqs, precision):
    """Encode symbols given as (start, freq) pairs, listed in decode order.

    Returns the stream: the final 64-bit state (little-endian) followed by
    the renormalisation bytes in the order the decoder consumes them.
    """
    x = RANS_L
    out = bytearray()
    shift = 32 - precision + 8
    for i in range(len(starts) - 1, -1, -1):
        start = int(starts[i])
        freq = int(freqs[i])
        x_max = freq << shift
        while x >= x_max:
            out.append(x & 0xFF)
            x >>= 8
        x = ((x // freq) << precision) + (x % freq) + start
    out.reverse()
    return x.to_bytes(8, "little") + bytes(out)


class RansDecoder:
    """Forward-reading decoder over a stream made by :func:`rans_encode`."""

    def __init__(self, data):
        data = bytes(data)
        if len(data) < 8:
            raise ValueError("rANS stream shorter than its 8-byte state")
        self.data = data
        self.x = int.from_bytes(data[:8], "little")
        self.pos = 8

    def decode(self, cum, offsets, sizes, table_idx, precision):
        """Decode ``len(table_idx)`` symbols; returns symbol indices (int64).

        ``cum[offsets[t]: offsets[t] + sizes[t] + 1]`` is the cumulative
        frequency array of table ``t``.
        """
        data = self.data
        n_data = len(data)
        x = self.x
        pos = self.pos
        mask = (1 << precision) - 1
        cum = [int(v) for v in cum]
        offsets = [int(v) for v in offsets]
        sizes = [int(v) for v in sizes]
        out = np.empty(len(table_idx), dtype=np.int64)
        for i, t in enumerate(table_idx.tolist()):
            off = offsets[t]
            slot = x & mask
            lo_i, hi_i = 0, sizes[t]
            while hi_i - lo_i > 1:
                mid = (lo_i + hi_i) >> 1
                if cum[off + mid] <= slot:
                    lo_i = mid
                else:
                    hi_i = mid
            s = lo_i
            start = cum[off + s]
            freq = cum[off + s + 1] - start
            x = freq * (x >> precision) + slot - start
            while x < RANS_L:
                if pos >= n_data:
                    raise EOFError("rANS stream exhausted during refill")
                x = (x << 8) | data[pos]
                pos += 1
            out[i] = s
        self.x = x
        self.pos = pos
        return out
