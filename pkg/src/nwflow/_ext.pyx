# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``_kernels_py`` bit for bit."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t

cnp.import_array()

cdef uint64_t RANS_L = (<uint64_t>1) << 32


def conv1d_valid(float[:, :, ::1] xp, float[:, :, ::1] w, float[::1] b):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1], lp = xp.shape[2]
    cdef Py_ssize_t o = w.shape[0], k = w.shape[2]
    if w.shape[1] != c:
        raise ValueError(f"channel mismatch: input {c}, weight {w.shape[1]}")
    cdef Py_ssize_t lo = lp - k + 1
    out = np.zeros((n, o, lo), dtype=np.float32)
    cdef float[:, :, ::1] ov = out
    cdef Py_ssize_t bi, oi, p, ci, t
    cdef float wt
    cdef float *acc
    cdef const float *src
    # each output still sums over (input channel, tap) from zero, bias last;
    # the position loop is innermost so it vectorises
    for bi in range(n):
        for oi in range(o):
            acc = &ov[bi, oi, 0]
            for ci in range(c):
                for t in range(k):
                    wt = w[oi, ci, t]
                    src = &xp[bi, ci, t]
                    for p in range(lo):
                        acc[p] = acc[p] + wt * src[p]
            wt = b[oi]
            for p in range(lo):
                acc[p] = acc[p] + wt
    return out


def conv2d_valid(float[:, :, :, ::1] xp, float[:, :, :, ::1] w, float[::1] b):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != c:
        raise ValueError(f"channel mismatch: input {c}, weight {w.shape[1]}")
    cdef Py_ssize_t ho = hp - kh + 1, wo = wp - kw + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float32)
    cdef float[:, :, :, ::1] ov = out
    cdef Py_ssize_t bi, oi, y, x, ci, ty, tx
    cdef float wt
    cdef float *acc
    cdef const float *src
    for bi in range(n):
        for oi in range(o):
            for ci in range(c):
                for ty in range(kh):
                    for tx in range(kw):
                        wt = w[oi, ci, ty, tx]
                        for y in range(ho):
                            acc = &ov[bi, oi, y, 0]
                            src = &xp[bi, ci, y + ty, tx]
                            for x in range(wo):
                                acc[x] = acc[x] + wt * src[x]
            wt = b[oi]
            for y in range(ho):
                acc = &ov[bi, oi, y, 0]
                for x in range(wo):
                    acc[x] = acc[x] + wt
    return out


def rans_encode(starts, freqs, int precision):
    cdef uint32_t[::1] st = np.ascontiguousarray(starts, dtype=np.uint32)
    cdef uint32_t[::1] fr = np.ascontiguousarray(freqs, dtype=np.uint32)
    cdef Py_ssize_t n = st.shape[0]
    # a symbol emits at most 2 bytes: state < 2^40 shrinks to below 2^26 at worst
    buf = np.empty(4 * n + 8, dtype=np.uint8)
    cdef uint8_t[::1] bv = buf
    cdef Py_ssize_t nb = 0
    cdef uint64_t x = RANS_L
    cdef uint64_t x_max, freq
    cdef int shift = 32 - precision + 8
    cdef Py_ssize_t i
    for i in range(n - 1, -1, -1):
        freq = fr[i]
        x_max = freq << shift
        while x >= x_max:
            bv[nb] = <uint8_t>(x & 0xFF)
            nb += 1
            x >>= 8
        x = ((x // freq) << precision) + (x % freq) + st[i]
    tail = bytes(buf[:nb][::-1])
    return int(x).to_bytes(8, "little") + tail


cdef class RansDecoder:
    cdef public bytes data
    cdef public object x
    cdef public Py_ssize_t pos

    def __init__(self, data):
        data = bytes(data)
        if len(data) < 8:
            raise ValueError("rANS stream shorter than its 8-byte state")
        self.data = data
        self.x = int.from_bytes(data[:8], "little")
        self.pos = 8

    def decode(self, cum, offsets, sizes, table_idx, int precision):
        cdef uint32_t[::1] cv = np.ascontiguousarray(cum, dtype=np.uint32)
        cdef int64_t[::1] ov = np.ascontiguousarray(offsets, dtype=np.int64)
        cdef int64_t[::1] sv = np.ascontiguousarray(sizes, dtype=np.int64)
        cdef int64_t[::1] tv = np.ascontiguousarray(table_idx, dtype=np.int64)
        cdef const uint8_t[:] dv = self.data
        cdef Py_ssize_t n_data = len(self.data)
        cdef Py_ssize_t n = tv.shape[0]
        out = np.empty(n, dtype=np.int64)
        cdef int64_t[::1] res = out
        cdef uint64_t x = self.x
        cdef Py_ssize_t pos = self.pos
        cdef uint64_t mask = ((<uint64_t>1) << precision) - 1
        cdef uint64_t slot, start, freq
        cdef int64_t off, lo_i, hi_i, mid, t
        cdef Py_ssize_t i
        for i in range(n):
            t = tv[i]
            off = ov[t]
            slot = x & mask
            lo_i = 0
            hi_i = sv[t]
            while hi_i - lo_i > 1:
                mid = (lo_i + hi_i) >> 1
                if cv[off + mid] <= slot:
                    lo_i = mid
                else:
                    hi_i = mid
            start = cv[off + lo_i]
            freq = cv[off + lo_i + 1] - start
            x = freq * (x >> precision) + slot - start
            while x < RANS_L:
                if pos >= n_data:
                    self.x = x
                    self.pos = pos
                    raise EOFError("rANS stream exhausted during refill")
                x = (x << 8) | dv[pos]
                pos += 1
            res[i] = lo_i
        self.x = x
        self.pos = pos
        return out
