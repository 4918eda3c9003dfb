"""Lossless image codec: integer flow, priors, rANS.

Container::

    "NWF1" u16 version u16 width u16 height u8 channels u8 colorspace
    u8 scheme u8 iterations 8-byte model hash u32 payload length | payload

The payload is one rANS stream. Planes are coded coarse to fine: the final
low-pass block, then B, C, D of the deepest level down to the finest, each
in channel-major raster order. A plane's escaped values (those outside the
window of their table) follow it as two raw bytes each. Every table depends
only on what the decoder already holds, so a byte prefix decodes to a
low-pass version of the image.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import rans
from .lifting import INT16_MAX, INT16_MIN, LiftingOverflow, n_iterations
from .modelfile import model_hash
from .numerics import ContractError
from .prior import (LOG_S_GRID, MU_GRID, LogisticDist, MixtureDist, UniformDist, dl_log_pmf,
                    mixture_log_pmf, pyramid_log_prob)

MAGIC = b"NWF1"
VERSION = 1
HEADER = struct.Struct("<4sHHHBBBB8sI")
COLORSPACES = {"rgb": 0, "ycbcr": 1, "gray": 2}
_TAIL = 12.0      # table half-width in units of the logistic scale
_ESC_BASE = 1 << 15


class CodecError(ValueError):
    """Base class of container errors."""


class FormatError(CodecError):
    """Bad magic, version or header fields."""


class ModelMismatch(CodecError):
    """Stream was written with a different model."""


class TruncatedStream(CodecError):
    """Payload shorter than the header promises."""


@dataclass(frozen=True)
class Header:
    width: int
    height: int
    channels: int
    colorspace: str
    scheme: int
    iterations: int
    model_hash: bytes
    payload_length: int

    def pack(self):
        return HEADER.pack(MAGIC, VERSION, self.width, self.height, self.channels,
                           COLORSPACES[self.colorspace], self.scheme, self.iterations,
                           self.model_hash, self.payload_length)


def read_header(data):
    if len(data) < HEADER.size:
        raise TruncatedStream("stream shorter than its header")
    magic, version, w, h, c, cs, scheme, iters, mh, plen = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a compressed image (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    names = {v: k for k, v in COLORSPACES.items()}
    if cs not in names:
        raise FormatError(f"unknown colour space code {cs}")
    try:
        expect = n_iterations(h, w)
    except ContractError as exc:
        raise FormatError(str(exc)) from None
    if iters != expect or c == 0:
        raise FormatError("inconsistent header geometry")
    return Header(w, h, c, names[cs], scheme, iters, mh, plen)


def as_image(image):
    """Validate and return ``[C, H, W]`` uint8 (a 2D array becomes one channel)."""
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ContractError(f"image must be [C, H, W], got shape {x.shape}")
    if x.dtype != np.uint8:
        if not np.issubdtype(x.dtype, np.integer) or x.min() < 0 or x.max() > 255:
            raise ContractError("image samples must be integers in 0..255")
        x = x.astype(np.uint8)
    return x


# frequency tables --------------------------------------------------------------

def _with_escape(pmf, lo):
    esc = max(1.0 - float(pmf.sum()), 0.0)
    return rans.build_table(np.append(pmf, esc), rans.PRECISION, lo)


@lru_cache(maxsize=8192)
def _logistic_table(frac_q, log_s_q):
    """Table over z - floor(mu) for mu = floor(mu) + frac_q / 64."""
    mu = frac_q / MU_GRID
    log_s = log_s_q / LOG_S_GRID
    half = min(int(math.ceil(_TAIL * math.exp(log_s))) + 2, 4000)
    z = np.arange(-half, half + 1)
    pmf = np.exp(dl_log_pmf(z, mu, log_s, INT16_MIN, INT16_MAX))
    return _with_escape(pmf, -half)


@lru_cache(maxsize=1024)
def _mixture_table(params):
    k = len(params) // 3
    mu, log_s, logits = (np.array(params[i * k:(i + 1) * k]) for i in range(3))
    s = np.exp(log_s)
    lo = int(max(np.floor(np.min(mu - _TAIL * s)) - 2, INT16_MIN))
    hi = int(min(np.ceil(np.max(mu + _TAIL * s)) + 2, INT16_MAX))
    if hi - lo > 8000:
        centre = int(np.floor(mu[np.argmax(logits)]))
        lo, hi = max(centre - 4000, INT16_MIN), min(centre + 4000, INT16_MAX)
    z = np.arange(lo, hi + 1)
    pmf = np.exp(mixture_log_pmf(z, mu, log_s, logits, INT16_MIN, INT16_MAX))
    return _with_escape(pmf, lo)


@lru_cache(maxsize=64)
def _uniform_table(lo, hi):
    return _with_escape(np.full(hi - lo + 1, 1.0 / (hi - lo + 1)), lo)


_RAW_TABLE = rans.build_table(np.ones(256))
_RAW_BANK = rans.TableBank([_RAW_TABLE]).packed()


def _plan(dist, shape):
    """(tables, per-element table index, per-element offset) for a plane."""
    n = int(np.prod(shape))
    if isinstance(dist, LogisticDist):
        mu = np.broadcast_to(dist.mu, shape).ravel()
        ls = np.broadcast_to(dist.log_s, shape).ravel()
        centre = np.floor(mu)
        fq = np.rint((mu - centre) * MU_GRID).astype(np.int64)
        centre = centre.astype(np.int64) + fq // MU_GRID
        fq %= MU_GRID
        lq = np.rint(ls * LOG_S_GRID).astype(np.int64)
        keys = fq * 8192 + (lq + 4096)
        uniq, inv = np.unique(keys, return_inverse=True)
        tables = [_logistic_table(int(k // 8192), int(k % 8192) - 4096) for k in uniq]
        return tables, inv.ravel(), centre
    if isinstance(dist, MixtureDist):
        k = dist.mu.shape[-1]
        rows = np.concatenate([np.broadcast_to(v, tuple(shape) + (k,)).reshape(n, k)
                               for v in (dist.mu, dist.log_s, dist.logits)], axis=1)
        uniq, inv = np.unique(rows, axis=0, return_inverse=True)
        tables = [_mixture_table(tuple(float(v) for v in row)) for row in uniq]
        return tables, inv.ravel(), np.zeros(n, np.int64)
    if isinstance(dist, UniformDist):
        return [_uniform_table(dist.lo, dist.hi)], np.zeros(n, np.int64), np.zeros(n, np.int64)
    raise ContractError(f"no coding tables for {type(dist).__name__}")


def _geometry(tables, inv):
    los = np.array([t.lo for t in tables], np.int64)[inv]
    sizes = np.array([t.n_symbols for t in tables], np.int64)[inv]
    return los, sizes


class _PlaneEncoder:
    def __init__(self):
        self.starts, self.freqs = [], []
        self.n_escapes = 0

    def add(self, z, dist):
        z = np.asarray(z, dtype=np.int64)
        tables, inv, centre = _plan(dist, z.shape)
        cum, offsets, _ = rans.TableBank(tables).packed()
        los, sizes = _geometry(tables, inv)
        flat = z.ravel()
        idx = flat - centre - los
        esc = (idx < 0) | (idx >= sizes - 1)
        idx[esc] = sizes[esc] - 1
        pos = offsets[inv] + idx
        start = cum[pos].astype(np.int64)
        self.starts.append(start)
        self.freqs.append(cum[pos + 1].astype(np.int64) - start)
        if esc.any():
            v = flat[esc] + _ESC_BASE
            raw = np.stack([v >> 8, v & 0xFF], axis=1).ravel()
            self.starts.append(raw * _RAW_TABLE.freqs[0])
            self.freqs.append(np.full(raw.size, _RAW_TABLE.freqs[0], np.int64))
            self.n_escapes += int(esc.sum())

    def finish(self):
        if not self.starts:
            return rans.encode_stream(np.zeros(0), np.zeros(0))
        return rans.encode_stream(np.concatenate(self.starts), np.concatenate(self.freqs))


def _decode_plane(dec, dist, shape):
    tables, inv, centre = _plan(dist, shape)
    los, sizes = _geometry(tables, inv)
    idx = dec.decode_indices(rans.TableBank(tables).packed(), inv)
    z = idx + los + centre
    esc = idx == sizes - 1
    if esc.any():
        raw = dec.decode_indices(_RAW_BANK, np.zeros(2 * int(esc.sum()), np.int64))
        z[esc] = raw[0::2] * 256 + raw[1::2] - _ESC_BASE
    return z.reshape(shape)


# codec ------------------------------------------------------------------------

def _forward_with_lows(flow, x):
    highs, lows = [], []
    for _ in range(n_iterations(*x.shape[2:])):
        x, hp = flow.step_forward(x)
        highs.append(hp)
        lows.append(x)
    return highs, lows


def compress(image, flow, priors, colorspace=None):
    """Compressed bytes of a ``[C, H, W]`` uint8 image (already in ``colorspace``)."""
    img = as_image(image)
    c, h, w = img.shape
    if c != flow.channels:
        raise ContractError(f"model has {flow.channels} channels, image has {c}")
    colorspace = colorspace or ("gray" if c == 1 else "rgb")
    if colorspace not in COLORSPACES:
        raise ContractError(f"unknown colour space {colorspace!r}")
    iters = n_iterations(h, w)
    fl = flow.with_mode(True)
    highs, lows = _forward_with_lows(fl, img[None].astype(np.int64))
    enc = _PlaneEncoder()
    enc.add(lows[-1], priors.final_dist(lows[-1]))
    for level in range(iters - 1, -1, -1):
        for dist, plane in zip(priors.high_dists(lows[level]), highs[level]):
            enc.add(plane, dist)
    payload = enc.finish()
    header = Header(w, h, c, colorspace, flow.scheme, iters, model_hash(flow, priors), len(payload))
    return header.pack() + payload


def _open(data, flow, priors, allow_prefix=False):
    data = bytes(data)
    header = read_header(data)
    if header.model_hash != model_hash(flow, priors):
        raise ModelMismatch("stream was written with a different model")
    if header.scheme != flow.scheme or header.channels != flow.channels:
        raise ModelMismatch("stream geometry does not match the model")
    payload = data[HEADER.size:]
    if len(payload) > header.payload_length:
        raise FormatError("trailing bytes after the payload")
    if len(payload) < header.payload_length and not allow_prefix:
        raise TruncatedStream(f"payload has {len(payload)} of {header.payload_length} bytes")
    try:
        dec = rans.StreamDecoder(payload)
    except rans.DecodeError as exc:
        raise TruncatedStream(str(exc)) from None
    return header, payload, dec


def _decode_levels(dec, header, flow, priors, depth):
    """Low-pass plane after decoding down to ``depth`` (0 = full image)."""
    fl = flow.with_mode(True)
    h, w = header.height >> header.iterations, header.width >> header.iterations
    shape = (1, header.channels, h, w)
    try:
        low = _decode_plane(dec, priors.final_dist(np.zeros(shape, np.int64)), shape)
        for level in range(header.iterations - 1, depth - 1, -1):
            planes = tuple(_decode_plane(dec, dist, low.shape) for dist in priors.high_dists(low))
            low = fl.step_inverse(low, planes)
    except rans.DecodeError as exc:
        raise TruncatedStream(str(exc)) from None
    except LiftingOverflow as exc:
        raise FormatError(f"corrupted stream: {exc}") from None
    return low[0]


def decompress(data, flow, priors):
    """Inverse of :func:`compress`; returns the ``[C, H, W]`` uint8 image."""
    header, payload, dec = _open(data, flow, priors)
    img = _decode_levels(dec, header, flow, priors, 0)
    if not dec.finished(len(payload)):
        raise FormatError("corrupted stream: decoder did not end in its initial state")
    if img.min() < 0 or img.max() > 255:
        raise FormatError("corrupted stream: samples outside 0..255")
    return img.astype(np.uint8)


@dataclass
class ProgressiveResult:
    lowpass: np.ndarray      # integer low-pass plane [C, h, w]
    bytes_used: int          # header plus consumed payload prefix

    @property
    def image(self):
        """The low-pass plane clamped to a displayable uint8 image."""
        return np.clip(self.lowpass, 0, 255).astype(np.uint8)


def progressive_decode(data, flow, priors, levels):
    """Decode the final block plus the ``levels`` deepest high-pass levels.

    ``levels`` = 0 gives the final block alone, ``levels`` = iterations the
    full image. ``data`` may be any prefix of the stream that covers the
    requested levels.
    """
    header, _, dec = _open(data, flow, priors, allow_prefix=True)
    if not 0 <= levels <= header.iterations:
        raise ContractError(f"levels must lie in 0..{header.iterations}")
    low = _decode_levels(dec, header, flow, priors, header.iterations - levels)
    return ProgressiveResult(low, HEADER.size + dec.position)


def header_of(data):
    return read_header(bytes(data[:HEADER.size]))


# rates ------------------------------------------------------------------------

def bpd_theoretical(image, flow, priors):
    """-log2 p(image) per dimension under the quantised priors."""
    img = as_image(image)
    pyr = flow.with_mode(True).forward(img.astype(np.int64))
    return -pyramid_log_prob(pyr, priors, flow.with_mode(True)) / math.log(2) / img.size


def bpd_actual(image, flow, priors):
    img = as_image(image)
    return 8.0 * len(compress(img, flow, priors)) / img.size


def upsample(image, flow, priors, factor, seed=0, temperature=1.0):
    """Enlarge by ``factor`` (a power of two) treating the image as a low-pass
    plane and sampling the missing high-pass planes from the priors.

    ``temperature`` scales the logistic scale; 0 takes the mode.
    """
    img = as_image(image)
    steps = int(round(math.log2(factor))) if factor >= 1 else -1
    if steps < 0 or 1 << steps != factor:
        raise ContractError("factor must be a power of two")
    rng = np.random.default_rng(seed)
    fl = flow.with_mode(True)
    low = img[None].astype(np.int64)
    for _ in range(steps):
        planes = []
        for dist in priors.high_dists(low):
            if isinstance(dist, LogisticDist) and temperature <= 0:
                planes.append(dist.mode())
            elif isinstance(dist, LogisticDist):
                planes.append(LogisticDist(dist.mu, dist.log_s + math.log(temperature)).sample(rng))
            else:
                planes.append(dist.sample(rng))
        planes = [np.clip(p, INT16_MIN, INT16_MAX) for p in planes]
        low = fl.step_inverse(low, tuple(planes))
    return np.clip(low[0], 0, 255).astype(np.uint8)
