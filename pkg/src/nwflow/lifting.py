"""Invertible learnable lifting transform with factor-out.

Two partition schemes are supported:

* scheme 2 (default): each level splits a plane into the four phases of its
  2x2 cells, A (upper-left), B (upper-right), C (lower-left), D (lower-right),
  and updates them in turn with additive couplings ``q += t([others])``;
  B, C, D are factored out and A recurses.
* scheme 1: a 1D lifting transform (predict ``e -= P(o)``, update
  ``o += U(e)``) runs over rows, then over columns of both halves; the
  quadrant that is low-pass in both directions recurses.

In integer mode every network output is rounded with ``floor(x + 1/2)``
before it is added, so the transform maps integers to integers and is
exactly invertible whatever the network weights are. The same coupling
block is used at every level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ContractError, ConvLayerSpec, ConvNet, Tensor

INT16_MIN, INT16_MAX = -(1 << 15), (1 << 15) - 1


class LiftingOverflow(OverflowError):
    """An integer coefficient left the signed 16-bit range."""


def round_nearest(x):
    """floor(x + 1/2): halves round toward +inf (0.5 -> 1, -0.5 -> 0)."""
    if np.isscalar(x):
        return int(np.floor(float(x) + 0.5))
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


# partitions ----------------------------------------------------------------

def partition2d(x):
    """Split the trailing two axes into the A, B, C, D phases of 2x2 cells."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ContractError(f"partition2d needs even extents, got {h}x{w}")
    return x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2]


def merge2d(a, b, c, d):
    """Inverse of :func:`partition2d`."""
    if not (a.shape == b.shape == c.shape == d.shape):
        raise ContractError("merge2d: quadrant shapes differ")
    h, w = a.shape[-2:]
    out = np.empty(a.shape[:-2] + (2 * h, 2 * w), dtype=np.result_type(a, b, c, d))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


def partition1d(x):
    """Even-index (o) and odd-index (e) samples of the last axis."""
    if x.shape[-1] % 2:
        raise ContractError("partition1d needs an even length")
    return x[..., 0::2], x[..., 1::2]


def interleave1d(a, b):
    if a.shape != b.shape:
        raise ContractError("interleave1d: halves differ in shape")
    out = np.empty(a.shape[:-1] + (2 * a.shape[-1],), dtype=np.result_type(a, b))
    out[..., 0::2] = a
    out[..., 1::2] = b
    return out


def _check_range(v):
    if v.size and (v.min() < INT16_MIN or v.max() > INT16_MAX):
        raise LiftingOverflow(
            f"coefficient out of int16 range: [{int(v.min())}, {int(v.max())}]")
    return v


# coupling blocks ---------------------------------------------------------------

class _Coupling:
    """Shared plumbing: input normalisation and output scaling of a net."""

    normalize: bool

    def _net_input(self, planes):
        x = np.concatenate(planes, axis=1).astype(np.float32)
        if self.normalize:
            x = (x - np.float32(128)) / np.float32(255)
        return x

    def _delta(self, net, planes, integer):
        out = net.fixed(self._net_input(planes)).astype(np.float64)
        if self.normalize:
            out = out * 255.0
        if integer:
            return np.floor(out + 0.5).astype(np.int64)
        return out

    def _delta_tensor(self, net, planes, rounding):
        x = nx.concat(planes, axis=1) if len(planes) > 1 else planes[0]
        if self.normalize:
            x = (x - 128.0) * (1.0 / 255.0)
        out = net(x)
        if self.normalize:
            out = out * 255.0
        if rounding == "ste":
            # forward values come from the codec's fixed-order kernels so
            # training sees exactly the latents that get coded; the gradient
            # is that of the unrounded network output
            exact = self._delta(net, [p.data for p in planes], True)
            out = out + Tensor((exact - out.data).astype(out.dtype))
        elif rounding != "none":
            raise ContractError(f"unknown rounding {rounding!r}")
        return out


class CouplingBlock2D(_Coupling):
    """``repeat`` sweeps of A, B, C, D additive updates (3c -> c networks)."""

    def __init__(self, nets, normalize=True):
        if not nets or any(len(sweep) != 4 for sweep in nets):
            raise ContractError("each sweep needs four networks (A, B, C, D)")
        c = nets[0][0].out_channels
        for sweep in nets:
            for net in sweep:
                if net.in_channels != 3 * c or net.out_channels != c:
                    raise ContractError("coupling networks must map 3c -> c channels")
        self.nets = [list(s) for s in nets]
        self.normalize = normalize
        self.channels = c

    @property
    def repeat(self):
        return len(self.nets)

    def params(self):
        return [p for sweep in self.nets for net in sweep for p in net.params()]

    def forward(self, planes, integer=True):
        planes = [np.asarray(p, dtype=np.int64 if integer else np.float64) for p in planes]
        _check_planes(planes, self.channels)
        for sweep in self.nets:
            for q in range(4):
                if sweep[q].is_zero():
                    continue
                others = planes[:q] + planes[q + 1:]
                planes[q] = planes[q] + self._delta(sweep[q], others, integer)
                if integer:
                    _check_range(planes[q])
        return planes

    def inverse(self, planes, integer=True):
        planes = [np.asarray(p, dtype=np.int64 if integer else np.float64) for p in planes]
        _check_planes(planes, self.channels)
        for sweep in reversed(self.nets):
            for q in (3, 2, 1, 0):
                if sweep[q].is_zero():
                    continue
                others = planes[:q] + planes[q + 1:]
                planes[q] = planes[q] - self._delta(sweep[q], others, integer)
                if integer:
                    _check_range(planes[q])
        return planes

    def forward_tensor(self, planes, rounding="ste"):
        planes = list(planes)
        for sweep in self.nets:
            for q in range(4):
                others = planes[:q] + planes[q + 1:]
                planes[q] = planes[q] + self._delta_tensor(sweep[q], others, rounding)
        return planes


class CouplingBlock1D(_Coupling):
    """Alternating predict/update pairs: ``e -= P(o)`` then ``o += U(e)``."""

    def __init__(self, pairs, normalize=False):
        if not pairs or any(len(p) != 2 for p in pairs):
            raise ContractError("each step needs a (predict, update) pair")
        c = pairs[0][0].out_channels
        for pair in pairs:
            for net in pair:
                if net.in_channels != c or net.out_channels != c:
                    raise ContractError("1D coupling networks must map c -> c channels")
        self.pairs = [list(p) for p in pairs]
        self.normalize = normalize
        self.channels = c

    @property
    def repeat(self):
        return len(self.pairs)

    @property
    def nets(self):
        return self.pairs

    def params(self):
        return [p for pair in self.pairs for net in pair for p in net.params()]

    def forward(self, o, e, integer=True):
        dt = np.int64 if integer else np.float64
        o, e = np.asarray(o, dtype=dt), np.asarray(e, dtype=dt)
        for predict, update in self.pairs:
            if not predict.is_zero():
                e = e - self._delta(predict, [o], integer)
                if integer:
                    _check_range(e)
            if not update.is_zero():
                o = o + self._delta(update, [e], integer)
                if integer:
                    _check_range(o)
        return o, e

    def inverse(self, s, d, integer=True):
        dt = np.int64 if integer else np.float64
        s, d = np.asarray(s, dtype=dt), np.asarray(d, dtype=dt)
        for predict, update in reversed(self.pairs):
            if not update.is_zero():
                s = s - self._delta(update, [d], integer)
                if integer:
                    _check_range(s)
            if not predict.is_zero():
                d = d + self._delta(predict, [s], integer)
                if integer:
                    _check_range(d)
        return s, d

    def forward_tensor(self, o, e, rounding="ste"):
        for predict, update in self.pairs:
            e = e - self._delta_tensor(predict, [o], rounding)
            o = o + self._delta_tensor(update, [e], rounding)
        return o, e


def _check_planes(planes, channels):
    if len(planes) != 4:
        raise ContractError("expected four planes A, B, C, D")
    shape = planes[0].shape
    if any(p.shape != shape for p in planes):
        raise ContractError("quadrant planes differ in shape")
    if len(shape) != 4 or shape[1] != channels:
        raise ContractError(f"planes must be [N, {channels}, h, w], got {shape}")


def coupling_forward_2d(planes, block, integer=True):
    return block.forward(planes, integer)


def coupling_inverse_2d(planes, block, integer=True):
    return block.inverse(planes, integer)


# pyramid and flow ---------------------------------------------------------------

@dataclass
class LatentPyramid:
    """Factor-out result. ``highs[i]`` holds (B, C, D) of level i, finest first."""

    highs: list
    final: np.ndarray
    shape: tuple  # (C, H, W) of the source image
    batched: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def levels(self):
        return len(self.highs)

    def size(self):
        return int(self.final.size + sum(p.size for t in self.highs for p in t))

    def lowpass(self, depth, flow):
        """Low-pass plane after ``depth`` forward iterations (0 = the image)."""
        if not 0 <= depth <= self.levels:
            raise ContractError(f"depth must lie in 0..{self.levels}")
        a = self.final if self.batched else self.final[None]
        for i in range(self.levels - 1, depth - 1, -1):
            hp = self.highs[i] if self.batched else tuple(p[None] for p in self.highs[i])
            a = flow.step_inverse(a, hp)
        return a if self.batched else a[0]


def n_iterations(h, w):
    """Halvings until the smaller extent reaches 2."""
    for n in (h, w):
        if n < 4 or n & (n - 1):
            raise ContractError(f"extents must be powers of two >= 4, got {h}x{w}")
    return int(np.log2(min(h, w))) - 1


class WaveletFlow:
    """One shared coupling block applied level after level."""

    def __init__(self, block, scheme=2, integer=True):
        if scheme == 2 and not isinstance(block, CouplingBlock2D):
            raise ContractError("scheme 2 needs a CouplingBlock2D")
        if scheme == 1 and not isinstance(block, CouplingBlock1D):
            raise ContractError("scheme 1 needs a CouplingBlock1D")
        if scheme not in (1, 2):
            raise ContractError(f"unknown scheme {scheme}")
        self.block = block
        self.scheme = scheme
        self.integer = integer

    @property
    def channels(self):
        return self.block.channels

    @property
    def repeat(self):
        return self.block.repeat

    def params(self):
        return self.block.params()

    def with_mode(self, integer):
        """Same parameters, other arithmetic mode."""
        return WaveletFlow(self.block, self.scheme, integer)

    def _dtype(self):
        return np.int64 if self.integer else np.float64

    # one level
    def step_forward(self, x):
        x = np.asarray(x, dtype=self._dtype())
        if self.scheme == 2:
            a, b, c, d = self.block.forward(list(partition2d(x)), self.integer)
            return a, (b, c, d)
        low, high = self._rows_forward(x)
        a, c = self._cols_forward(low)
        b, d = self._cols_forward(high)
        return a, (b, c, d)

    def step_inverse(self, a, highs):
        b, c, d = highs
        dt = self._dtype()
        a, b, c, d = (np.asarray(v, dtype=dt) for v in (a, b, c, d))
        if self.scheme == 2:
            return merge2d(*self.block.inverse([a, b, c, d], self.integer))
        low = self._cols_inverse(a, c)
        high = self._cols_inverse(b, d)
        return self._rows_inverse(low, high)

    def _rows_forward(self, x):
        n, ch, h, w = x.shape
        o, e = partition1d(x)
        flat = lambda v: v.transpose(0, 2, 1, 3).reshape(n * h, ch, w // 2)
        s, d = self.block.forward(flat(o), flat(e), self.integer)
        back = lambda v: v.reshape(n, h, ch, w // 2).transpose(0, 2, 1, 3)
        return back(s), back(d)

    def _rows_inverse(self, low, high):
        n, ch, h, w2 = low.shape
        flat = lambda v: v.transpose(0, 2, 1, 3).reshape(n * h, ch, w2)
        o, e = self.block.inverse(flat(low), flat(high), self.integer)
        back = lambda v: v.reshape(n, h, ch, w2).transpose(0, 2, 1, 3)
        return interleave1d(back(o), back(e))

    def _cols_forward(self, x):
        s, d = self._rows_forward(np.swapaxes(x, 2, 3))
        return np.swapaxes(s, 2, 3), np.swapaxes(d, 2, 3)

    def _cols_inverse(self, low, high):
        return np.swapaxes(self._rows_inverse(np.swapaxes(low, 2, 3), np.swapaxes(high, 2, 3)), 2, 3)

    # full transform
    def forward(self, image):
        x = np.asarray(image)
        batched = x.ndim == 4
        if not batched:
            if x.ndim != 3:
                raise ContractError(f"image must be [C, H, W] or [N, C, H, W], got {x.shape}")
            x = x[None]
        if x.shape[1] != self.channels:
            raise ContractError(f"flow has {self.channels} channels, image has {x.shape[1]}")
        levels = n_iterations(*x.shape[2:])
        x = x.astype(self._dtype())
        highs = []
        for _ in range(levels):
            x, hp = self.step_forward(x)
            highs.append(hp)
        if not batched:
            highs = [tuple(p[0] for p in hp) for hp in highs]
            x = x[0]
        return LatentPyramid(highs, x, tuple(image.shape[-3:]), batched)

    def inverse(self, pyramid):
        if pyramid.levels != n_iterations(*pyramid.shape[1:]):
            raise ContractError("pyramid depth does not match its image geometry")
        a = pyramid.final if pyramid.batched else pyramid.final[None]
        for hp in reversed(pyramid.highs):
            hp = hp if pyramid.batched else tuple(p[None] for p in hp)
            expect = (a.shape[2], a.shape[3])
            if any(p.shape[2:] != expect for p in hp):
                raise ContractError("pyramid plane geometry mismatch")
            a = self.step_inverse(a, hp)
        return a if pyramid.batched else a[0]

    # differentiable path
    def step_forward_tensor(self, x, rounding="ste"):
        if self.scheme == 2:
            planes = [x[:, :, i::2, j::2] for i, j in ((0, 0), (0, 1), (1, 0), (1, 1))]
            a, b, c, d = self.block.forward_tensor(planes, rounding)
            return a, (b, c, d)
        low, high = self._rows_forward_tensor(x, rounding)
        a, c = self._cols_forward_tensor(low, rounding)
        b, d = self._cols_forward_tensor(high, rounding)
        return a, (b, c, d)

    def _rows_forward_tensor(self, x, rounding):
        n, ch, h, w = x.shape
        flat = lambda v: nx.reshape(nx.transpose(v, (0, 2, 1, 3)), (n * h, ch, w // 2))
        back = lambda v: nx.transpose(nx.reshape(v, (n, h, ch, w // 2)), (0, 2, 1, 3))
        s, d = self.block.forward_tensor(flat(x[:, :, :, 0::2]), flat(x[:, :, :, 1::2]), rounding)
        return back(s), back(d)

    def _cols_forward_tensor(self, x, rounding):
        s, d = self._rows_forward_tensor(nx.transpose(x, (0, 1, 3, 2)), rounding)
        return nx.transpose(s, (0, 1, 3, 2)), nx.transpose(d, (0, 1, 3, 2))

    def forward_tensor(self, x, rounding="ste"):
        """Differentiable forward on a ``[N, C, H, W]`` Tensor.

        Returns (highs, lows, final) where ``lows[i]`` is the low-pass plane
        produced by the same step as ``highs[i]``.
        """
        x = nx.as_tensor(x)
        highs, lows = [], []
        for _ in range(n_iterations(*x.shape[2:])):
            x, hp = self.step_forward_tensor(x, rounding)
            highs.append(hp)
            lows.append(x)
        return highs, lows, x


def wavelet_forward(image, flow):
    return flow.forward(image)


def wavelet_inverse(pyramid, flow):
    return flow.inverse(pyramid)


def scheme1_forward(image, flow):
    if flow.scheme != 1:
        raise ContractError("scheme1_forward needs a scheme-1 flow")
    return flow.forward(image)


# construction ---------------------------------------------------------------

def lifting_net(channels, hidden=10, side="right"):
    """1D 3-layer net c -> hidden -> hidden -> c, kernel 3, all zero.

    The first layer pads two samples on ``side`` (replicate), the others pad
    one sample on both sides.
    """
    if hidden < 2 * channels:
        raise ContractError("hidden width must be at least twice the channel count")
    first = ConvLayerSpec(channels, hidden, 3, f"replicate-{side}", ndim=1)
    mid = ConvLayerSpec(hidden, hidden, 3, "replicate-both", ndim=1)
    last = ConvLayerSpec(hidden, channels, 3, "replicate-both", ndim=1)
    return ConvNet([first, mid, last])


def build_flow(channels, scheme=2, repeat=3, hidden_channels=64, n_hidden=2, rng=None,
               init_scale=0.05, normalize=None):
    """Fresh flow. Random inner layers (if ``rng``), zero last layers: identity map."""
    if scheme == 2:
        nets = [[nx.glow_net(3 * channels, channels, hidden_channels, n_hidden, rng, init_scale)
                 for _ in range(4)] for _ in range(repeat)]
        block = CouplingBlock2D(nets, normalize=True if normalize is None else normalize)
    elif scheme == 1:
        hidden = max(hidden_channels, 2 * channels)
        pairs = [[lifting_net(channels, hidden, "right"), lifting_net(channels, hidden, "left")]
                 for _ in range(repeat)]
        if rng is not None:
            for pair in pairs:
                for net in pair:
                    _randomize_inner(net, rng, init_scale)
        block = CouplingBlock1D(pairs, normalize=False if normalize is None else normalize)
    else:
        raise ContractError(f"unknown scheme {scheme}")
    return WaveletFlow(block, scheme)


def _randomize_inner(net, rng, scale):
    """Small random weights in every layer but the last."""
    for layer in net.layers[:-1]:
        w = layer.weight.data
        fan_in = int(np.prod(w.shape[1:]))
        w[...] = (rng.standard_normal(w.shape) * scale / np.sqrt(fan_in)).astype(np.float32)


def _zero_net(net):
    for p in net.params():
        p.data[...] = 0


# 1D stencils (first-layer taps, padded side) for predict and update
_HAAR_1D = ((1.0, 0.0, 0.0), (0.0, 0.0, 0.5))
_LEGALL_1D = ((0.5, 0.5, 0.0), (0.0, 0.25, 0.25))


def _set_lifting_net(net, taps):
    """Sign-split linear filter: out_i = sum_t taps[t] * x_i[t-th padded tap]."""
    c = net.out_channels
    first, mid, last = net.layers
    if first.kernel_size != 3 or mid.in_channels < 2 * c:
        raise ContractError("network does not have the 3-layer lifting geometry")
    _zero_net(net)
    taps = np.asarray(taps, dtype=np.float32)
    for i in range(c):
        first.weight.data[i, i, :] = taps
        first.weight.data[c + i, i, :] = -taps
    for j in range(2 * c):
        mid.weight.data[j, j, 1] = 1.0
    for i in range(c):
        last.weight.data[i, i, 1] = 1.0
        last.weight.data[i, c + i, 1] = -1.0


def _init_1d(flow, stencils, rng, noise):
    block = flow.block
    p_taps, u_taps = stencils
    for k, (predict, update) in enumerate(block.pairs):
        if predict.layers[0].padding_mode != "replicate-right" or \
                update.layers[0].padding_mode != "replicate-left":
            raise ContractError("predict pads right, update pads left")
        if k == 0:
            _set_lifting_net(predict, p_taps)
            _set_lifting_net(update, u_taps)
        else:
            _zero_net(predict)
            _zero_net(update)
        if rng is not None:
            for net in (predict, update):
                _noise_unused(net, rng, noise, 2 * block.channels if k == 0 else 0)
    block.normalize = False
    return flow


def _noise_unused(net, rng, scale, used):
    """Random weights on hidden rows >= ``used`` that never reach the output."""
    for layer in net.layers[:-1]:
        w = layer.weight.data
        rows = w.shape[0] - used
        if rows <= 0:
            continue
        fan_in = int(np.prod(w.shape[1:]))
        w[used:] = (rng.standard_normal((rows,) + w.shape[1:]) * scale / np.sqrt(fan_in)).astype(np.float32)


# 2D separable lifting as three A,B,C,D sweeps.
# Each entry: (target quadrant, source quadrant, [(dy, dx, weight), ...]).
def _separable_sweeps(kind):
    if kind == "legall":
        pred = lambda dy, dx: [(0, 0, -0.5), (dy, dx, -0.5)]
        upd = lambda dy, dx: [(dy, dx, 0.25), (0, 0, 0.25)]
    else:
        pred = lambda dy, dx: [(0, 0, -1.0)]
        upd = lambda dy, dx: [(0, 0, 0.5)]
    A, B, C, D = range(4)
    return [
        [(B, A, pred(0, 1)), (D, C, pred(0, 1))],
        [(A, B, upd(0, -1)), (C, D, upd(0, -1)), (C, A, pred(1, 0)), (D, B, pred(1, 0))],
        [(A, C, upd(-1, 0)), (B, D, upd(-1, 0))],
    ]


def _init_2d(flow, kind, rng, noise):
    block = flow.block
    c = block.channels
    if block.repeat < 3:
        raise ContractError("the separable 2D initialisation needs repeat >= 3")
    sweeps = _separable_sweeps(kind)
    for s, sweep in enumerate(block.nets):
        for q, net in enumerate(sweep):
            _zero_net(net)
            terms = [t for t in (sweeps[s] if s < 3 else []) if t[0] == q]
            used = 0
            if terms:
                used = 2 * c
                _set_glow_linear(net, q, terms, c, block.normalize)
            if rng is not None:
                _noise_unused(net, rng, noise, used)
    return flow


def _set_glow_linear(net, target, terms, c, normalize):
    first, *hidden, last = net.layers
    if first.kernel_size != 3 or last.kernel_size != 3 or first.out_channels < 2 * c:
        raise ContractError("network does not have the 3x3 / 1x1 / 3x3 geometry")
    sources = [q for q in range(4) if q != target]
    total = 0.0
    for _, src, taps in terms:
        slot = sources.index(src)
        for dy, dx, wgt in taps:
            total += wgt
            for i in range(c):
                first.weight.data[i, slot * c + i, 1 + dy, 1 + dx] += wgt
                first.weight.data[c + i, slot * c + i, 1 + dy, 1 + dx] -= wgt
    for layer in hidden:
        for j in range(2 * c):
            layer.weight.data[j, j, 0, 0] = 1.0
    for i in range(c):
        last.weight.data[i, i, 1, 1] = 1.0
        last.weight.data[i, c + i, 1, 1] = -1.0
        if normalize:
            # undo the (v - 128) / 255 input shift so the net is linear in v
            last.bias.data[i] = np.float32(128.0 * total / 255.0)


def init_haar(flow, rng=None, noise=0.05):
    """Haar lifting: ``d = e - o``, ``s = o + round(d / 2)``."""
    if flow.scheme == 1:
        return _init_1d(flow, _HAAR_1D, rng, noise)
    return _init_2d(flow, "haar", rng, noise)


def init_legall(flow, rng=None, noise=0.05):
    """LeGall 5/3 lifting: ``d = e - round((o_k + o_k+1) / 2)``,
    ``s = o + round((d_k-1 + d_k) / 4)``.

    On a scheme-2 flow the separable 2D transform is spread over three
    sweeps; the column predict of C shares one rounding with the row update.
    ``rng`` adds small weights on hidden channels that do not reach the
    output, so training has live units to start from.
    """
    if flow.scheme == 1:
        return _init_1d(flow, _LEGALL_1D, rng, noise)
    return _init_2d(flow, "legall", rng, noise)
