"""Small reverse-mode autodiff on numpy arrays, conv layers and Adamax.

Only what the coupling and prior networks need: elementwise arithmetic with
broadcasting, reductions, slicing, channel concat, replicate-padded
convolutions and a handful of log-probability helpers. Values are float32 by
default; float64 tensors are carried through unchanged so gradient checks
can run at higher precision.

Two convolution paths exist. :func:`conv1d` / :func:`conv2d` build graph
nodes and use BLAS-backed im2col products (training, analysis).
:func:`conv1d_fixed` / :func:`conv2d_fixed` are inference-only and use a
fixed summation order (output channel, position, input channel, tap) so
integer-mode coding is reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _backend

PADDING_MODES = ("replicate-left", "replicate-right", "replicate-both", "none")


class ContractError(ValueError):
    """Shape or argument contract violated."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.data.shape[a] for a in np.atleast_1d(axis)])
        return tsum(self, axis) * (1.0 / float(n))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return Tensor(arr.astype(dtype, copy=False))


def _make(data, parents, backward_fn):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced")
    return Tensor(data, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _coerce(a, b):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b):
    a, b = _coerce(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(out, (a, b), bw)


def sub(a, b):
    a, b = _coerce(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(out, (a, b), bw)


def mul(a, b):
    a, b = _coerce(a, b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(out, (a, b), bw)


def tsum(a, axis=None):
    out = np.sum(a.data, axis=axis, keepdims=False)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a, shape):
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)
    return _make(out, (a,), bw)


def getitem(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _has_advanced(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)
    return _make(np.array(out), (a,), bw)


def _has_advanced(idx):
    idx = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def transpose(a, axes):
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)
    return _make(np.ascontiguousarray(out), (a,), bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        parts = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(sl)])
        return tuple(parts)
    return _make(out, tuple(tensors), bw)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype)

    def bw(g):
        return (g * mask,)
    return _make(out, (a,), bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)
    return _make(out, (a,), bw)


def log(a):
    out = np.log(a.data)

    def bw(g):
        return (g / a.data,)
    return _make(out, (a,), bw)


def sigmoid(a):
    out = _np_sigmoid(a.data)

    def bw(g):
        return (g * out * (1 - out),)
    return _make(out, (a,), bw)


def softplus(a):
    """log(1 + e^a), stable for large |a|."""
    out = np.logaddexp(0, a.data).astype(a.dtype)

    def bw(g):
        return (g * _np_sigmoid(a.data),)
    return _make(out, (a,), bw)


def log1mexp(a):
    """log(1 - e^{-a}) for a > 0."""
    x = a.data
    if np.any(x <= 0):
        raise FloatingPointError("log1mexp needs positive input")
    out = np.where(x < 0.6931, np.log(-np.expm1(-x)), np.log1p(-np.exp(-x))).astype(a.dtype)

    def bw(g):
        return (g / np.expm1(x),)
    return _make(out, (a,), bw)


def logsumexp(a, axis):
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * e / s,)
    return _make(out.astype(a.dtype), (a,), bw)


def clamp(a, lo, hi):
    """Clip with zero gradient outside ``[lo, hi]``."""
    x = a.data
    mask = (x >= lo) & (x <= hi)
    out = np.clip(x, lo, hi).astype(a.dtype)

    def bw(g):
        return (g * mask,)
    return _make(out, (a,), bw)


def round_ste(a):
    """floor(x + 1/2) forward, identity backward (straight-through)."""
    out = np.floor(a.data + 0.5).astype(a.dtype)

    def bw(g):
        return (g,)
    return _make(out, (a,), bw)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward already ran on this graph; rebuild it first")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = pg.astype(parent.dtype, copy=False)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    loss._done = True


# convolutions ---------------------------------------------------------------

def _pad_widths(mode, k):
    if mode == "replicate-left":
        return (k - 1, 0)
    if mode == "replicate-right":
        return (0, k - 1)
    if mode == "replicate-both":
        if k % 2 != 1:
            raise ContractError("replicate-both needs an odd kernel")
        return ((k - 1) // 2, (k - 1) // 2)
    if mode == "none":
        return (0, 0)
    raise ContractError(f"unknown padding mode {mode!r}")


def replicate_pad(x, widths):
    """Edge-replicate pad of the trailing axes; ``widths`` pairs per axis."""
    lead = [(0, 0)] * (x.ndim - len(widths))
    return np.pad(x, lead + list(widths), mode="edge")


def _replicate_unpad_grad(gp, widths):
    g = gp
    nd = g.ndim
    for k, (before, after) in enumerate(widths):
        ax = nd - len(widths) + k
        if before == 0 and after == 0:
            continue
        n = g.shape[ax] - before - after
        sl = [slice(None)] * nd
        sl[ax] = slice(before, before + n)
        core = g[tuple(sl)].copy()
        if before:
            sl[ax] = slice(0, before)
            lead = g[tuple(sl)].sum(axis=ax)
            ix = [slice(None)] * nd
            ix[ax] = 0
            core[tuple(ix)] += lead
        if after:
            sl[ax] = slice(before + n, None)
            tail = g[tuple(sl)].sum(axis=ax)
            ix = [slice(None)] * nd
            ix[ax] = n - 1
            core[tuple(ix)] += tail
        g = core
    return g


def conv1d(x, w, b, padding="replicate-both"):
    """Differentiable 1D cross-correlation on ``[N, C, L]``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, c, length = x.shape
    o, c2, k = w.shape
    if c != c2:
        raise ContractError(f"conv1d: input has {c} channels, weight expects {c2}")
    pw = _pad_widths(padding, k)
    xp = replicate_pad(x.data, [pw])
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)  # N,C,L',k
    out = np.einsum("nclk,ock->nol", cols, w.data, optimize=True) + b.data[None, :, None]

    def bw(g):
        gw = np.einsum("nol,nclk->ock", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2))
        gcols = np.einsum("nol,ock->nclk", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        lo = gcols.shape[2]
        for t in range(k):
            gxp[:, :, t:t + lo] += gcols[..., t]
        return _replicate_unpad_grad(gxp, [pw]), gw, gb
    return _make(out.astype(x.dtype), (x, w, b), bw)


def conv2d(x, w, b, padding="replicate-both"):
    """Differentiable 2D cross-correlation on ``[N, C, H, W]``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ContractError(f"conv2d: input has {c} channels, weight expects {c2}")
    if kh != kw:
        raise ContractError("conv2d: square kernels only")
    pw = _pad_widths(padding, kh)
    xp = replicate_pad(x.data, [pw, pw])
    if kh == 1:
        out = np.einsum("nchw,oc->nohw", xp, w.data[:, :, 0, 0], optimize=True)
        out = out + b.data[None, :, None, None]

        def bw1(g):
            gw = np.einsum("nohw,nchw->oc", g, xp, optimize=True)[:, :, None, None]
            gx = np.einsum("nohw,oc->nchw", g, w.data[:, :, 0, 0], optimize=True)
            return gx, gw, g.sum(axis=(0, 2, 3))
        return _make(out.astype(x.dtype), (x, w, b), bw1)

    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N,C,H,W,kh,kw
    out = np.einsum("nchwyx,ocyx->nohw", cols, w.data, optimize=True) + b.data[None, :, None, None]

    def bw(g):
        gw = np.einsum("nohw,nchwyx->ocyx", g, cols, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gcols = np.einsum("nohw,ocyx->nchwyx", g, w.data, optimize=True)
        gxp = np.zeros_like(xp)
        ho, wo = gcols.shape[2], gcols.shape[3]
        for ty in range(kh):
            for tx in range(kw):
                gxp[:, :, ty:ty + ho, tx:tx + wo] += gcols[..., ty, tx]
        return _replicate_unpad_grad(gxp, [pw, pw]), gw, gb
    return _make(out.astype(x.dtype), (x, w, b), bw)


def conv1d_fixed(x, w, b, padding="replicate-both"):
    """Fixed-order float32 1D convolution (no graph) on ``[N, C, L]``."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv1d: shapes {x.shape} and {w.shape} do not match")
    xp = np.ascontiguousarray(replicate_pad(x, [_pad_widths(padding, w.shape[2])]))
    return _backend.conv1d_valid(xp, w, b)


def conv2d_fixed(x, w, b, padding="replicate-both"):
    """Fixed-order float32 2D convolution (no graph) on ``[N, C, H, W]``."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    b = np.ascontiguousarray(b, dtype=np.float32)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv2d: shapes {x.shape} and {w.shape} do not match")
    pw = _pad_widths(padding, w.shape[2])
    xp = np.ascontiguousarray(replicate_pad(x, [pw, pw]))
    return _backend.conv2d_valid(xp, w, b)


@dataclass
class ConvLayerSpec:
    """One convolution layer: weights ``out x in x k (x k)`` plus bias."""

    in_channels: int
    out_channels: int
    kernel_size: int
    padding_mode: str = "replicate-both"
    ndim: int = 2
    weight: Tensor = None
    bias: Tensor = None

    def __post_init__(self):
        if self.in_channels <= 0 or self.out_channels <= 0 or self.kernel_size <= 0:
            raise ContractError("channel counts and kernel size must be positive")
        if self.kernel_size % 2 != 1:
            raise ContractError("kernel size must be odd")
        if self.padding_mode not in PADDING_MODES:
            raise ContractError(f"unknown padding mode {self.padding_mode!r}")
        if self.ndim not in (1, 2):
            raise ContractError("ndim must be 1 or 2")
        wshape = (self.out_channels, self.in_channels) + (self.kernel_size,) * self.ndim
        if self.weight is None:
            self.weight = Tensor(np.zeros(wshape, np.float32), requires_grad=True)
        if self.bias is None:
            self.bias = Tensor(np.zeros(self.out_channels, np.float32), requires_grad=True)
        if self.weight.shape != wshape:
            raise ContractError(f"weight shape {self.weight.shape}, expected {wshape}")
        if self.bias.shape != (self.out_channels,):
            raise ContractError(f"bias shape {self.bias.shape}, expected ({self.out_channels},)")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        fn = conv1d if self.ndim == 1 else conv2d
        return fn(x, self.weight, self.bias, self.padding_mode)

    def fixed(self, x):
        fn = conv1d_fixed if self.ndim == 1 else conv2d_fixed
        return fn(x, self.weight.data, self.bias.data, self.padding_mode)


class ConvNet:
    """Conv stack with ReLU between layers (none after the last)."""

    def __init__(self, layers):
        if not layers:
            raise ContractError("empty network")
        for a, b in zip(layers, layers[1:]):
            if a.out_channels != b.in_channels:
                raise ContractError("consecutive layers disagree on channel count")
        self.layers = list(layers)

    @property
    def in_channels(self):
        return self.layers[0].in_channels

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def fixed(self, x):
        for i, layer in enumerate(self.layers):
            x = layer.fixed(x)
            if i < len(self.layers) - 1:
                x = np.maximum(x, np.float32(0))
        return x

    def is_zero(self):
        return all(not np.any(p.data) for p in self.params())


def glow_net(in_channels, out_channels, hidden_channels, n_hidden, rng=None, scale=0.05,
             zero_last=True):
    """3x3 -> (1x1) * n_hidden -> 3x3 stack, 2D, replicate padding."""
    chans = [in_channels] + [hidden_channels] * (n_hidden + 1) + [out_channels]
    kernels = [3] + [1] * n_hidden + [3]
    layers = []
    for i, k in enumerate(kernels):
        spec = ConvLayerSpec(chans[i], chans[i + 1], k, "replicate-both", ndim=2)
        last = i == len(kernels) - 1
        if rng is not None and not (last and zero_last):
            fan_in = chans[i] * k * k
            spec.weight.data[...] = (rng.standard_normal(spec.weight.shape) * scale
                                     / np.sqrt(fan_in)).astype(np.float32)
        layers.append(spec)
    return ConvNet(layers)


@dataclass
class AdamaxState:
    lr_base: float = 1e-3
    decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    epoch: int = 0
    first_moment: list = field(default_factory=list)
    inf_norm: list = field(default_factory=list)

    def lr(self, epoch):
        return self.lr_base * self.decay ** epoch


def adamax_step(state, params, grads, epoch=0):
    """In-place Adamax update of ``params`` (Tensors) with ``grads`` (arrays)."""
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.inf_norm = [np.zeros_like(p.data) for p in params]
    if len(params) != len(state.first_moment):
        raise ContractError("parameter list changed between steps")
    state.step += 1
    lr = state.lr(epoch)
    bias_corr = 1.0 - state.beta1 ** state.step
    for p, g, m, u in zip(params, grads, state.first_moment, state.inf_norm):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        np.maximum(state.beta2 * u, np.abs(g), out=u)
        p.data -= ((lr / bias_corr) * m / (u + state.epsilon)).astype(p.dtype)
    return params
