"""Binary model files: one coupling block, the priors, optional optimiser state.

Layout (little-endian)::

    "NWFM" u16 version u8 scheme u8 repeat u8 channels u8 flags
    then sections: 4-byte tag, u32 length, payload

``FLOW`` holds the coupling networks, ``PRIU`` the shared prior parameters,
``PRIN`` the optional prior net, ``UNIF`` a uniform prior, ``META`` UTF-8
``key=value`` lines and ``OPTM`` the optimiser moments. The model hash covers
everything except ``OPTM`` so a checkpoint and the exported model agree.
"""
from __future__ import annotations

import hashlib
import io
import struct

import numpy as np

from .lifting import CouplingBlock1D, CouplingBlock2D, WaveletFlow
from .numerics import AdamaxState, ContractError, ConvLayerSpec, ConvNet, Tensor
from .prior import Priors, UniformPrior

MAGIC = b"NWFM"
VERSION = 1
_PADS = ["none", "replicate-both", "replicate-left", "replicate-right"]
_FLAG_NORMALIZE = 1


class ModelFormatError(ValueError):
    """Malformed or unsupported model file."""


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _write_net(out, net):
    out.write(struct.pack("<B", len(net.layers)))
    for layer in net.layers:
        out.write(struct.pack("<BHHBB", layer.ndim, layer.in_channels, layer.out_channels,
                              layer.kernel_size, _PADS.index(layer.padding_mode)))
        out.write(_f32(layer.weight.data))
        out.write(_f32(layer.bias.data))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ModelFormatError("model file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)

    def done(self):
        return self.pos == len(self.data)


def _read_net(r):
    (n_layers,) = r.unpack("<B")
    layers = []
    for _ in range(n_layers):
        ndim, cin, cout, k, pad = r.unpack("<BHHBB")
        if ndim not in (1, 2) or pad >= len(_PADS):
            raise ModelFormatError("bad layer record")
        w = r.floats((cout, cin) + (k,) * ndim)
        b = r.floats((cout,))
        try:
            layers.append(ConvLayerSpec(cin, cout, k, _PADS[pad], ndim,
                                        Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
        except ContractError as exc:
            raise ModelFormatError(str(exc)) from None
    try:
        return ConvNet(layers)
    except ContractError as exc:
        raise ModelFormatError(str(exc)) from None


def _section(tag, payload):
    return tag + struct.pack("<I", len(payload)) + payload


def _flow_nets(flow):
    if flow.scheme == 2:
        return [net for sweep in flow.block.nets for net in sweep]
    return [net for pair in flow.block.pairs for net in pair]


def serialize(flow, priors, meta=None, optimizer=None):
    """Model bytes. ``optimizer`` is an ``AdamaxState`` to embed (checkpoints)."""
    out = io.BytesIO()
    flags = _FLAG_NORMALIZE if flow.block.normalize else 0
    out.write(MAGIC + struct.pack("<HBBBB", VERSION, flow.scheme, flow.repeat, flow.channels, flags))
    body = io.BytesIO()
    nets = _flow_nets(flow)
    body.write(struct.pack("<H", len(nets)))
    for net in nets:
        _write_net(body, net)
    out.write(_section(b"FLOW", body.getvalue()))
    if isinstance(priors, UniformPrior):
        out.write(_section(b"UNIF", struct.pack("<ii", priors.lo, priors.hi)))
    else:
        payload = struct.pack("<B", priors.k) + b"".join(
            _f32(t.data) for t in (priors.high_mu, priors.high_log_s, priors.mix_mu,
                                   priors.mix_log_s, priors.mix_logits))
        out.write(_section(b"PRIU", payload))
        if priors.net is not None:
            body = io.BytesIO()
            _write_net(body, priors.net)
            out.write(_section(b"PRIN", body.getvalue()))
    if meta:
        text = "".join(f"{k}={v}\n" for k, v in sorted(meta.items()))
        out.write(_section(b"META", text.encode("utf-8")))
    if optimizer is not None:
        out.write(_section(b"OPTM", _optimizer_bytes(optimizer)))
    return out.getvalue()


def _optimizer_bytes(state):
    head = struct.pack("<IIddddd", state.epoch, state.step, state.lr_base, state.decay,
                       state.beta1, state.beta2, state.epsilon)
    moments = b"".join(_f32(m) + _f32(u) for m, u in zip(state.first_moment, state.inf_norm))
    return head + struct.pack("<I", len(state.first_moment)) + moments


def deserialize(data):
    """(flow, priors, meta, optimizer_or_None) from model bytes."""
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    version, scheme, repeat, channels, flags = r.unpack("<HBBBB")
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    if scheme not in (1, 2):
        raise ModelFormatError(f"unknown scheme {scheme}")
    sections = {}
    while not r.done():
        tag = r.take(4)
        (length,) = r.unpack("<I")
        sections[tag] = r.take(length)
    if b"FLOW" not in sections:
        raise ModelFormatError("model file has no FLOW section")
    fr = _Reader(sections[b"FLOW"])
    (n_nets,) = fr.unpack("<H")
    nets = [_read_net(fr) for _ in range(n_nets)]
    per = 4 if scheme == 2 else 2
    if n_nets != per * repeat:
        raise ModelFormatError("network count does not match scheme and repeat")
    groups = [nets[i:i + per] for i in range(0, n_nets, per)]
    normalize = bool(flags & _FLAG_NORMALIZE)
    try:
        block = CouplingBlock2D(groups, normalize) if scheme == 2 else CouplingBlock1D(groups, normalize)
        flow = WaveletFlow(block, scheme)
    except ContractError as exc:
        raise ModelFormatError(str(exc)) from None
    if block.channels != channels:
        raise ModelFormatError("channel count does not match the networks")

    if b"UNIF" in sections:
        lo, hi = struct.unpack("<ii", sections[b"UNIF"])
        priors = UniformPrior(channels, lo, hi)
    elif b"PRIU" in sections:
        pr = _Reader(sections[b"PRIU"])
        (k,) = pr.unpack("<B")
        net = _read_net(_Reader(sections[b"PRIN"])) if b"PRIN" in sections else None
        try:
            priors = Priors(channels, k, net)
        except ContractError as exc:
            raise ModelFormatError(str(exc)) from None
        for t, shape in ((priors.high_mu, (3, channels)), (priors.high_log_s, (3, channels)),
                         (priors.mix_mu, (channels, k)), (priors.mix_log_s, (channels, k)),
                         (priors.mix_logits, (channels, k))):
            t.data = pr.floats(shape)
        if not pr.done():
            raise ModelFormatError("trailing bytes in PRIU section")
    else:
        raise ModelFormatError("model file has no prior section")

    meta = {}
    if b"META" in sections:
        for line in sections[b"META"].decode("utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    optimizer = None
    if b"OPTM" in sections:
        optimizer = _read_optimizer(sections[b"OPTM"], flow.params() + priors.params())
    return flow, priors, meta, optimizer


def _read_optimizer(data, params):
    r = _Reader(data)
    epoch, step, lr_base, decay, beta1, beta2, eps = r.unpack("<IIddddd")
    (n,) = r.unpack("<I")
    if n == 0:
        return AdamaxState(lr_base, decay, beta1, beta2, eps, step, epoch)
    if n != len(params):
        raise ModelFormatError("optimiser state does not match the parameters")
    m, u = [], []
    for p in params:
        m.append(r.floats(p.shape))
        u.append(r.floats(p.shape))
    return AdamaxState(lr_base, decay, beta1, beta2, eps, step, epoch, m, u)


def model_hash(flow, priors):
    """8-byte digest of the model (optimiser state and metadata excluded)."""
    return hashlib.blake2b(serialize(flow, priors), digest_size=8).digest()


def save(path, flow, priors, meta=None, optimizer=None):
    data = serialize(flow, priors, meta, optimizer)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load(path):
    with open(path, "rb") as f:
        return deserialize(f.read())
