"""Filter extraction, frequency responses and latent mosaics.

The filters of one transform iteration are the rows of the Jacobian of an
output row with respect to the matching input row, taken on the continuous
relaxation (no rounding). Even rows act as low-pass filters, odd rows as
high-pass filters.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor


@dataclass
class FilterBank:
    rows: np.ndarray         # [N, N]: d out[j] / d in[i]
    base: np.ndarray         # input row the Jacobian was taken at
    row_index: int
    channel: int

    @property
    def lowpass(self):
        return self.rows[0::2]

    @property
    def highpass(self):
        return self.rows[1::2]

    def kind(self, j):
        return "low" if j % 2 == 0 else "high"

    def stencil(self, j, half_width):
        """Taps of row ``j`` at input positions ``j - half_width .. j + half_width``."""
        lo, hi = j - half_width, j + half_width + 1
        if lo < 0 or hi > self.rows.shape[1]:
            raise ContractError("stencil runs past the row ends")
        return self.rows[j, lo:hi].copy()


@dataclass
class ResponseCurve:
    omega: np.ndarray
    magnitude: np.ndarray


def _require_continuous(flow):
    if flow.integer:
        raise ContractError("filters are defined on the continuous relaxation; "
                            "pass flow.with_mode(False)")


def _image64(image, flow):
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != flow.channels:
        raise ContractError(f"image must be [{flow.channels}, H, W]")
    return x


def _row_transform_tensor(flow, x, row_index):
    """Output row ``row_index`` (all channels) of one iteration; ``x`` is a
    batched [N, C, H, W] Tensor. Returns [N, C, W]."""
    if flow.scheme == 1:
        row = x[:, :, row_index, :]
        s, d = flow.block.forward_tensor(row[:, :, 0::2], row[:, :, 1::2], rounding="none")
        n, c, half = s.shape
        both = nx.concat([nx.reshape(s, (n, c, half, 1)), nx.reshape(d, (n, c, half, 1))], axis=3)
        return nx.reshape(both, (n, c, 2 * half))
    a, (b, c_, d) = flow.step_forward_tensor(x, rounding="none")
    r = row_index // 2
    left, right = (a, b) if row_index % 2 == 0 else (c_, d)
    n, ch, _, half = left.shape
    lr = [nx.reshape(p[:, :, r, :], (n, ch, half, 1)) for p in (left, right)]
    return nx.reshape(nx.concat(lr, axis=3), (n, ch, 2 * half))


def extract_filters(flow, image, row_index, channel=0):
    """Jacobian of output row ``row_index`` w.r.t. the same input row, by
    reverse-mode autodiff (one backward pass over a tiled batch)."""
    _require_continuous(flow)
    x = _image64(image, flow)
    c, h, w = x.shape
    if not 0 <= row_index < h or not 0 <= channel < c:
        raise ContractError("row or channel out of range")
    xt = Tensor(np.repeat(x[None], w, axis=0), requires_grad=True)
    out = _row_transform_tensor(flow, xt, row_index)
    mask = np.zeros((w, c, w))
    mask[np.arange(w), channel, np.arange(w)] = 1.0
    nx.backward(nx.tsum(out * Tensor(mask)))
    rows = np.asarray(xt.grad[:, channel, row_index, :], dtype=np.float64)
    return FilterBank(rows, x[channel, row_index].copy(), row_index, channel)


def jacobian_fd(flow, image, row_index, channel=0, step=1e-4):
    """Central finite-difference version of :func:`extract_filters` rows
    (float64 forward passes, no graph reuse)."""
    _require_continuous(flow)
    x = _image64(image, flow)
    w = x.shape[2]
    rows = np.zeros((w, w))
    for i in range(w):
        xp, xm = x.copy(), x.copy()
        xp[channel, row_index, i] += step
        xm[channel, row_index, i] -= step
        pair = Tensor(np.stack([xp, xm]))
        out = _row_transform_tensor(flow, pair, row_index).data
        rows[:, i] = (out[0, channel] - out[1, channel]) / (2 * step)
    return rows


def freq_response(h, n_samples=256):
    """|sum_n h[n] exp(-i w n)| on ``n_samples`` points of [0, pi]."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 1 or n_samples < 1:
        raise ContractError("need a 1D filter and at least one sample")
    omega = np.linspace(0.0, np.pi, n_samples)
    n = np.arange(h.size)
    return ResponseCurve(omega, np.abs(np.exp(-1j * np.outer(omega, n)) @ h))


def write_filters_csv(path, bank):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["filter_index", "kind", "tap_index", "value"])
        for j, row in enumerate(bank.rows):
            for i, v in enumerate(row):
                wr.writerow([j, bank.kind(j), i, repr(float(v))])


def write_response_csv(path, bank, n_samples=256):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["filter_index", "kind", "omega", "magnitude"])
        for j, row in enumerate(bank.rows):
            curve = freq_response(row, n_samples)
            for om, mag in zip(curve.omega, curve.magnitude):
                wr.writerow([j, bank.kind(j), repr(float(om)), repr(float(mag))])


def _normalise(tile):
    """Per-channel min-max to 0..255; a flat channel maps to mid-grey."""
    out = np.empty(tile.shape, np.uint8)
    for ch, plane in enumerate(tile):
        lo, hi = float(plane.min()), float(plane.max())
        if hi > lo:
            out[ch] = np.floor((plane - lo) / (hi - lo) * 255 + 0.5)
        else:
            out[ch] = 128
    return out


def visualize_latents(pyramid, priors, iterations=None, flow=None):
    """Mosaic in the usual wavelet layout: the low-pass block top-left, the
    B / C / D planes of each level to its right, below and diagonal.

    High-pass planes have their prior means subtracted first. Conditional
    priors need ``flow`` to rebuild the low-pass planes they depend on.
    """
    if pyramid.batched:
        raise ContractError("visualise one image at a time")
    levels = pyramid.levels if iterations is None else iterations
    if not 1 <= levels <= pyramid.levels:
        raise ContractError(f"iterations must lie in 1..{pyramid.levels}")
    if flow is None and (levels < pyramid.levels or getattr(priors, "conditional", False)):
        raise ContractError("partial mosaics and conditional priors need the flow")
    c, h, w = pyramid.shape
    mosaic = np.zeros((c, h, w), np.uint8)
    low = pyramid.final[None]
    lows = {pyramid.levels: low}
    if getattr(priors, "conditional", False):
        for lv in range(pyramid.levels - 1, 0, -1):
            low = flow.step_inverse(low, tuple(p[None] for p in pyramid.highs[lv]))
            lows[lv] = low
    for lv in range(levels):
        planes = pyramid.highs[lv]
        hh, ww = planes[0].shape[1:]
        cond = lows.get(lv + 1, np.zeros((1, c, hh, ww)))
        means = [d.mean()[0] for d in priors.high_dists(cond)]
        for (dy, dx), plane, mean in zip(((0, 1), (1, 0), (1, 1)), planes, means):
            tile = plane - np.broadcast_to(mean, plane.shape)
            mosaic[:, dy * hh:(dy + 1) * hh, dx * ww:(dx + 1) * ww] = _normalise(tile)
    a = pyramid.lowpass(levels, flow) if levels < pyramid.levels else pyramid.final
    mosaic[:, :a.shape[1], :a.shape[2]] = _normalise(a)
    return mosaic
