"""Discrete logistic priors over latent coefficients.

High-pass coefficients get one discrete logistic per coefficient. Its
parameters are either shared per (quadrant, channel) across all levels, or
those shared values plus a residual predicted from the level's low-pass plane
by a small conv net. The final low-pass block uses a K-component mixture per
channel.

Two implementations of each log-pmf exist: numpy float64 with tail folding
(coding and reported BPD) and Tensor float32 without folding (training).
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .lifting import INT16_MAX, INT16_MIN
from .numerics import ContractError, Tensor

MU_GRID = 64
LOG_S_GRID = 32
LOG_S_MIN, LOG_S_MAX = -7.0, 5.0


def quantize_mu(mu):
    return np.round(np.asarray(mu, dtype=np.float64) * MU_GRID) / MU_GRID


def quantize_log_s(log_s):
    q = np.round(np.asarray(log_s, dtype=np.float64) * LOG_S_GRID) / LOG_S_GRID
    return np.clip(q, LOG_S_MIN, LOG_S_MAX)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _log1mexp(x):
    return np.where(x < math.log(2), np.log(-np.expm1(-x)), np.log1p(-np.exp(-x)))


def dl_log_pmf(z, mu, log_s, lo=INT16_MIN, hi=INT16_MAX):
    """log P(z) of a logistic(mu, e^log_s) discretised at half-integers.

    Mass below ``lo`` and above ``hi`` is folded into the end points, so the
    pmf sums to one over ``[lo, hi]``.
    """
    z = np.asarray(z)
    if np.any(z < lo) or np.any(z > hi):
        raise ValueError(f"value outside support [{lo}, {hi}]")
    z = z.astype(np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    inv_s = np.exp(-np.asarray(log_s, dtype=np.float64))
    a = (z + 0.5 - mu) * inv_s
    b = (z - 0.5 - mu) * inv_s
    left = -_softplus(-a)    # log CDF(z + 1/2)
    right = -_softplus(b)    # log (1 - CDF(z - 1/2))
    # CDF(a) - CDF(b) = sigmoid(a) * sigmoid(-b) * (1 - e^{b - a})
    mid = left + right + _log1mexp(np.broadcast_to(inv_s, a.shape))
    out = np.where(z <= lo, left, np.where(z >= hi, right, mid))
    if lo == hi:
        out = np.zeros_like(out)
    return out


def dl_pmf(lo, hi, mu, log_s):
    """pmf vector over ``lo..hi`` (tails folded)."""
    z = np.arange(lo, hi + 1)
    return np.exp(dl_log_pmf(z, mu, log_s, lo, hi))


def mixture_log_pmf(z, mu, log_s, logits, lo=INT16_MIN, hi=INT16_MAX):
    """log sum_k pi_k P_k(z); components along the last axis of the params."""
    z = np.asarray(z)[..., None]
    logits = np.asarray(logits, dtype=np.float64)
    log_w = logits - _logsumexp(logits, -1)[..., None]
    comp = dl_log_pmf(np.broadcast_to(z, np.broadcast_shapes(z.shape, np.shape(mu))),
                      mu, log_s, lo, hi)
    return _logsumexp(comp + log_w, -1)


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return (np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m).squeeze(axis)


def dl_sample(mu, log_s, rng, lo=INT16_MIN, hi=INT16_MAX):
    """Inverse-CDF draw: round a continuous logistic sample, clamp to support."""
    mu = np.asarray(mu, dtype=np.float64)
    s = np.exp(np.asarray(log_s, dtype=np.float64))
    shape = np.broadcast_shapes(mu.shape, s.shape)
    u = rng.random(shape)
    u = np.clip(u, 1e-300, 1 - 1e-16)
    x = mu + s * (np.log(u) - np.log1p(-u))
    return np.clip(np.floor(x + 0.5), lo, hi).astype(np.int64)


def mixture_sample(mu, log_s, logits, rng, lo=INT16_MIN, hi=INT16_MAX):
    mu, log_s, logits = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (mu, log_s, logits)))
    w = np.exp(logits - _logsumexp(logits, -1)[..., None])
    cum = np.cumsum(w, axis=-1)
    u = rng.random(cum.shape[:-1])[..., None]
    k = np.minimum((u > cum).sum(axis=-1), cum.shape[-1] - 1)
    pick = lambda v: np.take_along_axis(v, k[..., None], -1)[..., 0]
    return dl_sample(pick(mu), pick(log_s), rng, lo, hi)


# Tensor versions (training) ------------------------------------------------------

def dl_log_pmf_tensor(z, mu, log_s):
    """Interior discrete-logistic log-pmf on Tensors (no tail folding)."""
    inv_s = nx.exp(-log_s)
    centered = z - mu
    a = (centered + 0.5) * inv_s
    b = (centered - 0.5) * inv_s
    return -nx.softplus(-a) - nx.softplus(b) + nx.log1mexp(inv_s)


def mixture_log_pmf_tensor(z, mu, log_s, logits):
    """``z`` shaped [..., 1]; params broadcast against [..., K]."""
    comp = dl_log_pmf_tensor(z, mu, log_s)
    log_w = logits - nx.reshape(nx.logsumexp(logits, -1), logits.shape[:-1] + (1,))
    return nx.logsumexp(comp + log_w, -1)


# plane distributions (used by the codec and for sampling) -----------------------

class LogisticDist:
    """Independent discrete logistics with (already quantised) parameters."""

    def __init__(self, mu, log_s):
        self.mu, self.log_s = np.broadcast_arrays(np.asarray(mu, dtype=np.float64),
                                                  np.asarray(log_s, dtype=np.float64))

    def log_prob(self, z):
        return dl_log_pmf(z, self.mu, self.log_s)

    def sample(self, rng):
        return dl_sample(self.mu, self.log_s, rng)

    def mode(self):
        return np.floor(self.mu + 0.5).astype(np.int64)

    def mean(self):
        return self.mu


class MixtureDist:
    """Discrete logistic mixtures; component axis last."""

    def __init__(self, mu, log_s, logits):
        self.mu, self.log_s, self.logits = (np.asarray(v, dtype=np.float64) for v in (mu, log_s, logits))

    def log_prob(self, z):
        return mixture_log_pmf(z, self.mu, self.log_s, self.logits)

    def sample(self, rng):
        return mixture_sample(self.mu, self.log_s, self.logits, rng)

    def mean(self):
        w = np.exp(self.logits - _logsumexp(self.logits, -1)[..., None])
        return (w * self.mu).sum(-1)


class UniformDist:
    """Uniform over ``lo..hi``; the raw-pixel baseline (8 bits per value)."""

    def __init__(self, shape, lo=0, hi=255):
        self.shape, self.lo, self.hi = tuple(shape), lo, hi

    def log_prob(self, z):
        z = np.asarray(z)
        if np.any(z < self.lo) or np.any(z > self.hi):
            raise ValueError(f"value outside support [{self.lo}, {self.hi}]")
        return np.full(z.shape, -math.log(self.hi - self.lo + 1))

    def sample(self, rng):
        return rng.integers(self.lo, self.hi + 1, size=self.shape)

    def mean(self):
        return np.full(self.shape, (self.lo + self.hi) / 2.0)


# priors ------------------------------------------------------------------------

class Priors:
    """Learnable prior over a latent pyramid.

    ``high_mu`` / ``high_log_s`` are ``[3, C]`` (quadrants B, C, D by
    channel), shared across levels. ``net`` maps a low-pass plane (C
    channels) to 6C residual maps: mu for B, C, D then log_s for B, C, D.
    The final block uses ``mix_*`` of shape ``[C, K]``.
    """

    def __init__(self, channels, k=5, net=None, high_log_s=2.0, rng=None):
        self.channels = channels
        self.k = k
        self.high_mu = Tensor(np.zeros((3, channels), np.float32), requires_grad=True)
        self.high_log_s = Tensor(np.full((3, channels), high_log_s, np.float32), requires_grad=True)
        centres = (np.arange(k) + 0.5) * 256.0 / k
        self.mix_mu = Tensor(np.tile(centres, (channels, 1)).astype(np.float32), requires_grad=True)
        self.mix_log_s = Tensor(np.full((channels, k), math.log(256.0 / k / 2), np.float32),
                                requires_grad=True)
        self.mix_logits = Tensor(np.zeros((channels, k), np.float32), requires_grad=True)
        if net is not None and (net.in_channels != channels or net.out_channels != 6 * channels):
            raise ContractError("prior net must map C -> 6C channels")
        self.net = net

    @property
    def conditional(self):
        return self.net is not None

    def params(self):
        ps = [self.high_mu, self.high_log_s, self.mix_mu, self.mix_log_s, self.mix_logits]
        if self.net is not None:
            ps += self.net.params()
        return ps

    # numpy path: quantised parameters used by the coder
    def high_params(self, low):
        """Quantised (mu, log_s), each ``[3, N, C, h, w]``, for the high-pass
        planes produced alongside low-pass plane ``low`` ``[N, C, h, w]``."""
        low = np.asarray(low)
        if low.ndim != 4 or low.shape[1] != self.channels:
            raise ContractError(f"low-pass plane must be [N, {self.channels}, h, w], got {low.shape}")
        mu = np.broadcast_to(self.high_mu.data.astype(np.float64)[:, None, :, None, None],
                             (3,) + low.shape)
        ls = np.broadcast_to(self.high_log_s.data.astype(np.float64)[:, None, :, None, None],
                             (3,) + low.shape)
        if self.net is not None:
            x = (low.astype(np.float32) - np.float32(128)) / np.float32(255)
            out = self.net.fixed(x).astype(np.float64)
            n, c, h, w = low.shape
            out = out.reshape(n, 2, 3, c, h, w)
            mu = mu + 255.0 * out[:, 0].transpose(1, 0, 2, 3, 4)
            ls = ls + out[:, 1].transpose(1, 0, 2, 3, 4)
        return quantize_mu(mu), quantize_log_s(ls)

    def high_dists(self, low):
        mu, ls = self.high_params(low)
        return [LogisticDist(mu[q], ls[q]) for q in range(3)]

    def final_params(self):
        mu = quantize_mu(self.mix_mu.data)
        ls = quantize_log_s(self.mix_log_s.data)
        logits = np.round(self.mix_logits.data.astype(np.float64) * MU_GRID) / MU_GRID
        return mu, ls, logits

    def final_dist(self, final):
        """Mixture for a final block ``[N, C, h, w]``."""
        mu, ls, logits = self.final_params()
        shape = np.shape(final) + (self.k,)
        expand = lambda v: np.broadcast_to(v[None, :, None, None, :], shape)
        return MixtureDist(expand(mu), expand(ls), expand(logits))

    # Tensor path: training
    def high_params_tensor(self, low):
        n, c, h, w = low.shape
        mu = nx.reshape(self.high_mu, (1, 3, c, 1, 1))
        ls = nx.reshape(self.high_log_s, (1, 3, c, 1, 1))
        if self.net is not None:
            x = (low - 128.0) * (1.0 / 255.0)
            out = nx.reshape(self.net(x), (n, 2, 3, c, h, w))
            mu = mu + out[:, 0] * 255.0
            ls = ls + out[:, 1]
        return mu, nx.clamp(ls, LOG_S_MIN, LOG_S_MAX)

    def log_prob_tensor(self, highs, lows, final):
        """Total log-probability (nats) per batch item, shape ``[N]``.

        ``highs[i]`` = (B, C, D) Tensors of level i, ``lows[i]`` the matching
        low-pass Tensor, ``final`` the last low-pass block.
        """
        total = None
        for (b, c, d), low in zip(highs, lows):
            z = nx.concat([nx.reshape(p, (p.shape[0], 1) + p.shape[1:]) for p in (b, c, d)], axis=1)
            mu, ls = self.high_params_tensor(low)
            lp = dl_log_pmf_tensor(z, mu, ls)
            lp = nx.reshape(lp, (lp.shape[0], -1)).sum(axis=1)
            total = lp if total is None else total + lp
        n, c, h, w = final.shape
        z = nx.reshape(final, (n, c, h, w, 1))
        mu = nx.reshape(self.mix_mu, (1, c, 1, 1, self.k))
        ls = nx.reshape(nx.clamp(self.mix_log_s, LOG_S_MIN, LOG_S_MAX), (1, c, 1, 1, self.k))
        logits = nx.reshape(self.mix_logits, (1, c, 1, 1, self.k))
        lp = mixture_log_pmf_tensor(z, mu, ls, logits)
        lp = nx.reshape(lp, (n, -1)).sum(axis=1)
        return lp if total is None else total + lp


class UniformPrior:
    """Every coefficient uniform on 0..255: exactly 8 bits per dimension."""

    conditional = False

    def __init__(self, channels, lo=0, hi=255):
        self.channels, self.lo, self.hi = channels, lo, hi

    def params(self):
        return []

    def high_dists(self, low):
        return [UniformDist(np.shape(low), self.lo, self.hi) for _ in range(3)]

    def final_dist(self, final):
        return UniformDist(np.shape(final), self.lo, self.hi)


def prior_eval(low, priors):
    """Per-coefficient quantised (mu, log_s) for the B, C, D planes at ``low``."""
    return priors.high_params(low)


def pyramid_log_prob(pyramid, priors, flow=None):
    """Total log-probability in nats of a (single-image) pyramid.

    No Jacobian term: the couplings are additive. Conditional priors need
    ``flow`` to rebuild each level's low-pass plane.
    """
    final = pyramid.final if pyramid.batched else pyramid.final[None]
    total = float(np.sum(priors.final_dist(final).log_prob(final)))
    low = final
    for level in range(pyramid.levels - 1, -1, -1):
        hp = pyramid.highs[level]
        hp = hp if pyramid.batched else tuple(p[None] for p in hp)
        for dist, plane in zip(priors.high_dists(low), hp):
            total += float(np.sum(dist.log_prob(plane)))
        if level > 0:
            if priors.conditional and flow is None:
                raise ContractError("conditional priors need the flow to rebuild low-pass planes")
            if priors.conditional:
                low = flow.step_inverse(low, hp)
            else:
                low = np.zeros(hp[0].shape[:2] + tuple(2 * s for s in hp[0].shape[2:]))
    return total
