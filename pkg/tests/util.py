"""Helpers shared by the test modules."""
import numpy as np

from nwflow import build_flow, init_haar, init_legall


def make_flow(channels=3, scheme=2, init="legall", hidden=8, n_hidden=1, seed=0, repeat=3):
    rng = np.random.default_rng(seed)
    flow = build_flow(channels, scheme=scheme, repeat=repeat, hidden_channels=hidden,
                      n_hidden=n_hidden, rng=rng)
    if init == "legall":
        init_legall(flow, rng=rng)
    elif init == "haar":
        init_haar(flow, rng=rng)
    return flow


def numeric_grad(f, x, h):
    """Central differences of scalar ``f`` with respect to every entry of ``x``
    (modified in place and restored)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        g.reshape(-1)[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# direct lifting oracles on [..., L] signals (o = even samples, e = odd samples)

def rnd(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def haar_1d(o, e, integer=True):
    r = rnd if integer else (lambda v: v)
    d = e - o
    return o + r(d / 2), d


def legall_1d(o, e, integer=True):
    r = rnd if integer else (lambda v: v)
    o_next = np.concatenate([o[..., 1:], o[..., -1:]], axis=-1)
    d = e - r((o + o_next) / 2)
    d_prev = np.concatenate([d[..., :1], d[..., :-1]], axis=-1)
    return o + r((d_prev + d) / 4), d


def separable_2d(x, oracle, integer=True):
    """Rows then columns; returns (A, B, C, D) = (LL, row-high/col-low,
    row-low/col-high, HH)."""
    x = np.asarray(x, dtype=np.float64)
    low, high = oracle(x[..., 0::2], x[..., 1::2], integer)
    cols = lambda v: [np.swapaxes(t, -1, -2) for t in
                      oracle(np.swapaxes(v, -1, -2)[..., 0::2], np.swapaxes(v, -1, -2)[..., 1::2],
                             integer)]
    a, c = cols(low)
    b, d = cols(high)
    return a, b, c, d


def inverse_legall_1d(s, d):
    """Integer inverse of :func:`legall_1d`."""
    d_prev = np.concatenate([d[..., :1], d[..., :-1]], axis=-1)
    o = s - rnd((d_prev + d) / 4)
    o_next = np.concatenate([o[..., 1:], o[..., -1:]], axis=-1)
    e = d + rnd((o + o_next) / 2)
    out = np.empty(o.shape[:-1] + (2 * o.shape[-1],))
    out[..., 0::2], out[..., 1::2] = o, e
    return out


def inverse_separable_legall(a, b, c, d):
    cols = lambda lo, hi: np.swapaxes(inverse_legall_1d(np.swapaxes(lo, -1, -2),
                                                        np.swapaxes(hi, -1, -2)), -1, -2)
    return inverse_legall_1d(cols(a, c), cols(b, d))


def directional_check(loss_fn, params, rng, h, dtype):
    """(autodiff, finite difference) of ``loss_fn`` along a random direction.

    ``loss_fn`` returns a scalar Tensor; parameters are cast to ``dtype``.
    """
    from nwflow import numerics as nx
    for p in params:
        p.data = p.data.astype(dtype)
        p.grad = None
    nx.backward(loss_fn())
    v = [rng.standard_normal(p.shape) for p in params]
    ad = sum(float(np.sum(p.grad * d)) for p, d in zip(params, v))
    base = [p.data.copy() for p in params]

    def at(t):
        for p, b, d in zip(params, base, v):
            p.data = (b + t * d).astype(dtype)
        return float(loss_fn().data)

    fd = (at(h) - at(-h)) / (2 * h)
    for p, b in zip(params, base):
        p.data = b
    return ad, fd
