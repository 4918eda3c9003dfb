import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nwflow import lifting
from nwflow.lifting import (LiftingOverflow, build_flow, init_haar, init_legall, merge2d,
                            n_iterations, partition2d, round_nearest)
from nwflow.modelfile import serialize
from nwflow.numerics import ContractError, Tensor
from util import haar_1d, legall_1d, make_flow, separable_2d

ZERO2 = build_flow(3, scheme=2, repeat=2, hidden_channels=4, n_hidden=1)
ZERO1 = build_flow(1, scheme=1, repeat=1, hidden_channels=4)


def test_round_nearest_examples():
    assert round_nearest(0.5) == 1
    assert round_nearest(-0.5) == 0
    assert round_nearest(2.0) == 2
    assert round_nearest(np.array([1.5, -1.5, -2.5])).tolist() == [2, -1, -2]


def test_n_iterations():
    assert n_iterations(4, 4) == 1
    assert n_iterations(64, 64) == 5
    assert n_iterations(16, 64) == 3
    for bad in ((2, 2), (6, 8), (8, 12)):
        with pytest.raises(ContractError):
            n_iterations(*bad)


def test_partition_merge_roundtrip(rng):
    x = rng.integers(0, 255, (2, 3, 6, 8))
    assert np.array_equal(merge2d(*partition2d(x)), x)
    with pytest.raises(ContractError):
        partition2d(np.zeros((3, 5, 4)))


def test_zero_networks_leave_planes_unchanged(rng):
    planes = [rng.integers(-50, 50, (1, 3, 4, 4)) for _ in range(4)]
    out = ZERO2.block.forward(planes)
    assert all(np.array_equal(a, b) for a, b in zip(out, planes))


@pytest.mark.parametrize("flow", [ZERO1, ZERO2], ids=["scheme1", "scheme2"])
def test_zero_networks_reshuffle(rng, flow):
    img = rng.integers(0, 256, (flow.channels, 8, 8))
    pyr = flow.forward(img)
    values = np.concatenate([pyr.final.ravel()] + [p.ravel() for t in pyr.highs for p in t])
    assert sorted(values.tolist()) == sorted(img.ravel().tolist())


def test_4x4_pyramid_layout(legall3, rng):
    pyr = legall3.forward(rng.integers(0, 256, (3, 4, 4)))
    assert pyr.levels == 1
    assert [p.shape for p in pyr.highs[0]] == [(3, 2, 2)] * 3
    assert pyr.final.shape == (3, 2, 2)
    assert pyr.size() == 48


@pytest.mark.parametrize("h,w", [(4, 4), (8, 16), (32, 8), (64, 64)])
def test_dimension_conserved(legall1, rng, h, w):
    pyr = legall1.forward(rng.integers(0, 256, (1, h, w)))
    assert pyr.size() == h * w
    assert pyr.levels == n_iterations(h, w)


def test_haar_pair_example():
    flow = init_haar(build_flow(1, scheme=1, repeat=1, hidden_channels=4))
    s, d = flow.block.forward(np.array([[[2]]]), np.array([[[4]]]))
    assert (s.item(), d.item()) == (3, 2)


def test_legall_constant_signal():
    flow = init_legall(build_flow(1, scheme=1, repeat=1, hidden_channels=4))
    for c in (0, 7, 200, -33):
        s, d = flow.block.forward(np.full((1, 1, 8), c), np.full((1, 1, 8), c))
        assert np.all(d == 0) and np.all(s == c)


@pytest.mark.parametrize("init,oracle", [(init_haar, haar_1d), (init_legall, legall_1d)])
def test_1d_init_matches_oracle(rng, init, oracle):
    flow = init(build_flow(1, scheme=1, repeat=2, hidden_channels=10, rng=rng), rng=rng)
    sig = rng.integers(-255, 256, (300, 1, 24))
    s, d = flow.block.forward(sig[..., 0::2], sig[..., 1::2])
    es, ed = oracle(sig[..., 0::2], sig[..., 1::2])
    assert np.array_equal(s, es) and np.array_equal(d, ed)


@pytest.mark.parametrize("init,oracle", [(init_haar, haar_1d), (init_legall, legall_1d)])
def test_scheme1_step_is_separable_transform(rng, init, oracle):
    # [DERIVED] integer scheme-1 step equals the row-then-column lifting oracle
    flow = init(build_flow(2, scheme=1, repeat=1, hidden_channels=10))
    x = rng.integers(0, 256, (3, 2, 8, 8))
    a, (b, c, d) = flow.step_forward(x)
    for got, want in zip((a, b, c, d), separable_2d(x, oracle)):
        assert np.array_equal(got, want)


@pytest.mark.parametrize("kind,oracle", [("haar", haar_1d), ("legall", legall_1d)])
def test_scheme2_continuous_is_separable_transform(rng, kind, oracle):
    flow = make_flow(3, scheme=2, init=kind).with_mode(False)
    x = rng.uniform(0, 255, (2, 3, 8, 8))
    a, (b, c, d) = flow.step_forward(x)
    for got, want in zip((a, b, c, d), separable_2d(x, oracle, integer=False)):
        assert np.allclose(got, want, atol=2e-3)


def test_scheme2_integer_close_to_oracle(rng, legall3):
    # rounding is shared differently, so allow a small discrepancy
    x = rng.integers(0, 256, (2, 3, 16, 16))
    a, (b, c, d) = legall3.step_forward(x)
    for got, want in zip((a, b, c, d), separable_2d(x, legall_1d)):
        assert np.max(np.abs(got - want)) <= 2


@pytest.mark.parametrize("scheme", [1, 2])
def test_random_roundtrip(rng, scheme):
    flow = make_flow(3, scheme=scheme, init="legall", seed=scheme)
    imgs = rng.integers(0, 256, (200, 3, 8, 8))
    pyr = flow.forward(imgs)
    assert pyr.batched
    assert np.array_equal(flow.inverse(pyr), imgs)


def _random_flow(seed, scheme, channels=1):
    rng = np.random.default_rng(seed)
    flow = build_flow(channels, scheme=scheme, repeat=2, hidden_channels=6, n_hidden=1, rng=rng)
    for p in flow.params():
        p.data[...] = (rng.standard_normal(p.shape) * 0.05).astype(np.float32)
    return flow


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1, 2]), st.sampled_from([4, 8, 16]),
       st.sampled_from([1, 3]))
def test_roundtrip_random_networks(seed, scheme, size, channels):
    flow = _random_flow(seed, scheme, channels)
    img = np.random.default_rng(seed).integers(0, 256, (channels, size, size))
    assert np.array_equal(flow.inverse(flow.forward(img)), img)


@pytest.mark.parametrize("scheme", [1, 2])
def test_exhaustive_2x2_step(scheme):
    # every 2x2 single-channel image over {0..7}: one coupling step is a bijection
    flow = _random_flow(7, scheme)
    imgs = np.array(list(itertools.product(range(8), repeat=4))).reshape(-1, 1, 2, 2)
    a, hp = flow.step_forward(imgs)
    assert np.array_equal(flow.step_inverse(a, hp), imgs)
    codes = np.concatenate([a.reshape(len(imgs), -1)] + [p.reshape(len(imgs), -1) for p in hp], 1)
    assert len({tuple(r) for r in codes.tolist()}) == len(imgs)


def test_parameter_sharing(rng, legall3):
    before = [p.data.copy() for p in legall3.params()]
    blob = serialize(legall3, _priors())
    for size in (32, 64):
        legall3.forward(rng.integers(0, 256, (3, size, size)))
    assert all(np.array_equal(a, p.data) for a, p in zip(before, legall3.params()))
    assert serialize(legall3, _priors()) == blob
    bigger = make_flow(3, repeat=4)
    assert len(bigger.params()) == 4 * 4 * 3 * 2


def _priors():
    from nwflow.prior import Priors
    return Priors(3)


def _jacobian(fn, x, h=1e-4):
    base = x.ravel()
    cols = []
    for i in range(base.size):
        xp, xm = base.copy(), base.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * h))
    return np.stack(cols, axis=1)


@pytest.mark.parametrize("scheme", [1, 2])
def test_volume_preservation(rng, scheme):
    flow = _random_flow(3, scheme)

    def step(x):
        a, hp = flow.step_forward_tensor(Tensor(x[None]), rounding="none")
        return np.concatenate([a.data.ravel()] + [p.data.ravel() for p in hp])

    jac = _jacobian(step, rng.uniform(0, 255, (1, 4, 4)))
    sign, logdet = np.linalg.slogdet(jac)
    assert sign > 0 and abs(logdet) < 1e-3


def test_tensor_path_matches_integer_path(rng, legall3):
    x = rng.integers(0, 256, (2, 3, 16, 16))
    highs, lows, final = legall3.forward_tensor(Tensor(x.astype(np.float32)), rounding="ste")
    pyr = legall3.forward(x)
    assert np.array_equal(final.data, pyr.final)
    for th, hp in zip(highs, pyr.highs):
        assert all(np.array_equal(t.data, p) for t, p in zip(th, hp))
    assert lows[-1] is final


def test_lowpass_matches_forward(rng, legall3):
    img = rng.integers(0, 256, (3, 32, 32))
    pyr = legall3.forward(img)
    x = img[None]
    for depth in range(pyr.levels + 1):
        assert np.array_equal(pyr.lowpass(depth, legall3), x[0])
        if depth < pyr.levels:
            x, _ = legall3.step_forward(x)
    with pytest.raises(ContractError):
        pyr.lowpass(pyr.levels + 1, legall3)


def test_overflow_raises(rng):
    flow = build_flow(1, scheme=2, repeat=1, hidden_channels=4, n_hidden=1)
    for net in flow.block.nets[0]:
        net.layers[-1].bias.data[...] = 200.0
    with pytest.raises(LiftingOverflow):
        flow.forward(np.full((1, 4, 4), 255))


def test_geometry_errors(legall3):
    with pytest.raises(ContractError):
        legall3.forward(np.zeros((1, 8, 8)))
    with pytest.raises(ContractError):
        legall3.forward(np.zeros((3, 12, 12)))
    with pytest.raises(ContractError):
        init_legall(build_flow(3, scheme=2, repeat=2, hidden_channels=8))


def test_wavelet_aliases(rng, legall1):
    img = rng.integers(0, 256, (1, 8, 8))
    pyr = lifting.wavelet_forward(img, legall1)
    assert np.array_equal(lifting.wavelet_inverse(pyr, legall1), img)
