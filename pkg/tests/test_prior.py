import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nwflow import numerics as nx
from nwflow.codec import bpd_theoretical
from nwflow.lifting import build_flow
from nwflow.numerics import Tensor
from nwflow.prior import (LogisticDist, Priors, UniformPrior, dl_log_pmf, dl_log_pmf_tensor,
                          dl_pmf, dl_sample, mixture_log_pmf, mixture_sample, pyramid_log_prob,
                          quantize_log_s, quantize_mu)


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_standard_logistic_mass_at_zero():
    # [DERIVED] sigmoid(0.5) - sigmoid(-0.5)
    want = _sigmoid(0.5) - _sigmoid(-0.5)
    assert abs(want - 0.24492) < 1e-5
    assert abs(math.exp(float(dl_log_pmf(0, 0.0, 0.0))) - want) < 1e-12


@pytest.mark.parametrize("mu,log_s", [(0.0, 0.0), (3.3, 1.5), (-20.0, -2.0), (100.0, 4.0)])
def test_pmf_against_direct_cdf(mu, log_s):
    s = math.exp(log_s)
    for z in range(int(mu) - 5, int(mu) + 6):
        want = _sigmoid((z + 0.5 - mu) / s) - _sigmoid((z - 0.5 - mu) / s)
        got = math.exp(float(dl_log_pmf(z, mu, log_s)))
        assert abs(got - want) < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(-40, 40), st.floats(-3, 4), st.integers(-60, -1), st.integers(1, 60))
def test_pmf_sums_to_one(mu, log_s, lo, hi):
    assert abs(dl_pmf(lo, hi, mu, log_s).sum() - 1.0) < 1e-9


def test_full_support_sums_to_one():
    assert abs(dl_pmf(-32768, 32767, 12.5, 3.0).sum() - 1.0) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 40), st.floats(-2, 4))
def test_symmetry(z, log_s):
    assert dl_log_pmf(z, 0.0, log_s, -50, 50) == pytest.approx(dl_log_pmf(-z, 0.0, log_s, -50, 50),
                                                               abs=1e-12)


def test_outside_support_rejected():
    with pytest.raises(ValueError):
        dl_log_pmf(300, 0.0, 0.0, 0, 255)


def test_tail_folding():
    # mass below lo lands on lo
    p_lo = math.exp(float(dl_log_pmf(0, -10.0, 1.0, 0, 255)))
    assert abs(p_lo - _sigmoid((0.5 + 10.0) / math.e)) < 1e-12


def test_mixture_single_component():
    z = np.arange(-10, 11)
    got = mixture_log_pmf(z, np.array([2.0]), np.array([0.5]), np.array([0.0]))
    assert np.allclose(got, dl_log_pmf(z, 2.0, 0.5))


def test_mixture_equal_components():
    z = np.arange(-10, 11)
    got = mixture_log_pmf(z, np.full(3, 1.5), np.full(3, 0.2), np.array([0.3, -1.0, 2.0]))
    assert np.allclose(got, dl_log_pmf(z, 1.5, 0.2))


def test_mixture_two_components_by_summation():
    # [DERIVED] brute-force weighted sum of the component pmfs
    mu, ls, logits = np.array([-3.0, 4.0]), np.array([0.0, 0.7]), np.array([0.2, -0.4])
    w = np.exp(logits) / np.exp(logits).sum()
    for z in (-6, -3, 0, 4, 9):
        direct = sum(w[k] * math.exp(float(dl_log_pmf(z, mu[k], ls[k]))) for k in range(2))
        assert abs(math.exp(float(mixture_log_pmf(z, mu, ls, logits))) - direct) < 1e-12


def test_sample_zero_scale_is_rounded_mean(rng):
    draws = dl_sample(np.full(1000, 3.4), np.full(1000, -30.0), rng)
    assert np.all(draws == 3)
    assert np.all(dl_sample(np.full(10, -1.6), np.full(10, -30.0), rng) == -2)


def test_sample_mean(rng):
    mu, log_s, n = 5.3, 1.0, 100_000
    draws = dl_sample(np.full(n, mu), np.full(n, log_s), rng)
    sigma = math.sqrt(math.exp(2 * log_s) * math.pi ** 2 / 3 + 1 / 12)
    assert abs(draws.mean() - mu) < 3 * sigma / math.sqrt(n)


def test_sample_histogram_chi_square(rng):
    mu, log_s, n = 0.4, 0.5, 100_000
    lo, hi = -15, 15
    draws = np.clip(dl_sample(np.full(n, mu), np.full(n, log_s), rng), lo, hi)
    counts = np.bincount(draws - lo, minlength=hi - lo + 1)
    expected = n * dl_pmf(lo, hi, mu, log_s)
    keep = expected > 5
    chi2 = float(np.sum((counts[keep] - expected[keep]) ** 2 / expected[keep]))
    dof = int(keep.sum()) - 1
    assert chi2 < dof + 5 * math.sqrt(2 * dof)


def test_mixture_sample_picks_components(rng):
    mu = np.broadcast_to(np.array([-100.0, 100.0]), (20000, 2))
    ls = np.full((20000, 2), -5.0)
    logits = np.broadcast_to(np.log([0.25, 0.75]), (20000, 2))
    draws = mixture_sample(mu, ls, logits, rng)
    assert set(np.unique(draws).tolist()) == {-100, 100}
    assert abs(np.mean(draws == 100) - 0.75) < 0.02


def test_quantization_idempotent(rng):
    x = rng.normal(0, 10, 1000)
    assert np.array_equal(quantize_mu(quantize_mu(x)), quantize_mu(x))
    assert np.array_equal(quantize_log_s(quantize_log_s(x)), quantize_log_s(x))
    assert quantize_log_s(np.array([-50.0, 50.0])).tolist() == [-7.0, 5.0]


def test_zero_prior_net_gives_constant_params(rng):
    net = nx.glow_net(3, 18, 8, 1)
    pri = Priors(3, net=net)
    pri.high_mu.data[...] = [[1.0, 2.0, 3.0], [0.5, 0, 0], [0, 0, -1.0]]
    low = rng.integers(0, 256, (2, 3, 4, 4))
    mu, ls = pri.high_params(low)
    assert mu.shape == ls.shape == (3, 2, 3, 4, 4)
    assert np.all(mu[0, :, 1] == 2.0) and np.all(mu[2, :, 2] == -1.0)
    assert np.all(ls == 2.0)


def test_conditional_net_shapes(rng):
    net = nx.glow_net(3, 18, 8, 1, rng=rng, zero_last=False)
    pri = Priors(3, net=net)
    mu, ls = pri.high_params(rng.integers(0, 256, (1, 3, 8, 8)))
    assert mu.shape == (3, 1, 3, 8, 8) and np.ptp(mu) > 0
    with pytest.raises(Exception):
        Priors(3, net=nx.glow_net(3, 9, 8, 1))


def test_mode_maximises_log_prob():
    dist = LogisticDist(np.array([[3.25, -7.5]]), np.array([[0.5, 1.0]]))
    mode = dist.mode()
    base = dist.log_prob(mode)
    for delta in (-2, -1, 1, 2):
        assert np.all(dist.log_prob(mode + delta) <= base)


def test_tensor_log_pmf_matches_numpy(rng):
    z = rng.integers(-30, 30, 200).astype(np.float64)
    mu = rng.normal(0, 5, 200)
    ls = rng.uniform(-2, 3, 200)
    got = dl_log_pmf_tensor(Tensor(z), Tensor(mu), Tensor(ls)).data
    assert np.allclose(got, dl_log_pmf(z.astype(int), mu, ls), atol=1e-9)


def _identity_flow(channels=3):
    return build_flow(channels, scheme=2, repeat=1, hidden_channels=4, n_hidden=1)


def test_uniform_prior_gives_eight_bits(rng):
    img = rng.integers(0, 256, (3, 16, 16)).astype(np.uint8)
    assert bpd_theoretical(img, _identity_flow(), UniformPrior(3)) == pytest.approx(8.0, abs=1e-12)


def test_log_prob_additive(rng, legall3, priors3):
    img = rng.integers(0, 256, (3, 8, 8))
    pyr = legall3.forward(img)
    total = pyramid_log_prob(pyr, priors3)
    parts = float(np.sum(priors3.final_dist(pyr.final[None]).log_prob(pyr.final[None])))
    for hp in pyr.highs:
        mu, ls = priors3.high_params(np.zeros((1, 3) + hp[0].shape[1:]))
        for q, p in enumerate(hp):
            for idx in np.ndindex(p.shape):
                parts += float(dl_log_pmf(p[idx], mu[q][(0,) + idx], ls[q][(0,) + idx]))
    assert total == pytest.approx(parts, rel=1e-12)


def test_bpd_is_negative_log_prob(rng, legall3, priors3):
    img = rng.integers(0, 256, (3, 16, 16)).astype(np.uint8)
    lp = pyramid_log_prob(legall3.forward(img), priors3, legall3)
    assert bpd_theoretical(img, legall3, priors3) == pytest.approx(-lp / math.log(2) / img.size)


def test_better_prior_lowers_bpd(rng, legall3):
    img = np.full((3, 16, 16), 100, np.uint8) + rng.integers(0, 3, (3, 16, 16)).astype(np.uint8)
    loose, tight = Priors(3, high_log_s=3.0), Priors(3, high_log_s=0.0)
    assert bpd_theoretical(img, legall3, tight) < bpd_theoretical(img, legall3, loose)


def test_conditional_log_prob_needs_flow(rng, legall3):
    pri = Priors(3, net=nx.glow_net(3, 18, 8, 1, rng=rng, zero_last=False))
    pyr = legall3.forward(rng.integers(0, 256, (3, 16, 16)))
    with pytest.raises(Exception):
        pyramid_log_prob(pyr, pri)
    assert np.isfinite(pyramid_log_prob(pyr, pri, legall3))


def test_tensor_and_numpy_log_prob_agree(rng, legall3):
    pri = Priors(3, net=nx.glow_net(3, 18, 8, 1, rng=rng, zero_last=False))
    img = rng.integers(0, 256, (3, 16, 16))
    lp_np = pyramid_log_prob(legall3.forward(img), pri, legall3)
    highs, lows, final = legall3.forward_tensor(Tensor(img[None].astype(np.float64)))
    lp_t = float(pri.log_prob_tensor(highs, lows, final).data[0])
    # the coder quantises mu and log_s; the training objective does not
    assert abs(lp_np - lp_t) / abs(lp_np) < 5e-3
