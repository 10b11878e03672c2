import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cpcl import sampler as sm
from cpcl.sampler import NoiseSpec, UniformSource


def src(stream=0, seed=11):
    return UniformSource(seed, stream)


def test_uniform_source_is_open_and_replayable():
    a = src().uniform(100_000)
    assert a.min() > 0 and a.max() < 1
    np.testing.assert_array_equal(a, src().uniform(100_000))
    assert not np.array_equal(a, src(stream=1).uniform(100_000))
    assert src().bits(64, 4).dtype == np.uint64
    with pytest.raises(ValueError):
        src().bits(0)


def test_noise_spec_validation():
    NoiseSpec("PNoise", "Gaussian", {"variance": 1.0})
    with pytest.raises(ValueError, match="noise_type"):
        NoiseSpec("XNoise", "Gaussian", {"variance": 1.0})
    with pytest.raises(ValueError, match="unknown mechanism"):
        NoiseSpec("PNoise", "Cauchy", {"scale": 1.0})
    with pytest.raises(ValueError, match="needs parameters"):
        NoiseSpec("PNoise", "Gaussian", {"scale": 1.0})
    with pytest.raises(ValueError, match="must be > 0"):
        NoiseSpec("CNoise", "Laplace", {"scale": 0.0})
    with pytest.raises(ValueError):
        NoiseSpec("CNoise", "DiscGaussian", {"variance": 4.0}, loop_budget=0)


def test_laplace_its_examples():
    assert sm.laplace_its(1.0, 0.5) == 0.0
    assert sm.laplace_its(1.0, 0.25) == pytest.approx(math.log(0.5), abs=1e-12)
    # inverse-CDF oracle: F(x) = 1 - 0.5 exp(-x / lam) for x >= 0
    x = sm.laplace_its(2.0, 0.9)
    assert 1 - 0.5 * math.exp(-x / 2.0) == pytest.approx(0.9)
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            sm.laplace_its(1.0, bad)


def test_laplace_moments():
    draws = sm.laplace_its(2.0, src().uniform(400_000))
    assert abs(draws.var() / 8.0 - 1) < 0.02


def test_gamma_examples():
    g = sm.gamma_sample(0.1, 1.0, src(), 400_000)
    assert abs(g.mean() - 0.1) < 0.002
    e = sm.gamma_sample(1.0, 1.0, src(1), 200_000)
    assert stats.kstest(e, "expon").statistic < 0.004
    assert np.all(sm.gamma_sample(0.3, 0.0, src(), 100) == 0)
    with pytest.raises(ValueError):
        sm.gamma_sample(1.5, 1.0, src())


def test_gamma_matches_scipy_shape_below_one():
    g = sm.gamma_sample(0.35, 2.0, src(2), 100_000)
    assert stats.kstest(g, stats.gamma(0.35, scale=2.0).cdf).pvalue > 0.01


def test_dist_laplace_sums_to_laplace():
    single = sm.dist_laplace_partial(1, 1.0, src(), 200_000)
    assert abs(single.var() / 2.0 - 1) < 0.02
    parts = sm.dist_laplace_partial(20, 1.0, src(3), (20, 400_000))
    total = parts.sum(axis=0)
    assert abs(total.mean()) < 4 * math.sqrt(2.0 / 400_000)
    # the sample excess kurtosis of a Laplace has standard error ~sqrt(2520 / n)
    assert abs(stats.kurtosis(total) - 3.0) < 4 * math.sqrt(2520 / 400_000)
    assert stats.kstest(total, stats.laplace(scale=1.0).cdf).pvalue > 0.01


def test_box_muller_examples():
    z1, z2 = sm.box_muller(math.exp(-2), 0.25, 1.0)
    assert z1 == pytest.approx(0.0, abs=1e-12)
    assert z2 == pytest.approx(2.0)
    assert sm.box_muller(0.3, 0.7, 0.0) == (0.0, 0.0)
    z = sm.gaussian(1.18, src(), 400_000)
    assert abs(z.var() / 1.3924 - 1) < 0.01


def test_binomial_examples():
    with pytest.raises(ValueError):
        sm.binomial_noise(0, src())
    b = sm.binomial_noise(98, src(), 0.5, 300_000)
    assert abs(b.var() / 24.5 - 1) < 0.02
    assert abs(b.mean()) < 4 * math.sqrt(24.5 / 300_000)


def test_binomial_sum_closure():
    parts = sm.binomial_noise(40, src(1), 0.5, (3, 50_000)).sum(axis=0)
    single = sm.binomial_noise(120, src(2), 0.5, 50_000)
    assert stats.ks_2samp(parts, single).pvalue > 0.01


def test_geometric_examples():
    assert sm.geometric(0.5, 0.3) == 0
    assert sm.geometric(0.5, 1e-12) == 0
    g = sm.geometric(0.25, src().uniform(400_000))
    assert abs(g.mean() - 3.0) < 0.02


def test_bernoulli_exp_examples():
    u = src().uniform(400_000)
    assert sm.bernoulli_exp(0.0, 1.0, u).all()
    assert abs(sm.bernoulli_exp(1.0, 1.0, u).mean() - math.exp(-1)) < 0.002
    assert not sm.bernoulli_exp(1e6, 1.0, u).any()


def test_disc_laplace_examples():
    d = sm.disc_laplace(5.0, src(), 300_000)
    se = math.sqrt(d.var() / d.size)
    assert abs(d.mean()) < 3 * se
    d1 = sm.disc_laplace(1.0, src(1), 400_000)
    ratio = np.mean(d1 == 0) / np.mean(d1 == 1)
    assert ratio == pytest.approx(math.e, rel=0.03)


def test_disc_gaussian_pmf_zero():
    d = sm.disc_gaussian(1.0, src(), 400_000)
    y = np.arange(-40, 41)
    pmf0 = 1.0 / np.exp(-y ** 2 / 2.0).sum()
    assert abs(np.mean(d == 0) - pmf0) < 0.003
    assert pmf0 == pytest.approx(0.39894, abs=1e-5)


def test_disc_gaussian_large_variance():
    d = sm.disc_gaussian(29698.0, src(), 200_000)
    assert abs(d.var() / 29698.0 - 1) < 0.01


def test_disc_gaussian_budget_returns_failure_mask():
    out, failed = sm.disc_gaussian(29698.0, src(), 1000, loop_budget=1)
    assert failed.dtype == bool and failed.any()
    assert np.all(out[failed] == 0)
    p = sm.failure_probability(NoiseSpec("PNoise", "DiscGaussian", {"variance": 29698.0}, 1))
    assert abs(failed.mean() - p) < 4 * math.sqrt(p * (1 - p) / 1000)


def test_budgeted_matches_unbounded_conditional_on_success():
    a, failed = sm.disc_gaussian(9.0, src(1), 100_000, loop_budget=4)
    b = sm.disc_gaussian(9.0, src(2), 100_000)
    assert stats.ks_2samp(a[~failed], b).pvalue > 0.01


def test_poisson_examples():
    p = sm.poisson(5.0, src(), 100_000)
    assert abs(p.mean() - 5.0) < 0.07
    k = sm.poisson(5.0, src(1), 100_000, method="knuth")
    assert abs(k.mean() - 5.0) < 0.07
    assert np.all(sm.poisson(0.0, src(), 100) == 0)
    assert np.all(sm.poisson(0.0, src(), 100, loop_budget=3)[0] == 0)
    with pytest.raises(ValueError, match="underflow"):
        sm.poisson(501.0, src())
    with pytest.raises(ValueError):
        sm.poisson(2.0, src(), loop_budget=5, method="inversion")


def test_poisson_failure_probability_oracle():
    # P(X >= 30) for X ~ Poisson(10), summed directly
    direct = 1 - sum(math.exp(-10) * 10 ** k / math.factorial(k) for k in range(30))
    assert sm.poisson_failure_probability(10.0, 30) == pytest.approx(direct, rel=1e-6)
    assert sm.poisson_failure_probability(10.0, 30) < 1e-6
    # one fewer loop body lets an extra value through
    assert sm.poisson_failure_probability(10.0, 29) * 1e6 == pytest.approx(0.7645, abs=1e-3)


def test_poisson_knuth_budget_failures():
    _, failed = sm.poisson(10.0, src(), 200_000, loop_budget=15)
    expected = sm.poisson_failure_probability(10.0, 15)
    assert abs(failed.mean() - expected) < 4 * math.sqrt(expected / 200_000)


def test_skellam_examples():
    s = sm.skellam(30840.0, src(), 20_000, chunks=1542)
    assert abs(s.var() / 30840.0 - 1) < 0.03
    s2 = sm.skellam(30840.0, src(1), 100_000)
    assert abs(s2.var() / 30840.0 - 1) < 0.02


def test_skellam_closure():
    a = sm.skellam(6.0, src(1), 100_000) + sm.skellam(10.0, src(2), 100_000)
    b = sm.skellam(16.0, src(3), 100_000)
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_poisson_binomial_examples():
    g0 = sm.poisson_binomial_encode(0.0, 0.25, 1.0, 14, src(), 100_000)
    assert abs(g0.mean() - 7.0) < 3 * math.sqrt(14 * 0.25 / 100_000)
    g = sm.poisson_binomial_encode(0.5, 0.25, 1.0, 14, src(1), 100_000)
    assert abs(g.mean() - 8.75) < 0.05
    with pytest.raises(ValueError):
        sm.poisson_binomial_encode(2.0, 0.25, 1.0, 14, src())
    with pytest.raises(ValueError):
        sm.poisson_binomial_encode(1.0, 0.3, 1.0, 14, src())


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["Laplace", "Gaussian", "DiscLaplace", "DiscGaussian", "Skellam", "Binomial"]),
       st.integers(0, 2 ** 32))
def test_sample_is_deterministic(mech, seed):
    params = {"Laplace": {"scale": 1.5}, "Gaussian": {"variance": 2.0}, "DiscLaplace": {"scale": 2.0},
              "DiscGaussian": {"variance": 4.0}, "Skellam": {"variance": 6.0},
              "Binomial": {"trials": 20, "p": 0.5}}[mech]
    spec = NoiseSpec("CNoise", mech, params)
    a = sm.sample(spec, UniformSource(seed, 4), size=50)
    b = sm.sample(spec, UniformSource(seed, 4), size=50)
    np.testing.assert_array_equal(a, b)


def test_sample_raises_on_budget_failure():
    spec = NoiseSpec("PNoise", "DiscGaussian", {"variance": 29698.0}, loop_budget=1)
    with pytest.raises(sm.SamplingFailure):
        sm.sample(spec, src(), size=1000)
    assert sm.failure_probability(NoiseSpec("PNoise", "Gaussian", {"variance": 1.0})) == 0.0
