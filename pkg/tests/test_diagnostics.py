import numpy as np
import pytest

from penmig.diagnostics import autocorrelation, effective_sample_size, split_rhat


def ar1(rng, phi, shape):
    x = np.empty(shape)
    x[..., 0] = rng.standard_normal(shape[:-1]) / np.sqrt(1 - phi**2)
    for t in range(1, shape[-1]):
        x[..., t] = phi * x[..., t - 1] + rng.standard_normal(shape[:-1])
    return x


class TestAutocorrelation:
    def test_lag_zero(self, rng):
        rho = autocorrelation(rng.standard_normal(500))
        assert rho[0] == pytest.approx(1.0)
        assert np.all(np.abs(rho[1:20]) < 0.15)

    def test_ar1(self, rng):
        rho = autocorrelation(ar1(rng, 0.8, (1, 20000))[0])
        np.testing.assert_allclose(rho[1:4], 0.8 ** np.arange(1, 4), atol=0.03)

    def test_constant(self):
        rho = autocorrelation(np.ones(10))
        np.testing.assert_array_equal(rho, np.r_[1.0, np.zeros(9)])


class TestEffectiveSampleSize:
    def test_iid(self, rng):
        ess = effective_sample_size(rng.standard_normal((4, 2000)))
        assert 6500 < ess < 9500

    def test_ar1_matches_theory(self, rng):
        phi = 0.9
        x = ar1(rng, phi, (4, 20000))
        expected = x.size * (1 - phi) / (1 + phi)
        assert effective_sample_size(x) == pytest.approx(expected, rel=0.15)

    def test_too_short(self):
        assert np.isnan(effective_sample_size(np.ones((2, 3))))


class TestSplitRhat:
    def test_mixed(self, rng):
        assert split_rhat(rng.standard_normal((4, 1000))) == pytest.approx(1.0, abs=0.01)

    def test_shifted_chains(self, rng):
        x = rng.standard_normal((4, 500)) + np.arange(4)[:, None]
        assert split_rhat(x) > 1.5

    def test_trend_detected_within_chain(self, rng):
        x = rng.standard_normal((1, 1000)) + np.linspace(0, 5, 1000)
        assert split_rhat(x) > 1.2

    def test_constant(self):
        assert split_rhat(np.ones((2, 10))) == 1.0
        assert split_rhat(np.vstack([np.ones(10), np.zeros(10)])) == np.inf
