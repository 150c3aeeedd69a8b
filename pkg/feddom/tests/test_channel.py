import numpy as np
import pytest

from feddom import tensor as T
from feddom.channel import (ChannelConfig, draw_fading, mean_symbol_power, power_normalize, sample_snr,
                            snr_to_noise_variance, transmit)
from feddom.tensor import ComputationTape, Tensor
from feddom.utils import ConfigurationError, DegenerateInputError


class TestPowerNormalize:
    def test_unit_symbol_power(self):
        latent = Tensor(np.random.default_rng(0).normal(size=(4, 256)))
        out = power_normalize(latent)
        for row in out.data:
            assert mean_symbol_power(row) == pytest.approx(1.0, abs=1e-6)

    def test_custom_power(self):
        out = power_normalize(Tensor(np.arange(1.0, 9.0)), power=2.0)
        assert mean_symbol_power(out.data) == pytest.approx(2.0, abs=1e-5)

    def test_zero_latent(self):
        with pytest.raises(DegenerateInputError):
            power_normalize(Tensor(np.zeros(8)))

    def test_odd_length(self):
        with pytest.raises(ConfigurationError):
            power_normalize(Tensor(np.ones(7)))


class TestTransmit:
    @pytest.mark.parametrize("snr_db", [0.0, 7.0, 10.0])
    def test_noise_variance_matches_snr(self, snr_db):
        k = 100000
        latent = power_normalize(Tensor(np.random.default_rng(1).normal(size=2 * k), dtype=np.float64))
        out = transmit(latent, ChannelConfig(kind="awgn"), snr_db, np.random.default_rng(2))
        noise = out.data - latent.data
        measured = np.sum(noise * noise) / k
        assert measured == pytest.approx(snr_to_noise_variance(snr_db), rel=0.02)

    def test_same_rng_same_output(self):
        latent = power_normalize(Tensor(np.ones((2, 16))))
        cfg = ChannelConfig(kind="rayleigh")
        a = transmit(latent, cfg, 5.0, np.random.default_rng(3)).data
        b = transmit(latent, cfg, 5.0, np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)

    def test_rayleigh_equalized_at_high_snr_recovers_input(self):
        latent = power_normalize(Tensor(np.random.default_rng(4).normal(size=(3, 32)), dtype=np.float64))
        out = transmit(latent, ChannelConfig(kind="rayleigh"), 120.0, np.random.default_rng(5))
        np.testing.assert_allclose(out.data, latent.data, atol=1e-2)

    def test_gradient_passes_straight_through(self):
        x = Tensor(np.ones(8), requires_grad=True)
        with ComputationTape() as tape:
            loss = T.sum(transmit(x, ChannelConfig(), 5.0, np.random.default_rng(0)))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones(8))


class TestChannelHelpers:
    def test_noise_variance(self):
        assert snr_to_noise_variance(0.0) == pytest.approx(1.0)
        assert snr_to_noise_variance(7.0) == pytest.approx(0.19953, abs=1e-5)
        assert snr_to_noise_variance(10.0) == pytest.approx(0.1)
        assert snr_to_noise_variance(10.0, power=2.0) == pytest.approx(0.2)

    def test_fading_is_unit_power_on_average(self):
        h = draw_fading(np.random.default_rng(0), 20000)
        assert np.mean(np.abs(h) ** 2) == pytest.approx(1.0, rel=0.05)
        assert np.all(np.abs(h) >= 1e-6)

    def test_sample_snr_draws_from_set(self):
        cfg = ChannelConfig(snr_set_db=[1.0, 9.0])
        rng = np.random.default_rng(0)
        draws = {sample_snr(cfg, rng) for _ in range(50)}
        assert draws == {1.0, 9.0}

    def test_sample_snr_is_uniform_over_default_set(self):
        cfg = ChannelConfig()
        rng = np.random.default_rng(0)
        draws = np.array([sample_snr(cfg, rng) for _ in range(100000)])
        assert np.mean(draws == 1.0) == pytest.approx(0.2, abs=0.01)
        assert set(np.unique(draws)) == {1.0, 3.0, 5.0, 7.0, 9.0}

    @pytest.mark.parametrize("kwargs", [{"kind": "rician"}, {"snr_set_db": []}, {"transmit_power": 0.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            ChannelConfig(**kwargs)
