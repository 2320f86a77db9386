from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segdiff.diffusion import (
    NoiseSchedule, SamplerConfig, ddim_step, ddim_timesteps, ddpm_step, desk_schedule, forward_sample,
    linear_schedule, sample, sample_rngs,
)
from segdiff.optim import ConfigError


def exact_alpha_bar(betas):
    """Rational product of (1 - beta) over the float betas, rounded once at the end."""
    prod = Fraction(1)
    for b in betas:
        prod *= 1 - Fraction(float(b))
    return float(prod)


def zero_model(x, mask_channel, t):
    return np.zeros_like(x)


class TestSchedule:
    def test_reference_endpoints(self):
        s = linear_schedule(1000, 1e-4, 0.02)
        assert s.betas[1] == 1e-4 and s.betas[1000] == pytest.approx(0.02, rel=1e-15)

    def test_first_alpha_bar(self):
        for s in (linear_schedule(1000, 1e-4, 0.02), desk_schedule(), linear_schedule(7, 0.1, 0.3)):
            assert s.alpha_bars[1] == 1 - s.betas[1]

    def test_reference_final_alpha_bar_matches_exact_product(self):
        s = linear_schedule(1000, 1e-4, 0.02)
        oracle = exact_alpha_bar(s.betas[1:])
        assert 1e-5 < oracle < 1e-4
        assert s.alpha_bars[1000] == pytest.approx(oracle, rel=1e-12)

    def test_desk_schedule_tracks_reference_noise_level(self):
        ref = exact_alpha_bar(linear_schedule(1000, 1e-4, 0.02).betas[1:])
        desk = exact_alpha_bar(desk_schedule(200).betas[1:])
        assert 0.5 < desk / ref < 2.0

    def test_data_endpoint(self):
        s = desk_schedule()
        assert s.alpha_bars[0] == 1.0 and s.betas[0] == 0.0

    def test_tables_read_only(self):
        with pytest.raises(ValueError):
            desk_schedule().alpha_bars[3] = 0.0

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            linear_schedule(*args)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 400), st.floats(1e-5, 0.01), st.floats(0.0, 0.3))
    def test_alpha_bar_monotone(self, T, b0, extra):
        s = linear_schedule(T, b0, min(b0 + extra, 0.5))
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all(s.alpha_bars > 0)


class TestForwardProcess:
    def test_zero_signal(self, rng):
        s = desk_schedule()
        eps = rng.standard_normal((4, 4))
        np.testing.assert_allclose(forward_sample(np.zeros((4, 4)), 50, eps, s), np.sqrt(1 - s.alpha_bars[50]) * eps)

    def test_zero_noise(self, rng):
        s = desk_schedule()
        x0 = rng.standard_normal((4, 4))
        np.testing.assert_allclose(forward_sample(x0, 50, np.zeros((4, 4)), s), np.sqrt(s.alpha_bars[50]) * x0)

    def test_scalar_first_step(self):
        s = linear_schedule(1000, 1e-4, 0.02)
        got = forward_sample(np.array(1.0), 1, np.array(1.0), s)
        assert float(got) == pytest.approx(np.sqrt(0.9999) + np.sqrt(0.0001), abs=1e-12)
        assert float(got) == pytest.approx(1.00995, abs=1e-5)

    def test_per_item_timesteps(self, rng):
        s = desk_schedule()
        x0 = rng.standard_normal((3, 1, 2, 2))
        eps = rng.standard_normal(x0.shape)
        t = np.array([1, 100, 200])
        got = forward_sample(x0, t, eps, s)
        for i in range(3):
            np.testing.assert_allclose(got[i], forward_sample(x0[i], t[i], eps[i], s))

    def test_timestep_range(self):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 0, np.zeros(2), desk_schedule())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 1, np.zeros(3), desk_schedule())


class TestDDPMStep:
    def test_degenerate_prediction(self, rng):
        s = desk_schedule()
        x = rng.standard_normal(5)
        np.testing.assert_allclose(ddpm_step(x, 30, np.zeros(5), np.zeros(5), s), x / np.sqrt(s.alphas[30]))

    def test_final_step_ignores_noise(self, rng):
        s = desk_schedule()
        x, e = rng.standard_normal(5), rng.standard_normal(5)
        a = ddpm_step(x, 1, e, rng.standard_normal(5), s)
        b = ddpm_step(x, 1, e, None, s)
        np.testing.assert_array_equal(a, b)

    def test_scalar_hand_trace(self):
        beta, abar = 0.01, 0.5
        s = NoiseSchedule(2, beta, beta, np.array([0.0, 0.3, beta]), np.array([1.0, 0.7, 1 - beta]),
                          np.array([1.0, 0.7, abar]))
        got = float(ddpm_step(np.array(1.0), 2, np.array(0.5), np.array(0.0), s))
        expected = (1.0 - beta / np.sqrt(1 - abar) * 0.5) / np.sqrt(1 - beta)
        assert got == pytest.approx(expected, abs=1e-15)
        assert got == pytest.approx(0.997931, abs=1e-6)


class TestDDIMStep:
    def test_endpoint_returns_x0_estimate(self, rng):
        s = desk_schedule()
        x, e = rng.standard_normal(6), rng.standard_normal(6)
        x0_hat = (x - np.sqrt(1 - s.alpha_bars[40]) * e) / np.sqrt(s.alpha_bars[40])
        np.testing.assert_array_equal(ddim_step(x, 40, 0, e, s), x0_hat)

    def test_zero_prediction(self, rng):
        s = desk_schedule()
        x = rng.standard_normal(6)
        np.testing.assert_allclose(ddim_step(x, 120, 60, np.zeros(6), s),
                                   np.sqrt(s.alpha_bars[60] / s.alpha_bars[120]) * x, rtol=1e-13)

    def test_order(self):
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), 5, 5, np.zeros(2), desk_schedule())

    @pytest.mark.parametrize("T,n", [(200, 10), (200, 1), (200, 200), (1000, 50), (7, 3)])
    def test_timesteps(self, T, n):
        ts = ddim_timesteps(T, n)
        assert len(ts) == n and ts[0] == T and np.all(np.diff(ts) < 0) and ts[-1] >= 1
        if n > 1:
            assert ts[-1] == 1

    def test_too_many_steps(self):
        with pytest.raises(ConfigError):
            ddim_timesteps(10, 11)


class TestSampler:
    def test_telescoping(self):
        s = desk_schedule()
        masks = np.zeros((3, 1, 4, 4), dtype=np.float32)
        out = sample(zero_model, masks, s, SamplerConfig("ddim", 10, seed=5), dtype=np.float64)
        x_T = np.stack([r.standard_normal((1, 4, 4)) for r in sample_rngs(5, range(3))])
        np.testing.assert_allclose(out, x_T / np.sqrt(s.alpha_bars[s.T]), rtol=1e-5)

    @pytest.mark.parametrize("steps", [1, 10, 50, 200])
    def test_exact_denoiser_recovers_point_mass(self, steps):
        # for data concentrated at one value the true noise is recoverable from x_t
        s = desk_schedule()
        target = 0.3

        def exact_model(x, mask_channel, t):
            ab = s.alpha_bars[np.asarray(t)][:, None, None, None]
            return (x - np.sqrt(ab) * target) / np.sqrt(1 - ab)

        out = sample(exact_model, np.zeros((3, 1, 4, 4)), s, SamplerConfig("ddim", steps, seed=2), dtype=np.float64)
        np.testing.assert_allclose(out, target, atol=1e-9)

    def test_probe_sees_mask_every_step(self, rng):
        s = desk_schedule()
        mask = rng.random((2, 1, 4, 4)).astype(np.float32)
        calls = []

        def probe(x, m, t):
            calls.append((m.copy(), t.copy()))
            return np.zeros_like(x)

        sample(probe, mask, s, SamplerConfig("ddim", 7))
        assert len(calls) == 7
        for m, t in calls:
            np.testing.assert_array_equal(m, mask)
        assert [int(t[0]) for _, t in calls] == list(ddim_timesteps(s.T, 7))

    def test_ddpm_runs_full_chain(self):
        s = linear_schedule(20, 1e-3, 0.2)
        count = []
        sample(lambda x, m, t: count.append(1) or np.zeros_like(x), np.zeros((1, 1, 2, 2)), s, SamplerConfig("ddpm"))
        assert len(count) == 20

    def test_ddpm_rejects_step_override(self):
        with pytest.raises(ConfigError):
            SamplerConfig("ddpm", 10).steps_for(200)

    def test_default_ddim_steps(self):
        assert SamplerConfig().steps_for(200) == 10

    def test_ddim_bit_reproducible(self, rng):
        s = desk_schedule()
        w = rng.standard_normal((1, 1, 4, 4))

        def model(x, m, t):
            return np.tanh(x * w + m + t[:, None, None, None] / 200.0)

        masks = rng.random((3, 1, 4, 4))
        a = sample(model, masks, s, SamplerConfig("ddim", 10, seed=9))
        b = sample(model, masks, s, SamplerConfig("ddim", 10, seed=9))
        assert a.tobytes() == b.tobytes()

    def test_batching_does_not_change_samples(self, rng):
        s = desk_schedule()
        masks = rng.random((4, 1, 3, 3))

        def model(x, m, t):
            return 0.1 * x + m

        whole = sample(model, masks, s, SamplerConfig("ddpm", seed=2), sample_rngs(2, range(4)))
        parts = [sample(model, masks[i:i + 1], s, SamplerConfig("ddpm", seed=2), sample_rngs(2, [i])) for i in range(4)]
        np.testing.assert_array_equal(whole, np.concatenate(parts))


class TestForwardMoments:
    @pytest.mark.parametrize("t", [1, 100, 200])
    def test_mean_and_variance(self, t):
        s = desk_schedule()
        rng = np.random.default_rng(t)
        x0 = np.linspace(-1, 1, 16).reshape(4, 4)
        draws = forward_sample(np.broadcast_to(x0, (10_000, 4, 4)), t, rng.standard_normal((10_000, 4, 4)), s)
        var = 1 - s.alpha_bars[t]
        stderr = np.sqrt(var / 10_000)
        assert np.all(np.abs(draws.mean(axis=0) - np.sqrt(s.alpha_bars[t]) * x0) < 4 * stderr)
        assert np.all(np.abs(draws.var(axis=0, ddof=1) / var - 1) < 0.05)
