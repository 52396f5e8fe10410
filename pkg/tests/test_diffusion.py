import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdiff.diffusion import (
    DiffusionConfig,
    NoiseSchedule,
    SamplerConfig,
    ddim_eps,
    ddim_step,
    ddim_timesteps,
    ddpm_step,
    forward_noise,
    make_quadratic_schedule,
    posterior_mean,
    sample,
)
from mmdiff.errors import ConfigError, ContractError, NonFiniteError, ShapeError
from mmdiff.guidance import GuidanceWeights

SCHED = make_quadratic_schedule(200)


def toy_schedule(*alpha_bars):
    return NoiseSchedule.from_alpha_bars(alpha_bars)


class TestSchedule:
    def test_default_endpoints(self):
        assert SCHED.K == 200
        assert np.all(np.diff(SCHED.alpha_bars) < 0)
        assert SCHED.alpha_bar(200) < 0.01

    def test_betas_are_squared_ramp(self):
        root = np.sqrt(SCHED.betas)
        np.testing.assert_allclose(np.diff(root), np.diff(root)[0], atol=1e-15)
        assert SCHED.betas[0] == pytest.approx(1e-4)
        assert SCHED.betas[-1] == pytest.approx(0.1)

    def test_single_step(self):
        s = make_quadratic_schedule(1)
        assert s.alpha_bar(1) == pytest.approx(1 - 1e-4)

    def test_identities(self):
        ab = np.concatenate([[1.0], SCHED.alpha_bars])
        np.testing.assert_allclose(ab[1:] / ab[:-1], SCHED.alphas, atol=1e-12)
        snr = SCHED.alpha_bars / (1 - SCHED.alpha_bars)
        assert np.all(np.diff(snr) < 0)
        assert np.all(SCHED.sigma2 >= 0) and SCHED.sigma(1) == 0.0

    def test_posterior_variance_formula(self):
        k = 57
        expect = SCHED.betas[k - 1] * (1 - SCHED.alpha_bar(k - 1)) / (1 - SCHED.alpha_bar(k))
        assert SCHED.sigma2[k - 1] == pytest.approx(expect, rel=1e-14)

    @pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 1e-4, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            make_quadratic_schedule(*args)


class TestForwardNoise:
    def test_hand_example(self):
        out = forward_noise(np.array([1.0, 0.0]), 1, toy_schedule(0.25), np.array([0.0, 1.0]))
        np.testing.assert_allclose(out, [0.5, math.sqrt(0.75)], atol=1e-6)

    def test_clean_limit(self):
        y = np.arange(4.0)
        out = forward_noise(y, 1, toy_schedule(1.0 - 1e-15), np.ones(4))
        np.testing.assert_allclose(out, y, atol=1e-7)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(0)
        y = np.array([1.5, -0.5])
        k = 80
        ab = SCHED.alpha_bar(k)
        n = 10_000
        draws = forward_noise(np.tile(y, (n, 1)), k, SCHED, rng.standard_normal((n, 2)))
        se_mean = math.sqrt((1 - ab) / n)
        assert np.all(np.abs(draws.mean(0) - math.sqrt(ab) * y) < 3 * se_mean)
        se_var = (1 - ab) * math.sqrt(2 / (n - 1))
        assert np.all(np.abs(draws.var(0, ddof=1) - (1 - ab)) < 3 * se_var)

    def test_per_sample_steps(self):
        y = np.ones((3, 2))
        eps = np.zeros((3, 2))
        out = forward_noise(y, np.array([1, 100, 200]), SCHED, eps)
        np.testing.assert_allclose(out[:, 0], np.sqrt([SCHED.alpha_bar(k) for k in (1, 100, 200)]))

    def test_errors(self):
        with pytest.raises(ShapeError):
            forward_noise(np.ones(2), 1, SCHED, np.ones(3))
        with pytest.raises(ContractError):
            forward_noise(np.ones(2), 0, SCHED, np.ones(2))


class TestPosteriorMean:
    def test_first_step_returns_prediction(self):
        y_hat = np.array([0.3, -2.0])
        np.testing.assert_array_equal(posterior_mean(np.array([5.0, 5.0]), y_hat, 1, SCHED), y_hat)

    def test_flat_step_returns_state(self):
        s = toy_schedule(0.5, 0.5 * (1 - 1e-16))
        np.testing.assert_allclose(posterior_mean(np.array([2.0]), np.array([9.0]), 2, s), [2.0], atol=1e-12)

    def test_hand_example(self):
        s = toy_schedule(0.5, 0.25)
        out = posterior_mean(np.array([1.0]), np.array([2.0]), 2, s)
        assert out[0] == pytest.approx(1.414214, abs=1e-6)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            posterior_mean(np.ones(1), np.ones(1), 201, SCHED)


class TestDDPM:
    def test_last_step_is_deterministic(self):
        rng = np.random.default_rng(0)
        a = ddpm_step(np.ones(3), np.zeros(3), 1, SCHED, rng)
        np.testing.assert_array_equal(a, posterior_mean(np.ones(3), np.zeros(3), 1, SCHED))

    def test_seeded(self):
        f = lambda: ddpm_step(np.ones(4), np.zeros(4), 50, SCHED, np.random.default_rng(3))
        assert f().tobytes() == f().tobytes()

    def test_variance(self):
        n = 10_000
        out = ddpm_step(np.zeros(n), np.zeros(n), 120, SCHED, np.random.default_rng(1))
        assert out.var() == pytest.approx(SCHED.sigma2[119], rel=0.05)


class TestDDIM:
    def test_clean_endpoint(self):
        y_hat = np.array([0.25, 1.0])
        np.testing.assert_array_equal(ddim_step(np.array([3.0, 3.0]), y_hat, 10, 0, SCHED), y_hat)

    def test_hand_example(self):
        s = toy_schedule(0.81, 0.25)
        eps = 1 / math.sqrt(0.75)
        assert ddim_eps(np.array([1.0]), np.array([0.0]), 2, s)[0] == pytest.approx(1.154701, abs=1e-6)
        # sqrt(1 - 0.81) * eps, evaluated independently
        assert ddim_step(np.array([1.0]), np.array([0.0]), 2, 1, s)[0] == pytest.approx(math.sqrt(0.19) * eps, abs=1e-12)
        assert ddim_step(np.array([1.0]), np.array([0.0]), 2, 1, s)[0] == pytest.approx(0.503322, abs=1e-6)

    def test_eps_inversion_random(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(1000):
            k = int(rng.integers(1, 201))
            y = rng.standard_normal(6) * 3
            eps = rng.standard_normal(6)
            y_k = forward_noise(y, k, SCHED, eps)
            worst = max(worst, float(np.max(np.abs(ddim_eps(y_k, y, k, SCHED) - eps))))
        assert worst < 1e-10

    def test_guard_near_clean(self):
        s = toy_schedule(1.0)
        with pytest.raises(ContractError):
            ddim_eps(np.ones(2), np.ones(2), 1, s)
        np.testing.assert_array_equal(ddim_step(np.full(2, 7.0), np.ones(2), 1, 0, s), np.ones(2))

    def test_timesteps(self):
        ts = ddim_timesteps(200, 50)
        assert len(ts) == 50 and ts[-1] == 200 and np.all(np.diff(ts) > 0)
        assert ddim_timesteps(10, 10) == list(range(1, 11))
        with pytest.raises(ConfigError):
            ddim_timesteps(10, 11)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.data())
    def test_timesteps_property(self, K, data):
        n = data.draw(st.integers(1, K))
        ts = ddim_timesteps(K, n)
        assert len(ts) == n and ts[-1] == K and ts[0] >= 1 and all(b > a for a, b in zip(ts, ts[1:]))


def linear_denoiser(scale):
    """A fixed, condition-aware toy denoiser."""

    def f(y_k, k, drop_t, drop_d):
        return scale * y_k + 0.1 * k / 200 + (0.0 if drop_t else 0.3) + (0.0 if drop_d else -0.2)

    return f


class TestSample:
    def test_zero_guidance_equals_single_pass(self):
        calls = []
        base = linear_denoiser(0.5)

        def logged(y, k, dt, dd):
            calls.append((dt, dd))
            return base(y, k, dt, dd)

        sc = SamplerConfig("ddim", 20, 0)
        a = sample(logged, (3, 4, 1), SCHED, sc, GuidanceWeights(0.0, 0.0))
        b = sample(base, (3, 4, 1), SCHED, sc, GuidanceWeights(0.0, 0.0))
        assert a.tobytes() == b.tobytes()
        assert set(calls) == {(False, False)} and len(calls) == 20

    @pytest.mark.parametrize("w,passes", [((0.5, 0.8), 3), ((0.5, 0.0), 2), ((0.0, 0.8), 2), ((0.0, 0.0), 1)])
    def test_pass_count(self, w, passes):
        calls = []

        def logged(y, k, dt, dd):
            calls.append(k)
            return linear_denoiser(0.5)(y, k, dt, dd)

        sample(logged, (2, 3), SCHED, SamplerConfig("ddim", 10), GuidanceWeights(*w))
        assert len(calls) == 10 * passes == 10 * GuidanceWeights(*w).passes_per_step()

    def test_full_subsequence_matches_manual_loop(self):
        s = make_quadratic_schedule(30)
        f = linear_denoiser(0.3)
        rng = np.random.default_rng(4)
        y = rng.standard_normal((2, 3))
        for k in range(30, 0, -1):
            y = ddim_step(y, f(y, k, False, False), k, k - 1, s)
        out = sample(f, (2, 3), s, SamplerConfig("ddim", 30), GuidanceWeights(0, 0), np.random.default_rng(4))
        np.testing.assert_array_equal(out, y)

    def test_deterministic_and_per_row_streams(self):
        f = linear_denoiser(0.7)
        sc = SamplerConfig("ddim", 10)
        gens = lambda ids: [np.random.default_rng([0, i]) for i in ids]
        both = sample(f, (2, 3), SCHED, sc, GuidanceWeights(), gens([0, 1]))
        again = sample(f, (2, 3), SCHED, sc, GuidanceWeights(), gens([0, 1]))
        alone = sample(f, (1, 3), SCHED, sc, GuidanceWeights(), gens([1]))
        assert both.tobytes() == again.tobytes()
        np.testing.assert_array_equal(both[1], alone[0])

    def test_ddpm_runs_every_step(self):
        calls = []

        def logged(y, k, dt, dd):
            calls.append(k)
            return 0 * y

        out = sample(logged, (2,), make_quadratic_schedule(15), SamplerConfig("ddpm"), GuidanceWeights(0, 0))
        assert calls == list(range(15, 0, -1))
        np.testing.assert_array_equal(out, 0 * out)

    def test_non_finite_state_aborts(self):
        bad = lambda y, k, dt, dd: np.full_like(y, 1e308) * 10 if k < 100 else y
        with pytest.raises(NonFiniteError):
            with np.errstate(over="ignore", invalid="ignore"):
                sample(bad, (2,), SCHED, SamplerConfig("ddim", 10), GuidanceWeights(0, 0))


def test_diffusion_config_validates():
    assert DiffusionConfig().schedule().K == 200
    with pytest.raises(ConfigError):
        DiffusionConfig(K=10, inference_steps=50)
