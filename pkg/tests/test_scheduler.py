"""Noise-schedule arithmetic against independent direct-formula oracles."""

import math

import numpy as np
import pytest
import torch

from diffbench.errors import ConfigurationError, DomainError
from diffbench.scheduler import (NoiseSchedule, add_noise, build_schedule,
                                 denoise_step, reconstruct_x0)


def oracle_linear_betas(t_count, beta_start, beta_end):
    if t_count == 1:
        return [beta_start]
    return [beta_start + i * (beta_end - beta_start) / (t_count - 1) for i in range(t_count)]


def oracle_cosine_betas(t_count):
    def f(u):
        return math.cos((u + 0.008) / 1.008 * math.pi / 2) ** 2

    return [min(1.0 - f((i + 1) / t_count) / f(i / t_count), 0.999) for i in range(t_count)]


class TestBuildSchedule:
    def test_linear_matches_oracle(self):
        s = build_schedule("linear", 100, 1e-4, 0.02)
        expected = oracle_linear_betas(100, 1e-4, 0.02)
        assert np.allclose(s.betas.numpy(), expected, atol=1e-10, rtol=0)
        assert float(s.betas[0]) == 1e-4
        assert float(s.betas[-1]) == 0.02

    def test_cosine_matches_oracle(self):
        s = build_schedule("squaredcos_cap_v2", 100)
        expected = oracle_cosine_betas(100)
        assert np.allclose(s.betas.numpy(), expected, atol=1e-10, rtol=0)
        assert float(s.betas[0]) == pytest.approx(6.31e-4, rel=1e-2)

    def test_single_step_linear_is_beta_start(self):
        s = build_schedule("linear", 1, 1e-4, 0.02)
        assert s.betas.tolist() == [1e-4]

    def test_alpha_bars_strictly_decreasing_and_consistent(self):
        for kind in ("linear", "squaredcos_cap_v2"):
            s = build_schedule(kind, 100)
            ab = s.alpha_bars.numpy()
            assert (np.diff(ab) < 0).all()
            prod = np.cumprod(1.0 - s.betas.numpy())
            assert np.abs(ab - prod).max() < 1e-12
            betas = s.betas.numpy()
            assert (betas > 0).all() and (betas <= 0.999).all()

    def test_cosine_ignores_beta_bounds_with_warning(self):
        with pytest.warns(UserWarning):
            s = build_schedule("squaredcos_cap_v2", 10, 1e-3, 0.05)
        assert np.allclose(s.betas.numpy(), oracle_cosine_betas(10))

    def test_invalid_kind_and_steps(self):
        with pytest.raises(ConfigurationError):
            build_schedule("quadratic", 10)
        with pytest.raises(DomainError):
            build_schedule("linear", 0)
        with pytest.raises(DomainError):
            build_schedule("linear", 10, 0.5, 0.1)


class TestForwardNoising:
    def setup_method(self):
        self.sched = build_schedule("squaredcos_cap_v2", 100)

    def test_zero_noise(self):
        x0 = torch.randn(16, 2, dtype=torch.float64)
        out = add_noise(x0, torch.zeros_like(x0), 30, self.sched)
        abar = float(self.sched.alpha_bars[30])
        assert torch.allclose(out, math.sqrt(abar) * x0)

    def test_zero_signal(self):
        eps = torch.randn(16, 2, dtype=torch.float64)
        out = add_noise(torch.zeros_like(eps), eps, 30, self.sched)
        abar = float(self.sched.alpha_bars[30])
        assert torch.allclose(out, math.sqrt(1 - abar) * eps)

    def test_scalar_example(self):
        # abar = 0.25 -> 0.5*1 + sqrt(0.75)*1
        sched = NoiseSchedule(
            kind="linear", num_timesteps=1,
            betas=torch.tensor([0.75], dtype=torch.float64),
            alphas=torch.tensor([0.25], dtype=torch.float64),
            alpha_bars=torch.tensor([0.25], dtype=torch.float64))
        out = add_noise(torch.ones(1, 1), torch.ones(1, 1), 0, sched)
        assert float(out) == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-6)

    def test_shape_mismatch_and_bad_timestep(self):
        x0 = torch.zeros(4, 2)
        with pytest.raises(DomainError):
            add_noise(x0, torch.zeros(4, 3), 0, self.sched)
        with pytest.raises(DomainError):
            add_noise(x0, x0, 100, self.sched)
        with pytest.raises(DomainError):
            add_noise(x0, x0, -1, self.sched)

    def test_roundtrip_float64(self):
        rng = torch.Generator().manual_seed(0)
        for _ in range(200):
            t = int(torch.randint(0, 100, (1,), generator=rng))
            x0 = torch.randn(8, 3, dtype=torch.float64, generator=rng)
            eps = torch.randn(8, 3, dtype=torch.float64, generator=rng)
            x_t = add_noise(x0, eps, t, self.sched)
            err = (reconstruct_x0(x_t, eps, t, self.sched) - x0).abs().max()
            assert float(err) < 1e-12

    def test_roundtrip_float32(self):
        # float32 roundtrips are checked on the linear schedule: its smallest
        # alpha_bar is ~0.36, so the 1/sqrt(alpha_bar) amplification stays ~1.7;
        # the cosine schedule drives alpha_bar to ~2e-7 at t=T-1, where any
        # float32 representation of x_t loses the signal term entirely.
        sched = build_schedule("linear", 100)
        rng = torch.Generator().manual_seed(1)
        for _ in range(200):
            t = int(torch.randint(0, 100, (1,), generator=rng))
            x0 = torch.randn(8, 3, generator=rng)
            eps = torch.randn(8, 3, generator=rng)
            x_t = add_noise(x0, eps, t, sched)
            err = (reconstruct_x0(x_t, eps, t, sched) - x0).abs().max()
            assert float(err) < 1e-6

    def test_batched_timesteps(self):
        rng = torch.Generator().manual_seed(2)
        x0 = torch.randn(5, 4, 2, generator=rng)
        eps = torch.randn(5, 4, 2, generator=rng)
        t = torch.tensor([0, 10, 50, 75, 99])
        batched = add_noise(x0, eps, t, self.sched)
        for i in range(5):
            single = add_noise(x0[i], eps[i], int(t[i]), self.sched)
            assert torch.equal(batched[i], single)


class TestDenoiseStep:
    def setup_method(self):
        self.sched = build_schedule("squaredcos_cap_v2", 100)

    def test_final_step_deterministic(self):
        x = torch.randn(4, 2)
        eps_hat = torch.randn(4, 2)
        a = denoise_step(x, eps_hat, 0, self.sched)
        b = denoise_step(x, eps_hat, 0, self.sched)
        assert torch.equal(a, b)

    def test_seeded_determinism(self):
        x = torch.randn(4, 2)
        eps_hat = torch.randn(4, 2)
        a = denoise_step(x, eps_hat, 40, self.sched, torch.Generator().manual_seed(9))
        b = denoise_step(x, eps_hat, 40, self.sched, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_true_eps_recovers_x0_in_posterior_mean(self):
        rng = torch.Generator().manual_seed(3)
        x0 = torch.rand(6, 2, dtype=torch.float64, generator=rng) * 1.6 - 0.8
        eps = torch.randn(6, 2, dtype=torch.float64, generator=rng)
        for t in (1, 25, 60, 99):
            x_t = add_noise(x0, eps, t, self.sched)
            x0_hat = reconstruct_x0(x_t, eps, t, self.sched)
            assert float((x0_hat - x0).abs().max()) < 1e-6

    def test_clip_saturates_x0_estimate(self):
        sched = build_schedule("squaredcos_cap_v2", 100, clip_sample=True)
        # x_t chosen so the raw x0 estimate is far outside [-1, 1]
        x_t = torch.full((1, 1), 5.0, dtype=torch.float64)
        eps_hat = torch.zeros(1, 1, dtype=torch.float64)
        t = 60
        out = denoise_step(x_t, eps_hat, t, sched, torch.Generator().manual_seed(0))
        abar_prev = float(sched.alpha_bars[t - 1])
        beta = float(sched.betas[t])
        alpha = float(sched.alphas[t])
        abar = float(sched.alpha_bars[t])
        # mean computed with x0_hat clamped to exactly 1
        mean = math.sqrt(abar_prev) * beta / (1 - abar) * 1.0 \
            + math.sqrt(alpha) * (1 - abar_prev) / (1 - abar) * 5.0
        var = beta * (1 - abar_prev) / (1 - abar)
        noise = torch.empty(1, 1, dtype=torch.float64)
        noise.normal_(generator=torch.Generator().manual_seed(0))
        assert float(out) == pytest.approx(mean + math.sqrt(var) * float(noise), rel=1e-12)

    def test_reverse_chain_reproduces_gaussian_target(self):
        """Perfect analytic eps-oracle on a 1-D Gaussian: the reverse chain
        must reproduce the target mean/variance within Monte-Carlo error.

        Run at T=1000: the fixed-small posterior variance is a lower bound
        whose discretization bias scales away with step count, keeping the
        residual well under the Monte-Carlo band used here.
        """
        T = 1000
        sched = build_schedule("squaredcos_cap_v2", T, clip_sample=False)
        mu, sigma = 0.3, 0.5
        n = 30000
        g = torch.Generator().manual_seed(12345)
        x = torch.randn(n, dtype=torch.float64, generator=g)
        for t in range(T - 1, -1, -1):
            abar = float(sched.alpha_bars[t])
            # E[x0 | x_t] for x0 ~ N(mu, sigma^2), x_t = sqrt(abar) x0 + sqrt(1-abar) eps
            var_xt = abar * sigma ** 2 + (1 - abar)
            e_x0 = mu + math.sqrt(abar) * sigma ** 2 / var_xt * (x - math.sqrt(abar) * mu)
            eps_hat = (x - math.sqrt(abar) * e_x0) / math.sqrt(1 - abar)
            x = denoise_step(x, eps_hat, t, sched, g)
        mean_se = sigma / math.sqrt(n)
        var_se = sigma ** 2 * math.sqrt(2.0 / (n - 1))
        assert abs(float(x.mean()) - mu) < 3 * mean_se
        assert abs(float(x.var(unbiased=True)) - sigma ** 2) < 3 * var_se
