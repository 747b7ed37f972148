"""Schedule, forward-process, guidance, and DDIM sampler tests."""

import numpy as np
import pytest

from uvap import rng
from uvap.diffusion import (build_schedule, cfg_combine, ddim_timesteps,
                            ddim_trajectory, q_sample)
from uvap.errors import ConfigError, ShapeMismatchError


def test_schedule_endpoints():
    s = build_schedule(1000, 1e-4, 0.02)
    assert s.betas[0] == pytest.approx(1e-4)
    assert s.betas[-1] == pytest.approx(0.02)
    assert len(s.betas) == 1000


def test_schedule_alpha_bars_strictly_decreasing():
    s = build_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[0] == 1.0


def test_schedule_product_oracle():
    # Independent brute-force product of alphas[1..10].
    s = build_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for i in range(10):
        prod *= 1.0 - s.betas[i]
    assert abs(s.alpha_bars[10] - prod) < 1e-12


def test_schedule_bounds_rejected():
    with pytest.raises(ConfigError):
        build_schedule(1000, 0.0, 0.02)
    with pytest.raises(ConfigError):
        build_schedule(1000, 0.03, 0.02)
    with pytest.raises(ConfigError):
        build_schedule(1, 1e-4, 0.02)


def test_q_sample_zero_noise():
    s = build_schedule(100, 1e-4, 0.02)
    z0 = np.ones((4, 4))
    out = q_sample(z0, 37, np.zeros_like(z0), s)
    assert np.allclose(out, np.sqrt(s.alpha_bars[37]) * z0)


def test_q_sample_zero_signal():
    s = build_schedule(100, 1e-4, 0.02)
    eps = np.full((4, 4), 2.0)
    out = q_sample(np.zeros_like(eps), 100, eps, s)
    assert np.allclose(out, np.sqrt(1 - s.alpha_bars[100]) * eps)


def test_q_sample_linearity():
    s = build_schedule(64, 1e-3, 0.05)
    gen = np.random.Generator(np.random.Philox(key=1))
    z0, eps = gen.normal(size=(3, 3)), gen.normal(size=(3, 3))
    a = q_sample(2 * z0, 9, 3 * eps, s)
    b = 2 * q_sample(z0, 9, np.zeros_like(eps), s) + \
        3 * q_sample(np.zeros_like(z0), 9, eps, s)
    assert np.allclose(a, b)


def test_q_sample_t_out_of_range():
    s = build_schedule(64, 1e-3, 0.05)
    with pytest.raises(IndexError):
        q_sample(np.zeros((2,)), 0, np.zeros((2,)), s)
    with pytest.raises(IndexError):
        q_sample(np.zeros((2,)), 65, np.zeros((2,)), s)


def test_q_sample_composition_matches_closed_form():
    # Monte-Carlo oracle: compose single-step transitions and compare the
    # empirical mean and variance of the closed form within 3 standard errors.
    s = build_schedule(40, 1e-3, 0.05)
    t = 25
    n = 10_000
    gen = rng.stream(99, "composition")
    z0 = np.full(n, 0.7)
    z = z0.copy()
    for i in range(1, t + 1):
        eps_i = gen.standard_normal(n)
        z = np.sqrt(s.alphas[i - 1]) * z + np.sqrt(1 - s.alphas[i - 1]) * eps_i
    abar = s.alpha_bars[t]
    expect_mean = np.sqrt(abar) * 0.7
    expect_var = 1 - abar
    se_mean = np.sqrt(expect_var / n)
    se_var = expect_var * np.sqrt(2.0 / (n - 1))
    assert abs(z.mean() - expect_mean) < 3 * se_mean
    assert abs(z.var() - expect_var) < 3 * se_var


def test_q_sample_variance_preservation():
    # Var[q_sample] = abar * Var[z0] + (1 - abar) for unit-variance inputs.
    s = build_schedule(50, 1e-3, 0.04)
    n = 10_000
    gen = rng.stream(5, "varcheck")
    z0 = gen.standard_normal(n)
    eps = gen.standard_normal(n)
    out = q_sample(z0, 30, eps, s)
    se = 1.0 * np.sqrt(2.0 / (n - 1))
    assert abs(out.var() - 1.0) < 3 * se


def test_cfg_combine_identities():
    ec, eu = np.array([2.0]), np.array([1.0])
    assert cfg_combine(ec, eu, 1.0) == pytest.approx(2.0)
    assert cfg_combine(ec, eu, 0.0) == pytest.approx(1.0)
    assert cfg_combine(ec, eu, 7.5) == pytest.approx(8.5)
    with pytest.raises(ShapeMismatchError):
        cfg_combine(np.zeros(2), np.zeros(3), 1.0)


def test_ddim_timesteps_strided():
    taus = ddim_timesteps(1000, 50)
    assert len(taus) == 50
    assert taus[0] == 1000 and taus[-1] == 1
    assert np.all(np.diff(taus) < 0)
    with pytest.raises(ConfigError):
        ddim_timesteps(100, 101)


def test_ddim_ideal_denoiser_recovers_z0():
    # With a denoiser that returns the exact eps used by q_sample, the full-
    # length DDIM walk inverts the forward process.
    s = build_schedule(64, 1e-3, 0.05)
    gen = np.random.Generator(np.random.Philox(key=8))
    z0 = gen.normal(size=(1, 4, 4, 1))
    eps = gen.normal(size=(1, 4, 4, 1))
    z_t = q_sample(z0, 64, eps, s)
    taus = ddim_timesteps(64, 64)
    out = ddim_trajectory(lambda z, t: eps, z_t, s, taus)
    assert np.max(np.abs(out - z0)) < 1e-4


def test_ddim_trajectory_deterministic():
    s = build_schedule(32, 1e-3, 0.05)
    gen = np.random.Generator(np.random.Philox(key=9))
    z = gen.normal(size=(2, 4, 4, 1))
    w = gen.normal(size=(1, 4, 4, 1))
    fn = lambda zz, t: 0.1 * zz + w
    taus = ddim_timesteps(32, 8)
    a = ddim_trajectory(fn, z, s, taus)
    b = ddim_trajectory(fn, z, s, taus)
    assert np.array_equal(a, b)
