import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mofusion.schedule import (
    NoiseSchedule,
    ddpm_posterior_step,
    karras_sigmas,
    linear_beta_schedule,
    q_sample,
    schedule_karras,
    sigma_timestep_map,
)

S = linear_beta_schedule()


def test_linear_betas_endpoints():
    assert S.T == 1000
    assert S.betas[0] == 1e-4 and S.betas[-1] == 0.02
    assert np.all(np.diff(S.betas) > 0)


def test_alpha_bar_is_running_product():
    # oracle: explicit loop product with math.fsum-free float64 accumulation
    prod = 1.0
    for t in range(1, S.T + 1):
        prod *= 1.0 - S.betas[t - 1]
        assert abs(S.alpha_bar(t) - prod) <= 1e-12
    assert S.alpha_bar(0) == 1.0


@pytest.mark.parametrize("t", [1, 2, 17, 500, 999, 1000])
def test_posterior_coefficients_match_definition(t):
    b = S.betas[t - 1]
    ab = np.prod(1 - S.betas[:t])
    ab_prev = np.prod(1 - S.betas[: t - 1])
    c0, ct, var = S.posterior_coefficients(t)
    assert c0 == pytest.approx(np.sqrt(ab_prev) * b / (1 - ab), rel=1e-10)
    assert ct == pytest.approx(np.sqrt(1 - b) * (1 - ab_prev) / (1 - ab), rel=1e-10)
    assert var == pytest.approx((1 - ab_prev) / (1 - ab) * b, rel=1e-10, abs=1e-300)


def test_posterior_identities_all_t():
    for t in range(1, S.T + 1):
        c0, ct, var = S.posterior_coefficients(t)
        ab, ab_prev = S.alpha_bar(t), S.alpha_bar(t - 1)
        # the posterior mean of a noiseless x_t = sqrt(ab) x0 must be sqrt(ab_prev) x0
        assert abs(c0 + ct * math.sqrt(ab) - math.sqrt(ab_prev)) < 1e-12
        # variance identity: var = beta (1 - ab_prev) / (1 - ab)
        assert abs(var - S.betas[t - 1] * (1 - ab_prev) / S.one_minus_alpha_bar(t)) < 1e-15


def test_t1_step_returns_prediction_exactly():
    assert S.posterior_coefficients(1) == (1.0, 0.0, 0.0)
    x_t = np.random.default_rng(0).normal(size=(3, 5))
    x0 = np.random.default_rng(1).normal(size=(3, 5))
    assert np.array_equal(ddpm_posterior_step(x_t, x0, 1, None, S), x0)
    with pytest.raises(ValueError):
        ddpm_posterior_step(x_t, x0, 1, np.ones_like(x0), S)


def test_posterior_step_noise_uses_std():
    x = np.zeros(4)
    eps = np.ones(4)
    t = 400
    _, _, var = S.posterior_coefficients(t)
    assert np.allclose(ddpm_posterior_step(x, x, t, eps, S), np.sqrt(var))


@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_q_sample_numpy_torch_agree(t, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    a = q_sample(x0, t, eps, S)
    b = q_sample(torch.tensor(x0), t, torch.tensor(eps), S).numpy()
    assert np.allclose(a, b, atol=1e-14)
    assert np.allclose(a, math.sqrt(S.alpha_bar(t)) * x0 + math.sqrt(1 - S.alpha_bar(t)) * eps, atol=1e-14)


def test_q_sample_per_sample_timesteps():
    x0 = np.ones((3, 2, 2))
    out = q_sample(x0, np.array([1, 10, 1000]), np.zeros_like(x0), S)
    for i, t in enumerate([1, 10, 1000]):
        assert np.allclose(out[i], math.sqrt(S.alpha_bar(t)))


def test_q_sample_marginal_moments():
    rng = np.random.default_rng(0)
    x0 = np.full(200_000, 0.7)
    xt = q_sample(x0, 250, rng.normal(size=x0.shape), S)
    ab = S.alpha_bar(250)
    assert xt.mean() == pytest.approx(math.sqrt(ab) * 0.7, abs=5e-3)
    assert xt.var() == pytest.approx(1 - ab, rel=1e-2)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        linear_beta_schedule(0)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 0, np.zeros(2), S)
    with pytest.raises(ValueError):
        S.posterior_coefficients(1001)


def test_schedule_json_roundtrip():
    s2 = NoiseSchedule.from_json(S.to_json())
    assert np.array_equal(s2.alpha_bars, S.alpha_bars)


# -- karras grid ------------------------------------------------------------------


def test_karras_grid_endpoints_and_order():
    g = schedule_karras(S, 10)
    m = sigma_timestep_map(S)
    assert g.sigmas.size == 11 and g.sigmas[-1] == 0.0
    assert g.sigmas[0] == m.sigma_max and g.sigmas[-2] == m.sigma_min
    assert np.all(np.diff(g.sigmas) < 0)
    assert g.timesteps[0] == pytest.approx(1000) and g.timesteps[-1] == pytest.approx(1)
    assert np.all(np.diff(g.timesteps) < 0)


def test_karras_matches_closed_form():
    # frozen from an independent evaluation of the rho-power ramp
    g = karras_sigmas(4, 0.1, 10.0, rho=7.0)
    ramp = np.array([0, 1 / 3, 2 / 3, 1])
    hi, lo = 10.0 ** (1 / 7), 0.1 ** (1 / 7)
    assert np.allclose(g.sigmas[:-1], (hi + ramp * (lo - hi)) ** 7, rtol=1e-13)


def test_sigma_range_of_default_schedule():
    m = sigma_timestep_map(S)
    assert m.sigma_min == pytest.approx(math.sqrt(1e-4 / (1 - 1e-4)), rel=1e-12)
    assert m.sigma_max == pytest.approx(157.4, rel=1e-3)


@given(st.floats(1.0, 1000.0))
def test_sigma_timestep_roundtrip(t):
    m = sigma_timestep_map(S)
    t2, clamped = m.sigma_to_t(m.t_to_sigma(t))
    assert not clamped
    assert t2 == pytest.approx(t, abs=1e-8)


def test_sigma_outside_range_is_flagged():
    m = sigma_timestep_map(S)
    _, clamped = m.sigma_to_t(np.array([1e-5, 1e4, 1.0]))
    assert clamped.tolist() == [True, True, False]


@given(st.integers(1, 60), st.floats(1.0, 12.0))
def test_karras_monotone_property(n, rho):
    g = karras_sigmas(n, 0.01, 100.0, rho)
    assert g.n_steps == n
    assert np.all(np.diff(g.sigmas) < 0)


def test_karras_invalid():
    with pytest.raises(ValueError):
        karras_sigmas(0, 0.1, 1.0)
    with pytest.raises(ValueError):
        karras_sigmas(5, 1.0, 0.1)
