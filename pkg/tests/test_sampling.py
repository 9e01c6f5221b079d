import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from mofusion.sampling import (
    DDPM,
    DPMPP_2M_SDE,
    GuidedDenoiser,
    PromptCache,
    SamplerConfig,
    batched_guidance_forward,
    cfg_combine,
    generate,
    run_inference,
    sample_ddpm,
    sample_dpmpp_2m_sde,
    sequential_guidance_forward,
)
from mofusion.schedule import linear_beta_schedule, schedule_karras
from mofusion.training import TrainConfig, init_checkpoint, train

from .helpers import TINY_DENOISER, ddpm_exact_moments, dpm_exact_moments, sample_toy

S = linear_beta_schedule()
GRID = schedule_karras(S, 10)


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_setup, vocab, skeleton):
    ckpt, data = init_checkpoint(tiny_setup, vocab, tiny_setup[0].spec, skeleton,
                                 TrainConfig(iterations=30, batch_size=4, ema_beta=0.9), **TINY_DENOISER)
    train(ckpt, data)
    return ckpt


# -- guidance ------------------------------------------------------------------------


def test_cfg_identities_bitwise():
    g = torch.Generator().manual_seed(0)
    u, c = torch.randn(3, 4, generator=g), torch.randn(3, 4, generator=g)
    assert cfg_combine(u, c, 0) is u
    assert cfg_combine(u, c, 1) is c
    assert torch.equal(cfg_combine(u, c, 2.5), u + 2.5 * (c - u))


@given(st.floats(-5, 5), st.integers(0, 2**31 - 1))
def test_cfg_linear_in_scale(s, seed):
    rng = np.random.default_rng(seed)
    u, c = rng.normal(size=5), rng.normal(size=5)
    assert np.allclose(cfg_combine(u, c, s), (1 - s) * u + s * c, atol=1e-12)


def test_batched_guidance_matches_sequential(tiny_ckpt):
    m = tiny_ckpt.model.eval()
    x = torch.randn(2, 12, m.config.feature_dim)
    ids = torch.tensor([tiny_ckpt.vocab.encode(p, 8) for p in (("walk", "forward"), ("squat", "down"))])
    cond, null = m.encode_condition(ids), m.null_condition(2)
    mask = torch.arange(12)[None] < torch.tensor([[12], [9]])
    with torch.no_grad():
        bu, bc = batched_guidance_forward(m, x, 300.0, cond, null, mask)
        su, sc = sequential_guidance_forward(m, x, 300.0, cond, null, mask)
    assert (bu - su).abs().max() < 1e-5 and (bc - sc).abs().max() < 1e-5


def test_guided_denoiser_counts_calls(tiny_ckpt):
    m = tiny_ckpt.model
    cond = m.encode_condition(torch.tensor([tiny_ckpt.vocab.encode(("wave", "arm"), 8)]))
    mask = torch.ones(1, 8, dtype=torch.bool)
    for batched, per_call in ((True, 1), (False, 2)):
        fn = GuidedDenoiser(m, cond, m.null_condition(1), 2.5, mask, batched)
        for _ in range(3):
            fn(torch.randn(1, 8, m.config.feature_dim, dtype=torch.float64), 10.0)
        assert fn.calls == 3 and fn.network_calls == 3 * per_call


# -- samplers on the Gaussian toy -------------------------------------------------


def test_dpm_moments_match_exact_propagation():
    x = sample_toy("dpm", 0.5, 1.0, S, 200_000, seed=11, grid=GRID)
    mean, var = dpm_exact_moments(0.5, 1.0, S, GRID)
    n = x.size
    assert abs(x.mean() - mean) < 4 * math.sqrt(var / n)
    assert abs(x.var() - var) < 4 * var * math.sqrt(2 / n)


def test_dpm_deterministic_variant_matches_exact_propagation():
    x = sample_toy("dpm", -1.0, 0.5, S, 50_000, seed=2, grid=GRID, eta=0.0)
    mean, var = dpm_exact_moments(-1.0, 0.5, S, GRID, eta=0.0)
    assert abs(x.mean() - mean) < 4 * math.sqrt(var / x.size)
    assert abs(x.var() / var - 1) < 4 * math.sqrt(2 / x.size)


def test_ddpm_moments_match_exact_propagation():
    x = sample_toy("ddpm", 0.5, 1.0, S, 50_000, seed=5)
    mean, var = ddpm_exact_moments(0.5, 1.0, S)
    assert abs(x.mean() - mean) < 4 * math.sqrt(var / x.size)
    assert abs(x.var() / var - 1) < 4 * math.sqrt(2 / x.size)


def test_exact_moments_converge_with_steps():
    errs = [abs(dpm_exact_moments(0.5, 1.0, S, schedule_karras(S, n))[1] - 1) for n in (20, 100, 400)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-3


def test_sampler_noise_order_and_timesteps():
    seen = []

    def fn(x, t):
        seen.append(t)
        return torch.zeros_like(x)

    gen = torch.Generator().manual_seed(3)
    out = sample_dpmpp_2m_sde(fn, (4,), GRID, gen)
    assert seen == [float(t) for t in GRID.timesteps]
    # zero predictions land on zero at the terminal step; the draws happen in order
    assert torch.equal(out, torch.zeros(4, dtype=torch.float64))
    ref = torch.Generator().manual_seed(3)
    first = torch.randn(4, generator=ref, dtype=torch.float64)
    x0_seen = []
    sample_dpmpp_2m_sde(lambda x, t: x0_seen.append(x.clone()) or torch.zeros_like(x), (4,), GRID,
                        torch.Generator().manual_seed(3))
    assert torch.allclose(x0_seen[0], first, atol=1e-12)


def test_ddpm_calls_every_step_and_hook_final():
    calls, finals = [], []

    def hook(i, t, x0, final=False):
        finals.append(final)
        return x0

    sample_ddpm(lambda x, t: calls.append(t) or x * 0, (2,), S, torch.Generator().manual_seed(0), hook)
    assert calls == [float(t) for t in range(1000, 0, -1)]
    assert finals[-1] and not any(finals[:-1])


def test_non_finite_prediction_raises():
    with pytest.raises(FloatingPointError):
        sample_dpmpp_2m_sde(lambda x, t: x * float("nan"), (2,), GRID, torch.Generator().manual_seed(0))


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(kind="euler")
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        SamplerConfig(precision="int8")
    assert SamplerConfig().kind == DPMPP_2M_SDE and SamplerConfig().steps == 10
    assert SamplerConfig().guidance_scale == 2.5 and SamplerConfig().precision == "full"


# -- end to end with a small model --------------------------------------------------


def test_prompt_cache_counts_and_evicts(tiny_ckpt):
    cache = PromptCache(capacity=2)
    m = tiny_ckpt.model
    ids = [tiny_ckpt.vocab.encode(p, 8) for p in (("walk",), ("squat",), ("jump",))]
    cache.get(ids[0], m)
    cache.get(ids[0], m)
    assert cache.encoder_calls == 1 and cache.hits == 1
    cache.get(ids[1], m)
    cache.get(ids[2], m)
    cache.get(ids[0], m)
    assert cache.encoder_calls == 4


def test_generate_is_deterministic_and_counts(tiny_ckpt):
    cfg = SamplerConfig(seed=4)
    a, ra = run_inference(("walk", "forward"), tiny_ckpt, cfg, 20)
    b, rb = run_inference(("walk", "forward"), tiny_ckpt, cfg, 20, use_cache=False)
    assert a == b
    assert (ra.denoiser_calls, ra.network_calls, ra.encoder_calls) == (10, 10, 1)
    assert (rb.denoiser_calls, rb.network_calls, rb.encoder_calls) == (10, 10, 10)
    c, rc = run_inference(("walk", "forward"), tiny_ckpt, SamplerConfig(seed=4, batched_cfg=False), 20)
    assert rc.network_calls == 20
    assert np.abs(c.features - a.features).max() < 1e-4


def test_generate_batch_lengths_and_labels(tiny_ckpt):
    motions, report = generate(tiny_ckpt, [("walk", "forward"), ("wave", "arm")], [10, 17], SamplerConfig())
    assert [m.n_frames for m in motions] == [10, 17]
    assert motions[1].label == ("wave", "arm") and motions[0].spec == tiny_ckpt.spec
    assert report.encoder_calls == 2


def test_reduced_precision_runs(tiny_ckpt):
    full, _ = run_inference(("squat", "down"), tiny_ckpt, SamplerConfig(), 16)
    half, _ = run_inference(("squat", "down"), tiny_ckpt, SamplerConfig(precision="reduced"), 16)
    assert half.features.dtype == np.float32 and np.isfinite(half.features).all()
    assert np.abs(half.features - full.features).max() < 0.25 * np.abs(full.features).max()


def test_generate_rejects_bad_requests(tiny_ckpt):
    with pytest.raises(ValueError):
        generate(tiny_ckpt, [("walk",)], [10, 12])
    with pytest.raises(ValueError):
        generate(tiny_ckpt, [("walk",)], [500])
    with pytest.raises(KeyError):
        generate(tiny_ckpt, [("moonwalk",)], [10])


def test_ddpm_kind_through_generate(tiny_ckpt):
    cfg = SamplerConfig(kind=DDPM, steps=1000)
    _, report = run_inference(("walk",), tiny_ckpt, cfg, 8)
    assert report.denoiser_calls == 1000 and report.steps == 1000
