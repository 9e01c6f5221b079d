"""Samplers, classifier-free guidance and the inference engine.

Samplers are written against a generic ``denoise_fn(x_vp, t) -> x0_hat`` so the
same code runs the trained network and analytic toy oracles.
"""

from __future__ import annotations

import copy
import math
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import CondUNet1D, ConditionEmbedding
from .motion import MotionSequence
from .schedule import KarrasGrid, NoiseSchedule, ddpm_posterior_step, schedule_karras

DDPM = "ddpm"
DPMPP_2M_SDE = "dpmpp_2m_sde"

DenoiseFn = Callable[[torch.Tensor, float], torch.Tensor]
Hook = Callable[..., torch.Tensor]  # hook(step_index, t, x0_hat, final=...) -> x0_hat


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = DPMPP_2M_SDE
    steps: int = 10
    guidance_scale: float = 2.5
    use_karras: bool = True
    precision: str = "full"
    seed: int = 0
    eta: float = 1.0  # 0 gives the deterministic solver
    batched_cfg: bool = True

    def __post_init__(self):
        if self.kind not in (DDPM, DPMPP_2M_SDE):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")
        if self.precision not in ("full", "reduced"):
            raise ValueError("precision must be 'full' or 'reduced'")
        if self.kind == DPMPP_2M_SDE and not self.use_karras:
            raise ValueError("the solver only supports Karras grids")


def cfg_combine(uncond, cond, s: float):
    """G(0) + s (G(c) - G(0)); returns the inputs themselves at s = 0 and s = 1."""
    if s == 0:
        return uncond
    if s == 1:
        return cond
    return uncond + s * (cond - uncond)


# -- samplers ------------------------------------------------------------------


def _check_finite(x: torch.Tensor, step) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite sampler state at step {step}")


def sample_ddpm(
    denoise_fn: DenoiseFn,
    shape: tuple[int, ...],
    schedule: NoiseSchedule,
    generator: torch.Generator,
    hook: Hook | None = None,
) -> torch.Tensor:
    """Ancestral sampling over all T steps. Noise order: x_T first, then one draw per step t = T..2."""
    x = torch.randn(shape, generator=generator, dtype=torch.float64)
    for i, t in enumerate(range(schedule.T, 0, -1)):
        x0 = denoise_fn(x, float(t)).to(torch.float64)
        if hook is not None:
            x0 = hook(i, float(t), x0, final=t == 1)
        eps = torch.randn(shape, generator=generator, dtype=torch.float64) if t > 1 else None
        x = ddpm_posterior_step(x, x0, t, eps, schedule)
        _check_finite(x, t)
    return x


def sample_dpmpp_2m_sde(
    denoise_fn: DenoiseFn,
    shape: tuple[int, ...],
    grid: KarrasGrid,
    generator: torch.Generator,
    eta: float = 1.0,
    hook: Hook | None = None,
) -> torch.Tensor:
    """Second-order multistep data-prediction solver with noise injection, in sigma space.

    The state lives in sigma space (x = x_vp * sqrt(1 + sigma^2)); the network is
    queried in VP space at the grid's fractional timestep. Noise order: the
    initial draw, then one draw per non-terminal step.
    """
    sigmas = torch.as_tensor(grid.sigmas, dtype=torch.float64)
    x = torch.randn(shape, generator=generator, dtype=torch.float64) * math.sqrt(1.0 + float(sigmas[0]) ** 2)
    old, h_last = None, None
    for i in range(grid.n_steps):
        s, s_next = float(sigmas[i]), float(sigmas[i + 1])
        d = denoise_fn(x / math.sqrt(1.0 + s * s), float(grid.timesteps[i])).to(torch.float64)
        if hook is not None:
            d = hook(i, float(grid.timesteps[i]), d, final=s_next == 0.0)
        if s_next == 0.0:
            x = d
        else:
            h = math.log(s / s_next)
            eta_h = eta * h
            x = (s_next / s) * math.exp(-eta_h) * x + (-math.expm1(-h - eta_h)) * d
            if old is not None:
                r = h_last / h
                x = x + 0.5 * (-math.expm1(-h - eta_h)) * (1.0 / r) * (d - old)
            if eta:
                noise = torch.randn(shape, generator=generator, dtype=torch.float64)
                x = x + noise * s_next * math.sqrt(-math.expm1(-2.0 * eta_h))
            h_last = h
        old = d
        _check_finite(x, i)
    return x


# -- condition cache -----------------------------------------------------------


class PromptCache:
    """LRU cache of encoded prompts; the encoder runs at most once per cached prompt."""

    def __init__(self, capacity: int = 128):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: OrderedDict[tuple[int, ...], tuple[ConditionEmbedding, ConditionEmbedding]] = OrderedDict()
        self._lock = threading.Lock()
        self.encoder_calls = 0
        self.hits = 0

    def __len__(self):
        return len(self._entries)

    def get(self, token_ids: Sequence[int], model: CondUNet1D) -> tuple[ConditionEmbedding, ConditionEmbedding]:
        key = tuple(int(i) for i in token_ids)
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                self.hits += 1
                return self._entries[key]
        with torch.no_grad():
            cond = model.encode_condition(torch.tensor([key]))
        null = model.null_condition(1)
        with self._lock:
            self.encoder_calls += 1
            self._entries[key] = (cond, null)
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return cond, null


def get_cached_condition(cache: PromptCache | None, token_ids, model: CondUNet1D):
    if cache is None:
        with torch.no_grad():
            return model.encode_condition(torch.tensor([list(token_ids)])), model.null_condition(1)
    return cache.get(token_ids, model)


# -- guided denoiser -------------------------------------------------------------


def batched_guidance_forward(model, x_t, t, cond: ConditionEmbedding, null: ConditionEmbedding, mask=None):
    """Conditional and unconditional predictions from one network call over a doubled batch."""
    b = x_t.shape[0]
    t = torch.as_tensor(t, dtype=torch.float64).expand(b)
    m = None if mask is None else torch.cat([mask, mask])
    out = model(torch.cat([x_t, x_t]), torch.cat([t, t]), ConditionEmbedding.cat([cond, null]), m)
    return out[:b], out[b:]


def sequential_guidance_forward(model, x_t, t, cond, null, mask=None):
    return model(x_t, t, cond, mask), model(x_t, t, null, mask)


@dataclass
class GuidedDenoiser:
    """x0-prediction with guidance applied, counting network invocations."""

    model: CondUNet1D
    cond: ConditionEmbedding
    null: ConditionEmbedding
    scale: float
    mask: torch.Tensor | None = None
    batched: bool = True
    encode: Callable[[], tuple[ConditionEmbedding, ConditionEmbedding]] | None = None
    calls: int = 0
    network_calls: int = 0
    encoder_calls: int = 0

    def __post_init__(self):
        self.dtype = next(self.model.parameters()).dtype
        self.cond = self.cond.to(self.dtype)
        self.null = self.null.to(self.dtype)

    @torch.no_grad()
    def __call__(self, x_vp: torch.Tensor, t: float) -> torch.Tensor:
        self.calls += 1
        x = x_vp.to(self.dtype)
        if self.encode is not None:
            # uncached baseline: the prompt is embedded again at every step
            cond, null = self.encode()
            self.cond, self.null = cond.to(self.dtype), null.to(self.dtype)
            self.encoder_calls += 1
        if self.scale == 1:
            self.network_calls += 1
            return self.model(x, t, self.cond, self.mask).to(torch.float64)
        if self.batched:
            self.network_calls += 1
            c, u = batched_guidance_forward(self.model, x, t, self.cond, self.null, self.mask)
        else:
            self.network_calls += 2
            c, u = sequential_guidance_forward(self.model, x, t, self.cond, self.null, self.mask)
        return cfg_combine(u.to(torch.float64), c.to(torch.float64), self.scale)


def reduced_precision(model: CondUNet1D) -> CondUNet1D:
    """A 16-bit copy of the network for inference."""
    return copy.deepcopy(model).half().eval()


@dataclass
class InferenceReport:
    prompts: list[tuple[str, ...]]
    steps: int
    sampler: str
    seconds: float
    denoiser_calls: int
    network_calls: int
    encoder_calls: int
    per_prompt_seconds: list[float] = field(default_factory=list)

    @property
    def aits_seconds(self) -> float:
        return float(np.mean(self.per_prompt_seconds)) if self.per_prompt_seconds else self.seconds

    def to_json(self) -> dict:
        return {
            "prompt": [" ".join(p) for p in self.prompts],
            "steps": self.steps,
            "sampler": self.sampler,
            "aits_seconds": self.aits_seconds,
            "denoiser_calls": self.denoiser_calls,
            "network_calls": self.network_calls,
            "encoder_calls": self.encoder_calls,
        }


def _encode_prompts(net, ids, cache):
    """Batched condition pair; returns (cond, null, encoder invocations)."""
    if cache is None:
        with torch.no_grad():
            return net.encode_condition(torch.tensor(ids)), net.null_condition(len(ids)), 1
    before = cache.encoder_calls
    pairs = [cache.get(row, net) for row in ids]
    cond = ConditionEmbedding.cat([c for c, _ in pairs])
    null = ConditionEmbedding.cat([n for _, n in pairs])
    return cond, null, cache.encoder_calls - before


def generate(
    ckpt,
    prompts: Sequence[Sequence[str]],
    lengths: Sequence[int],
    config: SamplerConfig = SamplerConfig(),
    cache: PromptCache | None = None,
    hook: Hook | None = None,
    model: CondUNet1D | None = None,
    use_cache: bool = True,
) -> tuple[list[MotionSequence], InferenceReport]:
    """Sample one motion per prompt as a single batch and denormalize it.

    ``model`` overrides the checkpoint network (e.g. a prepared 16-bit copy);
    a cache must belong to the network it is used with. With ``use_cache=False``
    the prompts are re-embedded at every denoiser call.
    """
    if len(prompts) != len(lengths) or not prompts:
        raise ValueError("need one length per prompt and at least one prompt")
    prompts = [tuple(p) for p in prompts]
    net = model if model is not None else ckpt.model
    if config.precision == "reduced" and next(net.parameters()).dtype != torch.float16:
        net = reduced_precision(net)
    net.eval()
    gen = torch.Generator().manual_seed(config.seed)
    n = max(lengths)
    if n > net.config.max_frames:
        raise ValueError(f"requested {n} frames, model supports {net.config.max_frames}")
    mask = torch.arange(n)[None, :] < torch.as_tensor(lengths)[:, None]
    ids = [ckpt.vocab.encode(p, net.config.max_tokens) for p in prompts]
    start = time.perf_counter()
    if use_cache:
        cond, null, enc_calls = _encode_prompts(net, ids, cache if cache is not None else PromptCache())
        fn = GuidedDenoiser(net, cond, null, config.guidance_scale, mask, config.batched_cfg)
    else:
        cond, null = net.null_condition(len(ids)), net.null_condition(len(ids))
        fn = GuidedDenoiser(net, cond, null, config.guidance_scale, mask, config.batched_cfg,
                            encode=lambda: _encode_prompts(net, ids, None)[:2])
    shape = (len(prompts), n, net.config.feature_dim)
    if config.kind == DDPM:
        x = sample_ddpm(fn, shape, ckpt.schedule, gen, hook)
    else:
        x = sample_dpmpp_2m_sde(fn, shape, schedule_karras(ckpt.schedule, config.steps), gen, config.eta, hook)
    elapsed = time.perf_counter() - start
    feats = ckpt.normalizer.denormalize(x.to(torch.float32).numpy())
    motions = [
        MotionSequence(ckpt.fps, feats[i, : lengths[i]], label=prompts[i], spec=ckpt.spec)
        for i in range(len(prompts))
    ]
    if not use_cache:
        enc_calls = fn.encoder_calls
    report = InferenceReport(prompts, fn.calls, config.kind, elapsed, fn.calls, fn.network_calls, enc_calls)
    return motions, report


def run_inference(
    prompt: Sequence[str],
    ckpt,
    config: SamplerConfig = SamplerConfig(),
    n_frames: int = 60,
    cache: PromptCache | None = None,
    hook: Hook | None = None,
    model: CondUNet1D | None = None,
    use_cache: bool = True,
) -> tuple[MotionSequence, InferenceReport]:
    """Batch-size-1 generation; the report's timing excludes model and data loading."""
    motions, report = generate(ckpt, [prompt], [n_frames], config, cache, hook, model, use_cache)
    report.per_prompt_seconds = [report.seconds]
    return motions[0], report
