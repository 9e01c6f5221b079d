"""Discrete noise schedules, the forward process, the DDPM reverse step and Karras grids.

All schedule arrays are float64. Timesteps run 1..T; ``alpha_bar(0) == 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        # 1 - alpha_bar_1 is beta_1 exactly; keeps the t = 1 reverse step exact
        one_minus = 1.0 - alpha_bars
        one_minus[0] = betas[0]
        posterior = (1.0 - prev) / one_minus * betas
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars),
                          ("alpha_bars_prev", prev), ("one_minus_alpha_bars", one_minus),
                          ("posterior_betas", posterior)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        return np.where(t == 0, 1.0, self.alpha_bars[np.clip(t, 1, self.T) - 1])

    def one_minus_alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        return np.where(t == 0, 0.0, self.one_minus_alpha_bars[np.clip(t, 1, self.T) - 1])

    def sigmas(self) -> np.ndarray:
        """sigma(t) = sqrt((1 - alpha_bar_t) / alpha_bar_t) for t = 1..T."""
        return np.sqrt(self.one_minus_alpha_bars / self.alpha_bars)

    def check_t(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")

    def posterior_coefficients(self, t: int) -> tuple[float, float, float]:
        """(x0 coefficient, x_t coefficient, posterior variance) of the reverse step at t."""
        self.check_t(t)
        i = int(t) - 1
        ab_prev, denom = self.alpha_bars_prev[i], self.one_minus_alpha_bars[i]
        c0 = np.sqrt(ab_prev) * self.betas[i] / denom
        ct = np.sqrt(self.alphas[i]) * (1.0 - ab_prev) / denom
        return float(c0), float(ct), float(self.posterior_betas[i])

    def to_json(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_json(cls, data) -> "NoiseSchedule":
        return cls(np.asarray(data["betas"], np.float64))


def linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _coef(value, like):
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(value, dtype=like.dtype, device=like.device)
    like = np.asarray(like)
    return np.asarray(value, dtype=like.dtype if like.dtype.kind == "f" else np.float64)


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` is a scalar or one timestep per leading-axis sample.
    """
    schedule.check_t(t)
    if eps.shape != x0.shape:
        raise ValueError("eps must be shaped like x0")
    ab, om = schedule.alpha_bar(t), schedule.one_minus_alpha_bar(t)
    extra = (1,) * (x0.ndim - ab.ndim)
    a = _coef(np.sqrt(ab).reshape(ab.shape + extra), x0)
    s = _coef(np.sqrt(om).reshape(ab.shape + extra), x0)
    return a * x0 + s * eps


def ddpm_posterior_step(x_t, x0_hat, t: int, eps, schedule: NoiseSchedule):
    """One ancestral step t -> t-1 given a clean-sample prediction.

    The noise term is scaled by the posterior standard deviation sqrt(beta~_t);
    ``eps`` must be zero at t = 1.
    """
    c0, ct, var = schedule.posterior_coefficients(t)
    if t == 1 and eps is not None and bool((eps != 0).any()):
        raise ValueError("eps must be zero at t = 1")
    out = c0 * x0_hat + ct * x_t
    if eps is not None and t > 1:
        out = out + np.sqrt(var) * eps
    return out


@dataclass(frozen=True, eq=False)
class KarrasGrid:
    sigmas: np.ndarray
    timesteps: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.timesteps.size


class SigmaTimestepMap:
    """Monotone piecewise-linear map between t and log sigma(t) over the schedule knots."""

    def __init__(self, schedule: NoiseSchedule):
        self.log_sigmas = np.log(schedule.sigmas())
        self.ts = np.arange(1, schedule.T + 1, dtype=np.float64)
        self.sigma_min = float(np.exp(self.log_sigmas[0]))
        self.sigma_max = float(np.exp(self.log_sigmas[-1]))

    def sigma_to_t(self, sigma) -> tuple[np.ndarray, np.ndarray]:
        """Returns (t, clamped) where ``clamped`` flags sigmas outside [sigma(1), sigma(T)]."""
        log_s = np.log(np.asarray(sigma, dtype=np.float64))
        clamped = (log_s < self.log_sigmas[0]) | (log_s > self.log_sigmas[-1])
        return np.interp(log_s, self.log_sigmas, self.ts), clamped

    def t_to_sigma(self, t) -> np.ndarray:
        return np.exp(np.interp(np.asarray(t, dtype=np.float64), self.ts, self.log_sigmas))


def sigma_timestep_map(schedule: NoiseSchedule) -> SigmaTimestepMap:
    return SigmaTimestepMap(schedule)


def karras_sigmas(
    n_steps: int,
    sigma_min: float,
    sigma_max: float,
    rho: float = 7.0,
    schedule: NoiseSchedule | None = None,
) -> KarrasGrid:
    """Power-law sigma grid from sigma_max down to sigma_min, with a terminal 0 appended.

    When ``schedule`` is given the grid also carries the matching fractional timesteps.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not 0 < sigma_min < sigma_max:
        raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    if rho <= 0:
        raise ValueError("rho must be positive")
    ramp = np.linspace(0.0, 1.0, n_steps) if n_steps > 1 else np.zeros(1)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sig = (hi + ramp * (lo - hi)) ** rho
    sig[0] = sigma_max
    if n_steps > 1:
        sig[-1] = sigma_min
    sigmas = np.append(sig, 0.0)
    if schedule is not None:
        timesteps, _ = SigmaTimestepMap(schedule).sigma_to_t(sig)
    else:
        timesteps = np.full(n_steps, np.nan)
    return KarrasGrid(sigmas, timesteps)


def schedule_karras(schedule: NoiseSchedule, n_steps: int, rho: float = 7.0) -> KarrasGrid:
    """Karras grid spanning the schedule's own range sigma(1)..sigma(T)."""
    m = SigmaTimestepMap(schedule)
    return karras_sigmas(n_steps, m.sigma_min, m.sigma_max, rho, schedule)
