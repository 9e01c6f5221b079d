"""Shared constants and builders for the test-suite."""

from mofusion.synth import DEFAULT_CLASSES, SynthConfig
from mofusion.training import TrainConfig

# desk setup shared by the end-to-end checks
DESK_TRAIN = SynthConfig(DEFAULT_CLASSES, samples_per_class=64, seed=0)
DESK_HELDOUT = SynthConfig(DEFAULT_CLASSES, samples_per_class=32, seed=1)
DESK_TRAIN_CONFIG = TrainConfig(iterations=5000, ema_beta=0.999)
TINY_DENOISER = dict(base_channels=16, channel_multipliers=(1, 2), groups=4, attention_heads=2,
                     text_latent_dim=16, time_latent_dim=32, text_layers=1, text_heads=2, max_frames=64)




# -- Gaussian toy: data x0 ~ N(mu, s^2) with the exact posterior-mean denoiser -----

import math  # noqa: E402

import numpy as np  # noqa: E402
import torch  # noqa: E402

from mofusion.schedule import sigma_timestep_map  # noqa: E402


def gaussian_denoiser(mu: float, s: float, schedule):
    """E[x0 | x_t] for Gaussian data, queried like the network: VP state and (fractional) timestep."""
    m = sigma_timestep_map(schedule)

    def fn(x_vp, t):
        sigma = float(m.t_to_sigma(t))
        x = x_vp * math.sqrt(1.0 + sigma * sigma)
        return (s * s * x + sigma * sigma * mu) / (s * s + sigma * sigma)

    return fn


def _affine(mu, s, sigma):
    """E[x0 | x] = a x + b in sigma space."""
    return s * s / (s * s + sigma * sigma), sigma * sigma * mu / (s * s + sigma * sigma)


def dpm_exact_moments(mu, s, schedule, grid, eta=1.0):
    """Mean and variance of the solver output, propagated exactly through the linear recursion.

    The state is the pair (x, previous prediction); both stay jointly Gaussian.
    """
    m = sigma_timestep_map(schedule)
    sig = grid.sigmas
    mean = np.array([0.0, 0.0])
    cov = np.zeros((2, 2))
    cov[0, 0] = 1.0 + sig[0] ** 2
    have_old, h_last = False, None
    for i in range(grid.n_steps):
        s_cur, s_next = sig[i], sig[i + 1]
        a, b = _affine(mu, s, float(m.t_to_sigma(grid.timesteps[i])))
        # d = a x + b, as a row over (x, old, 1)
        d_row = np.array([a, 0.0])
        if s_next == 0:
            return a * mean[0] + b, a * a * cov[0, 0]
        h = math.log(s_cur / s_next)
        phi = -math.expm1(-h - eta * h)
        x_row = np.array([(s_next / s_cur) * math.exp(-eta * h), 0.0]) + phi * d_row
        const = phi * b
        if have_old:
            c = 0.5 * phi * h / h_last
            x_row = x_row + c * d_row - c * np.array([0.0, 1.0])
            const += c * b  # the stored mean of old already includes its own offset
        new_x_mean = x_row @ mean + const
        new_old_mean = d_row @ mean + b
        rows = np.stack([x_row, d_row])
        new_cov = rows @ cov @ rows.T
        new_cov[0, 0] += (s_next ** 2) * -math.expm1(-2 * eta * h)
        mean = np.array([new_x_mean, new_old_mean])
        cov = new_cov
        have_old, h_last = True, h
    raise AssertionError("grid must end at sigma 0")


def ddpm_exact_moments(mu, s, schedule):
    m = sigma_timestep_map(schedule)
    mean, var = 0.0, 1.0
    for t in range(schedule.T, 0, -1):
        sigma = float(m.t_to_sigma(t))
        c0, ct, post = schedule.posterior_coefficients(t)
        # x_vp -> sigma space scaling folded into the affine denoiser
        a, b = _affine(mu, s, sigma)
        a_vp = a * math.sqrt(1.0 + sigma * sigma)
        mean = (c0 * a_vp + ct) * mean + c0 * b
        var = (c0 * a_vp + ct) ** 2 * var + (post if t > 1 else 0.0)
    return mean, var


def sample_toy(kind, mu, s, schedule, n, seed, grid=None, eta=1.0):
    from mofusion.sampling import sample_ddpm, sample_dpmpp_2m_sde

    gen = torch.Generator().manual_seed(seed)
    fn = gaussian_denoiser(mu, s, schedule)
    if kind == "ddpm":
        return sample_ddpm(fn, (n,), schedule, gen).numpy()
    return sample_dpmpp_2m_sde(fn, (n,), grid, gen, eta).numpy()


# -- footskate fixtures ------------------------------------------------------------


def rest_pose(skeleton, frames):
    from mofusion.skeleton import forward_kinematics

    return forward_kinematics(skeleton, np.tile([0.0, 0.95, 0.0], (frames, 1)),
                              np.tile(np.eye(3), (frames, skeleton.joint_count, 1, 1)))


def slide_fixture(skeleton, frames=24, slide=0.10):
    """Standing pose; the left foot is lifted, planted for frames 8..15 while sliding ``slide`` m, then lifted."""
    pos = rest_pose(skeleton, frames)
    left = [skeleton.index("l_ankle"), skeleton.index("l_toe")]
    off = np.zeros((frames, 3))
    off[:8, 1] = 0.2
    off[16:, 1] = 0.2
    off[8:16, 2] = np.linspace(0.0, slide, 8)
    off[16:, 2] = slide
    pos[:, left] += off[:, None]
    return pos


# -- CLI determinism -----------------------------------------------------------------

import csv as _csv  # noqa: E402
import hashlib as _hashlib  # noqa: E402
import io as _io  # noqa: E402
import json as _json  # noqa: E402
from pathlib import Path as _Path  # noqa: E402

TINY_CLI_CONFIG = {
    "synth": {"samples_per_class": 10, "length_range": [24, 40]},
    "denoiser": {**{k: list(v) if isinstance(v, tuple) else v for k, v in TINY_DENOISER.items()}},
    "train": {"iterations": 20, "batch_size": 4},
    "eval": {"encoder_iterations": 30, "repetitions": 3},
}
# wall-clock measurements; every other byte must repeat under a fixed seed
TIMING_KEYS = {"wall_ms", "aits_seconds", "aits_std"}


def _strip(obj):
    if isinstance(obj, dict):
        return {k: _strip(v) for k, v in obj.items() if k not in TIMING_KEYS}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def canonical_bytes(path: _Path) -> bytes:
    """File content with timing fields removed; other files are returned verbatim."""
    data = path.read_bytes()
    if path.suffix == ".jsonl":
        return b"\n".join(_json.dumps(_strip(_json.loads(l))).encode() for l in data.splitlines())
    if path.suffix == ".json":
        return _json.dumps(_strip(_json.loads(data))).encode()
    if path.suffix == ".csv":
        rows = list(_csv.reader(_io.StringIO(data.decode())))
        drop = {i for i, h in enumerate(rows[0]) if h in TIMING_KEYS}
        rows = [[c for i, c in enumerate(r) if i not in drop] for r in rows if r[0] not in TIMING_KEYS]
        return _json.dumps(rows).encode()
    return data


def tree_digest(root) -> dict[str, str]:
    root = _Path(root)
    return {
        str(p.relative_to(root)): _hashlib.sha256(canonical_bytes(p)).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


def volatile_files(root) -> list[str]:
    """Files whose raw bytes carry timing fields."""
    root = _Path(root)
    return [str(p.relative_to(root)) for p in sorted(root.rglob("*"))
            if p.is_file() and canonical_bytes(p) != p.read_bytes() and p.suffix in (".jsonl", ".csv")]


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Keep the verdict for the terminal summary, then fail loudly if needed."""
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
