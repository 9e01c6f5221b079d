"""DDPM training with condition dropout, parameter EMA and resumable checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import CondUNet1D, DenoiserConfig
from .motion import MotionSequence, Normalizer, RepresentationSpec, pad_and_mask
from .schedule import NoiseSchedule, q_sample
from .skeleton import Skeleton
from .synth import Vocabulary

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    iterations: int = 5000
    batch_size: int = 16
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 5000
    grad_clip_norm: float = 1.0
    cfg_drop_prob: float = 0.1
    ema_beta: float = 0.9999
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("lr and batch_size must be positive, iterations non-negative")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ValueError("cfg_drop_prob must lie in [0, 1]")
        if not 0.0 <= self.ema_beta < 1.0:
            raise ValueError("ema_beta must lie in [0, 1)")
        if self.lr_decay_every < 1 or self.grad_clip_norm <= 0:
            raise ValueError("lr_decay_every and grad_clip_norm must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.lr * config.lr_decay_factor ** (iteration // config.lr_decay_every)


# -- EMA -----------------------------------------------------------------------


@dataclass
class EMAState:
    """Shadow parameters v_t = beta v_{t-1} + (1 - beta) theta_t, starting from v_0 = 0."""

    beta: float
    shadow: dict[str, torch.Tensor]
    update_count: int = 0

    @classmethod
    def zeros_like(cls, named_params, beta: float) -> "EMAState":
        return cls(beta, {n: torch.zeros_like(p.detach()) for n, p in named_params})

    def corrected(self) -> dict[str, torch.Tensor]:
        """Bias-corrected view v_t / (1 - beta^t)."""
        if self.update_count == 0:
            return {n: v.clone() for n, v in self.shadow.items()}
        denom = 1.0 - self.beta ** self.update_count
        return {n: v / denom for n, v in self.shadow.items()}


@torch.no_grad()
def ema_update(state: EMAState, named_params) -> EMAState:
    params = dict(named_params)
    if params.keys() != state.shadow.keys():
        raise ValueError("EMA shadow and model parameters have different names")
    for name, v in state.shadow.items():
        p = params[name].detach()
        if p.shape != v.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(v.shape)}")
        v.mul_(state.beta).add_(p, alpha=1.0 - state.beta)
    state.update_count += 1
    return state


# -- gradients -------------------------------------------------------------------


@torch.no_grad()
def clip_gradients(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [g for g in grads if g is not None]
    norm = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient norm")
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g.mul_(scale)
    return norm


# -- data --------------------------------------------------------------------------


@dataclass
class TrainBatch:
    x0: torch.Tensor  # (B, F, M) normalized
    mask: torch.Tensor  # (B, F) bool
    token_ids: torch.Tensor  # (B, L) long


class MotionDataset:
    """Normalized, padded motions and their token ids, ready for batching."""

    def __init__(
        self,
        motions: Sequence[MotionSequence],
        vocab: Vocabulary,
        normalizer: Normalizer,
        max_tokens: int,
        dtype=torch.float32,
    ):
        if not motions:
            raise ValueError("empty dataset")
        self.motions = list(motions)
        self.normalizer = normalizer
        longest = max(m.n_valid for m in motions)
        feats, masks = pad_and_mask(motions, longest)
        feats = normalizer.normalize(feats) * masks[..., None]
        self.features = torch.tensor(feats, dtype=dtype)
        self.masks = torch.tensor(masks)
        self.lengths = masks.sum(1)
        self.token_ids = torch.tensor([vocab.encode(m.label or (), max_tokens) for m in motions])

    def __len__(self):
        return len(self.motions)

    def batch(self, indices) -> TrainBatch:
        idx = torch.as_tensor(np.asarray(indices))
        n = int(self.lengths[np.asarray(indices)].max())
        return TrainBatch(self.features[idx, :n], self.masks[idx, :n], self.token_ids[idx])


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(mean over all valid entries, per-sample means). Padded frames contribute nothing."""
    m = mask[..., None].to(pred.dtype)
    sq = (pred - target).pow(2) * m
    counts = m.sum((1, 2)) * pred.shape[-1]
    per_sample = sq.sum((1, 2)) / counts.clamp(min=1)
    return sq.sum() / (counts.sum() * 1.0).clamp(min=1), per_sample


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float
    dropped: torch.Tensor


def _step_generator(seed: int, iteration: int) -> torch.Generator:
    # one independent stream per (seed, iteration) so a resumed run replays exactly
    return torch.Generator().manual_seed(int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0]))


def diffusion_loss(model, batch: TrainBatch, schedule: NoiseSchedule, config: TrainConfig, gen: torch.Generator):
    b = batch.x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=gen)
    eps = torch.randn(batch.x0.shape, generator=gen, dtype=batch.x0.dtype)
    drop = torch.rand(b, generator=gen, dtype=torch.float64) < config.cfg_drop_prob
    x_t = q_sample(batch.x0, t.numpy(), eps, schedule) * batch.mask[..., None].to(eps.dtype)
    cond = model.encode_condition(batch.token_ids).with_null(drop)
    pred = model(x_t, t.to(torch.float64), cond, batch.mask)
    loss, per_sample = masked_mse(pred, batch.x0, batch.mask)
    bad = ~torch.isfinite(per_sample)
    if bad.any():
        raise FloatingPointError(f"non-finite loss for sample {int(bad.nonzero()[0, 0])} of the batch")
    return loss, drop


def training_step(
    batch: TrainBatch,
    model: CondUNet1D,
    schedule: NoiseSchedule,
    config: TrainConfig,
    optimizer: torch.optim.Optimizer,
    iteration: int,
    ema: EMAState | None = None,
) -> StepResult:
    gen = _step_generator(config.seed, iteration)
    torch.manual_seed(int(torch.randint(0, 2**62, (1,), generator=gen)))  # dropout masks
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss, drop = diffusion_loss(model, batch, schedule, config, gen)
    loss.backward()
    norm = clip_gradients([p.grad for p in model.parameters()], config.grad_clip_norm)
    lr = lr_at(iteration, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    if ema is not None:
        ema_update(ema, model.named_parameters())
    return StepResult(loss.item(), norm, lr, drop)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.lr, betas=(0.9, 0.999), weight_decay=config.weight_decay)


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    rng = np.random.default_rng([seed, iteration, 1])
    return rng.choice(n, size=batch_size, replace=n < batch_size)


# -- checkpoints ---------------------------------------------------------------------


@dataclass
class Checkpoint:
    model: CondUNet1D
    schedule: NoiseSchedule
    normalizer: Normalizer
    spec: RepresentationSpec
    vocab: Vocabulary
    skeleton: Skeleton | None = None
    train_config: TrainConfig = field(default_factory=TrainConfig)
    ema: EMAState | None = None
    optimizer: torch.optim.AdamW | None = None
    iteration: int = 0
    view: str = "raw"
    fps: float = 20.0


def _write_group(path: Path, tensors: dict[str, torch.Tensor]) -> list[dict]:
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, t in tensors.items():
            data = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            fh.write(data)
            entries.append({"name": name, "shape": list(t.shape), "offset": offset, "bytes": len(data)})
            offset += len(data)
    return entries


def _read_group(path: Path, entries: list[dict]) -> dict[str, torch.Tensor]:
    raw = path.read_bytes()
    out = {}
    for e in entries:
        end = e["offset"] + e["bytes"]
        if end > len(raw):
            raise ValueError(f"{path.name}: tensor {e['name']} needs bytes up to {end}, file has {len(raw)}")
        arr = np.frombuffer(raw[e["offset"] : end], dtype="<f4").reshape(e["shape"])
        out[e["name"]] = torch.tensor(arr.astype(np.float32))
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Directory with config.json, manifest.json and one float32 blob file per tensor group."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    model = ckpt.model
    groups = {"params": dict(model.named_parameters())}
    if ckpt.ema is not None:
        groups["ema"] = ckpt.ema.shadow
    opt_meta = None
    if ckpt.optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        state, steps = {}, {}
        for p, s in ckpt.optimizer.state.items():
            n = names[id(p)]
            state[f"{n}.exp_avg"] = s["exp_avg"]
            state[f"{n}.exp_avg_sq"] = s["exp_avg_sq"]
            steps[n] = float(s["step"])
        groups["optimizer"] = state
        opt_meta = {"steps": steps, "lr": ckpt.optimizer.param_groups[0]["lr"]}
    manifest = {name: {"file": f"{name}.bin", "tensors": _write_group(path / f"{name}.bin", ts)} for name, ts in groups.items()}
    config = {
        "version": CHECKPOINT_VERSION,
        "denoiser": model.config.to_json(),
        "representation": ckpt.spec.to_json(),
        "normalizer": ckpt.normalizer.to_json(),
        "schedule": ckpt.schedule.to_json(),
        "vocabulary": ckpt.vocab.to_json(),
        "skeleton": ckpt.skeleton.to_json() if ckpt.skeleton is not None else None,
        "train": ckpt.train_config.to_json(),
        "iteration": ckpt.iteration,
        "fps": ckpt.fps,
        "ema": {"beta": ckpt.ema.beta, "update_count": ckpt.ema.update_count} if ckpt.ema else None,
        "optimizer": opt_meta,
    }
    (path / "config.json").write_text(json.dumps(config, indent=1))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path, view: str = "ema", dtype=torch.float32) -> Checkpoint:
    """Load a checkpoint directory. ``view`` selects model weights: ``raw``, ``ema`` (bias-corrected)."""
    if view not in ("raw", "ema"):
        raise ValueError("view must be 'raw' or 'ema'")
    path = Path(path)
    config = json.loads((path / "config.json").read_text())
    if config.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {config.get('version')!r}, expected {CHECKPOINT_VERSION}")
    manifest = json.loads((path / "manifest.json").read_text())
    model = CondUNet1D(DenoiserConfig.from_json(config["denoiser"])).to(dtype)
    params = _read_group(path / manifest["params"]["file"], manifest["params"]["tensors"])
    expected = dict(model.named_parameters())
    missing = sorted(set(expected) - set(params))
    if missing:
        raise ValueError(f"{path}: missing tensors {missing[:5]}")
    ema = None
    if config["ema"] is not None and "ema" in manifest:
        shadow = _read_group(path / manifest["ema"]["file"], manifest["ema"]["tensors"])
        ema = EMAState(config["ema"]["beta"], {n: v.to(dtype) for n, v in shadow.items()}, config["ema"]["update_count"])
    if view == "ema" and ema is None:
        raise ValueError(f"{path}: no EMA weights stored")
    weights = ema.corrected() if view == "ema" else params
    with torch.no_grad():
        for n, p in expected.items():
            if tuple(weights[n].shape) != tuple(p.shape):
                raise ValueError(f"{path}: tensor {n} has shape {tuple(weights[n].shape)}, model expects {tuple(p.shape)}")
            p.copy_(weights[n])
    train_config = TrainConfig(**config["train"])
    optimizer = None
    if config["optimizer"] is not None and view == "raw":
        optimizer = make_optimizer(model, train_config)
        state = _read_group(path / manifest["optimizer"]["file"], manifest["optimizer"]["tensors"])
        for n, p in model.named_parameters():
            if n in config["optimizer"]["steps"]:
                optimizer.state[p] = {
                    "step": torch.tensor(config["optimizer"]["steps"][n]),
                    "exp_avg": state[f"{n}.exp_avg"].to(dtype),
                    "exp_avg_sq": state[f"{n}.exp_avg_sq"].to(dtype),
                }
        for group in optimizer.param_groups:
            group["lr"] = config["optimizer"]["lr"]
    skeleton = Skeleton.from_json(config["skeleton"]) if config.get("skeleton") else None
    return Checkpoint(
        model=model,
        schedule=NoiseSchedule.from_json(config["schedule"]),
        normalizer=Normalizer.from_json(config["normalizer"]),
        spec=RepresentationSpec.from_json(config["representation"]),
        vocab=Vocabulary.from_json(config["vocabulary"]),
        skeleton=skeleton,
        train_config=train_config,
        ema=ema,
        optimizer=optimizer,
        iteration=config["iteration"],
        view=view,
        fps=config.get("fps", 20.0),
    )


# -- loop ------------------------------------------------------------------------------


def train(
    ckpt: Checkpoint,
    data: MotionDataset,
    iterations: int | None = None,
    metrics_path=None,
    callback: Callable[[int, StepResult], None] | None = None,
) -> list[float]:
    """Run the training loop from ``ckpt.iteration``; mutates ``ckpt`` and returns the losses."""
    config = ckpt.train_config
    model = ckpt.model
    if ckpt.optimizer is None:
        ckpt.optimizer = make_optimizer(model, config)
    if ckpt.ema is None:
        ckpt.ema = EMAState.zeros_like(model.named_parameters(), config.ema_beta)
    stop = config.iterations if iterations is None else ckpt.iteration + iterations
    log = open(metrics_path, "a") if metrics_path is not None else None
    losses = []
    try:
        while ckpt.iteration < stop:
            it = ckpt.iteration
            start = time.perf_counter()
            batch = data.batch(batch_indices(len(data), config.batch_size, config.seed, it))
            result = training_step(batch, model, ckpt.schedule, config, ckpt.optimizer, it, ckpt.ema)
            ckpt.iteration += 1
            losses.append(result.loss)
            if log is not None:
                wall_ms = (time.perf_counter() - start) * 1e3
                log.write(json.dumps({"iteration": it, "loss": result.loss, "lr": result.lr,
                                      "grad_norm": result.grad_norm, "wall_ms": round(wall_ms, 3)}) + "\n")
            if callback is not None:
                callback(it, result)
    finally:
        if log is not None:
            log.close()
    model.eval()
    return losses


def init_checkpoint(
    motions: Sequence[MotionSequence],
    vocab: Vocabulary,
    spec: RepresentationSpec,
    skeleton: Skeleton | None = None,
    train_config: TrainConfig = TrainConfig(),
    schedule: NoiseSchedule | None = None,
    **denoiser_kwargs,
) -> tuple[Checkpoint, MotionDataset]:
    """Fresh model, normalizer and dataset for ``motions``; weights seeded from ``train_config.seed``."""
    from .schedule import linear_beta_schedule

    torch.manual_seed(train_config.seed)
    config = DenoiserConfig(feature_dim=spec.feature_dim, vocab_size=len(vocab), **denoiser_kwargs)
    model = CondUNet1D(config)
    normalizer = Normalizer.fit(motions)
    ckpt = Checkpoint(
        model, schedule or linear_beta_schedule(), normalizer, spec, vocab, skeleton, train_config,
        fps=motions[0].fps,
    )
    return ckpt, MotionDataset(motions, vocab, normalizer, config.max_tokens)
