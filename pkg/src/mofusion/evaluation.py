"""Metric suite on features from small contrastive motion/text encoders."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .footskate import skate_ratio  # noqa: F401  (re-exported metric)
from .motion import MotionSequence, Normalizer, pad_and_mask
from .synth import Vocabulary

FEATURE_DIM = 32


# -- metrics ------------------------------------------------------------------


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(real: np.ndarray, gen: np.ndarray, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    Tr (S_r S_g)^(1/2) is evaluated as Tr (S_r^(1/2) S_g S_r^(1/2))^(1/2), which is
    symmetric PSD; negative eigenvalues from round-off are clamped to zero.
    """
    real = np.asarray(real, np.float64)
    gen = np.asarray(gen, np.float64)
    d = real.shape[1]
    if real.shape[0] < d + 1 or gen.shape[0] < d + 1:
        raise ValueError(f"need at least {d + 1} samples per side for {d}-dim features")
    mu_r, mu_g = real.mean(0), gen.mean(0)
    cov_r, cov_g = np.cov(real, rowvar=False), np.cov(gen, rowvar=False)
    if min(np.linalg.eigvalsh(cov_r).min(), np.linalg.eigvalsh(cov_g).min()) < 1e-12:
        warnings.warn(f"singular covariance; adding ridge {ridge}", RuntimeWarning)
        cov_r = cov_r + ridge * np.eye(d)
        cov_g = cov_g + ridge * np.eye(d)
    root = _sqrtm_psd(cov_r)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(root @ cov_g @ root), 0, None)).sum()
    value = float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2 * cross)
    return max(value, 0.0)


def r_precision(
    motion_features: np.ndarray,
    text_features: np.ndarray,
    top_k: int = 3,
    pool_size: int = 32,
    seed: int = 0,
    text_keys: Sequence | None = None,
) -> np.ndarray:
    """Top-1..top_k retrieval accuracy of each motion's own text among distractor texts.

    Distractors are distinct texts other than the true one (``text_keys`` groups
    samples sharing a text); the pool shrinks when fewer distinct texts exist.
    Ranks count distractors with strictly higher cosine similarity.
    """
    m = np.asarray(motion_features, np.float64)
    t = np.asarray(text_features, np.float64)
    n = m.shape[0]
    if t.shape[0] != n:
        raise ValueError("motion and text features must be paired")
    keys = list(range(n)) if text_keys is None else list(text_keys)
    first = {}
    for i, k in enumerate(keys):
        first.setdefault(k, i)
    uniq = list(first)
    rep = np.array([first[k] for k in uniq])
    key_index = np.array([uniq.index(k) for k in keys])
    mn = m / np.linalg.norm(m, axis=1, keepdims=True)
    tn = t / np.linalg.norm(t, axis=1, keepdims=True)
    rng = np.random.default_rng(seed)
    hits = np.zeros(top_k)
    n_dis = min(pool_size - 1, len(uniq) - 1)
    for i in range(n):
        others = np.delete(np.arange(len(uniq)), key_index[i])
        distract = rep[rng.choice(others, size=n_dis, replace=False)] if n_dis > 0 else np.zeros(0, int)
        true_sim = mn[i] @ tn[i]
        rank = int((tn[distract] @ mn[i] > true_sim).sum())
        hits[rank:] += 1
    return hits / n


def _pairs(n: int, n_pairs: int, rng: np.random.Generator) -> np.ndarray:
    if n < 2:
        raise ValueError("need at least 2 samples")
    if 2 * n_pairs <= n:
        return rng.permutation(n)[: 2 * n_pairs].reshape(n_pairs, 2)
    a = rng.integers(0, n, n_pairs)
    b = (a + rng.integers(1, n, n_pairs)) % n
    return np.stack([a, b], 1)


def diversity(features: np.ndarray, n_pairs: int = 300, seed: int = 0) -> float:
    """Mean L2 distance over random pairs; pairs are disjoint when there are enough samples."""
    f = np.asarray(features, np.float64)
    p = _pairs(len(f), n_pairs, np.random.default_rng(seed))
    return float(np.linalg.norm(f[p[:, 0]] - f[p[:, 1]], axis=1).mean())


def multimodality(groups: Sequence[np.ndarray], n_pairs: int = 10, seed: int = 0) -> float:
    """Mean within-group pair distance, averaged over groups (one group per text)."""
    rng = np.random.default_rng(seed)
    values = []
    for g in groups:
        g = np.asarray(g, np.float64)
        if len(g) < 2:
            continue
        p = _pairs(len(g), min(n_pairs, max(1, len(g) // 2)), rng)
        values.append(np.linalg.norm(g[p[:, 0]] - g[p[:, 1]], axis=1).mean())
    if not values:
        raise ValueError("every group has fewer than 2 samples")
    return float(np.mean(values))


def aits(fn: Callable[[object], object], prompts: Sequence, repetitions: int = 1, warmup: int = 1) -> tuple[float, float]:
    """(mean, std) wall seconds per prompt at batch size 1; warm-up calls are discarded."""
    for p in list(prompts)[:warmup]:
        fn(p)
    times = []
    for _ in range(repetitions):
        for p in prompts:
            start = time.perf_counter()
            fn(p)
            times.append(time.perf_counter() - start)
    return float(np.mean(times)), float(np.std(times))


# -- encoders --------------------------------------------------------------------


class MotionEncoderNet(nn.Module):
    def __init__(self, feature_dim: int, hidden: int = 64, out: int = FEATURE_DIM):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv1d(feature_dim, hidden, 5, padding=2), nn.SiLU(),
            nn.Conv1d(hidden, hidden, 5, padding=2, stride=2), nn.SiLU(),
            nn.Conv1d(hidden, hidden, 3, padding=1), nn.SiLU(),
        )
        self.head = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.SiLU(), nn.Linear(hidden, out))

    def forward(self, x, mask):
        h = self.conv((x * mask[..., None]).transpose(1, 2))
        m = mask[:, ::2][:, : h.shape[-1]].to(h.dtype)[:, None, :]
        mean = (h * m).sum(-1) / m.sum(-1).clamp(min=1)
        peak = (h * m - (1 - m) * 1e4).amax(-1)
        return F.normalize(self.head(torch.cat([mean, peak], -1)), dim=-1)


class TextEncoderNet(nn.Module):
    def __init__(self, vocab_size: int, hidden: int = 64, out: int = FEATURE_DIM):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, hidden, padding_idx=0)
        self.head = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, out))

    def forward(self, ids):
        mask = (ids != 0).to(torch.float32)[..., None]
        h = (self.embed(ids) * mask).sum(1) / mask.sum(1).clamp(min=1)
        return F.normalize(self.head(h), dim=-1)


@dataclass
class EvalEncoders:
    motion: MotionEncoderNet
    text: TextEncoderNet
    normalizer: Normalizer
    vocab: Vocabulary
    max_tokens: int = 8
    max_frames: int = 196

    @property
    def version(self) -> str:
        h = hashlib.sha256()
        for net in (self.motion, self.text):
            for name, p in net.state_dict().items():
                h.update(name.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    @torch.no_grad()
    def encode_motions(self, motions: Sequence[MotionSequence], batch: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(motions), batch):
            chunk = motions[i : i + batch]
            feats, masks = pad_and_mask(chunk, max(m.n_valid for m in chunk))
            x = torch.tensor(self.normalizer.normalize(feats) * masks[..., None], dtype=torch.float32)
            out.append(self.motion(x, torch.tensor(masks)).numpy())
        return np.concatenate(out).astype(np.float64)

    @torch.no_grad()
    def encode_texts(self, labels: Sequence[Sequence[str]]) -> np.ndarray:
        ids = torch.tensor([self.vocab.encode(l, self.max_tokens) for l in labels])
        return self.text(ids).numpy().astype(np.float64)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        torch.save({"motion": self.motion.state_dict(), "text": self.text.state_dict()}, path / "encoders.pt")
        meta = {
            "version": self.version,
            "feature_dim": self.motion.conv[0].in_channels,
            "normalizer": self.normalizer.to_json(),
            "vocabulary": self.vocab.to_json(),
            "max_tokens": self.max_tokens,
        }
        (path / "encoders.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path) -> "EvalEncoders":
        path = Path(path)
        meta = json.loads((path / "encoders.json").read_text())
        vocab = Vocabulary.from_json(meta["vocabulary"])
        enc = cls(MotionEncoderNet(meta["feature_dim"]), TextEncoderNet(len(vocab)),
                  Normalizer.from_json(meta["normalizer"]), vocab, meta["max_tokens"])
        state = torch.load(path / "encoders.pt", weights_only=True)
        enc.motion.load_state_dict(state["motion"])
        enc.text.load_state_dict(state["text"])
        enc.motion.eval()
        enc.text.eval()
        if enc.version != meta["version"]:
            raise ValueError(f"{path}: encoder weights do not match recorded version {meta['version']}")
        return enc


def train_eval_encoders(
    corpus: Sequence[MotionSequence],
    vocab: Vocabulary,
    seed: int = 0,
    iterations: int = 400,
    batch_size: int = 64,
    temperature: float = 0.1,
    max_tokens: int = 8,
) -> EvalEncoders:
    """Contrastive training where every pair sharing a text counts as a positive."""
    labels = [tuple(m.label or ()) for m in corpus]
    if len(set(labels)) < 2:
        raise ValueError("corpus needs at least two distinct labels")
    torch.manual_seed(seed)
    normalizer = Normalizer.fit(corpus)
    enc = EvalEncoders(MotionEncoderNet(corpus[0].feature_dim), TextEncoderNet(len(vocab)), normalizer, vocab, max_tokens)
    feats, masks = pad_and_mask(corpus, max(m.n_valid for m in corpus))
    x_all = torch.tensor(normalizer.normalize(feats) * masks[..., None], dtype=torch.float32)
    m_all = torch.tensor(masks)
    ids_all = torch.tensor([vocab.encode(l, max_tokens) for l in labels])
    key = {l: i for i, l in enumerate(sorted(set(labels)))}
    cls_all = torch.tensor([key[l] for l in labels])
    params = list(enc.motion.parameters()) + list(enc.text.parameters())
    opt = torch.optim.Adam(params, lr=1e-3)
    rng = np.random.default_rng(seed)
    for _ in range(iterations):
        idx = torch.as_tensor(rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False))
        zm = enc.motion(x_all[idx], m_all[idx])
        zt = enc.text(ids_all[idx])
        pos = (cls_all[idx][:, None] == cls_all[idx][None, :]).float()
        logits = zm @ zt.T / temperature
        target = pos / pos.sum(1, keepdim=True)
        loss = -(target * F.log_softmax(logits, 1)).sum(1).mean() - (target.T * F.log_softmax(logits.T, 1)).sum(1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    enc.motion.eval()
    enc.text.eval()
    return enc


def cache_dir() -> Path:
    return Path(os.environ.get("MOFUSION_CACHE_DIR", Path.home() / ".cache" / "mofusion"))


# -- report ------------------------------------------------------------------------

METRICS = ("fid", "r_precision_top1", "r_precision_top2", "r_precision_top3", "diversity",
           "multimodality", "aits_seconds", "skate_ratio")


@dataclass
class MetricsReport:
    values: dict[str, float]
    intervals: dict[str, float] = field(default_factory=dict)  # 95% half-widths
    repetitions: int = 1
    encoder_version: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"values": self.values, "ci95": self.intervals, "repetitions": self.repetitions,
                "encoder_version": self.encoder_version, "extra": self.extra}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        with_ci = self.repetitions > 1
        w.writerow(["metric", "value"] + (["ci95"] if with_ci else []))
        for k, v in self.values.items():
            w.writerow([k, repr(v)] + ([repr(self.intervals.get(k, float("nan")))] if with_ci else []))
        return buf.getvalue()


def _ci(samples: Sequence[float]) -> float:
    s = np.asarray(samples, np.float64)
    return float(1.96 * s.std(ddof=1) / math.sqrt(len(s))) if len(s) > 1 else 0.0


def evaluate(
    encoders: EvalEncoders,
    real: Sequence[MotionSequence],
    generated: Sequence[MotionSequence],
    repetitions: int = 20,
    seed: int = 0,
    multimodal_groups: Sequence[Sequence[MotionSequence]] | None = None,
    skate_values: Sequence[float] | None = None,
    aits_seconds: float | Sequence[float] | None = None,
) -> MetricsReport:
    """Metrics of ``generated`` against ``real``; repetitions redraw pools, pairs and FID bootstraps."""
    real_f = encoders.encode_motions(real)
    gen_f = encoders.encode_motions(generated)
    labels = [tuple(m.label or ()) for m in generated]
    text_f = encoders.encode_texts(labels)
    groups = [encoders.encode_motions(g) for g in multimodal_groups] if multimodal_groups else None
    rows: dict[str, list[float]] = {k: [] for k in METRICS}
    for r in range(repetitions):
        rng = np.random.default_rng([seed, r])
        boot = np.arange(len(gen_f)) if r == 0 else rng.integers(0, len(gen_f), len(gen_f))
        rows["fid"].append(fid(real_f, gen_f[boot]))
        rp = r_precision(gen_f, text_f, 3, seed=seed + r, text_keys=labels)
        for k in range(3):
            rows[f"r_precision_top{k + 1}"].append(float(rp[k]))
        rows["diversity"].append(diversity(gen_f, min(300, len(gen_f) // 2), seed=seed + r))
        if groups:
            rows["multimodality"].append(multimodality(groups, seed=seed + r))
    values = {k: float(np.mean(v)) for k, v in rows.items() if v}
    intervals = {k: _ci(v) for k, v in rows.items() if v}
    if aits_seconds is not None:
        times = np.atleast_1d(np.asarray(aits_seconds, np.float64))
        values["aits_seconds"] = float(times.mean())
        intervals["aits_seconds"] = _ci(times)
    if skate_values is not None:
        values["skate_ratio"] = float(np.mean(skate_values))
        intervals["skate_ratio"] = _ci(skate_values)
    extra = {"real_diversity": diversity(real_f, min(300, len(real_f) // 2), seed=seed)}
    return MetricsReport(values, intervals, repetitions, encoders.version, extra)
