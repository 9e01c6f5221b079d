"""CondUNet1D: a conditioned Conv1D UNet predicting clean motion from noisy motion.

Tensors inside the network use the Conv1d layout (batch, channels, frames); the
public ``forward`` takes (batch, frames, features) like the motion arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class DenoiserConfig:
    feature_dim: int
    vocab_size: int
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 2)
    kernel_size: int = 3
    groups: int = 8
    attention_heads: int = 4
    dropout: float = 0.1
    text_latent_dim: int = 64
    time_latent_dim: int = 128
    max_tokens: int = 8
    text_layers: int = 4
    text_heads: int = 4
    max_frames: int = 196

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        if not self.channel_multipliers or min(self.channel_multipliers) < 1:
            raise ValueError("channel_multipliers must be non-empty and positive")
        for ch in self.channels:
            if ch % self.groups or ch % self.attention_heads:
                raise ValueError(
                    f"channel width {ch} must be divisible by groups={self.groups} "
                    f"and attention_heads={self.attention_heads}"
                )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.text_latent_dim % self.text_heads:
            raise ValueError("text_latent_dim must be divisible by text_heads")
        if self.time_latent_dim % 2:
            raise ValueError("time_latent_dim must be even")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.feature_dim < 1 or self.vocab_size < 2:
            raise ValueError("feature_dim must be >= 1 and vocab_size >= 2")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    @property
    def frame_multiple(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    def to_json(self) -> dict:
        data = asdict(self)
        data["channel_multipliers"] = list(self.channel_multipliers)
        return data

    @classmethod
    def from_json(cls, data: dict) -> "DenoiserConfig":
        return cls(**data)


@dataclass
class ConditionEmbedding:
    """Batched text condition. Null rows have a zero sentence and no unmasked tokens."""

    sentence: torch.Tensor  # (B, D)
    tokens: torch.Tensor  # (B, L, D)
    token_mask: torch.Tensor  # (B, L) bool
    is_null: torch.Tensor  # (B,) bool

    @classmethod
    def null(cls, batch: int, length: int, dim: int, dtype=torch.float32) -> "ConditionEmbedding":
        return cls(
            torch.zeros(batch, dim, dtype=dtype),
            torch.zeros(batch, length, dim, dtype=dtype),
            torch.zeros(batch, length, dtype=torch.bool),
            torch.ones(batch, dtype=torch.bool),
        )

    @property
    def batch_size(self) -> int:
        return self.sentence.shape[0]

    def to(self, dtype) -> "ConditionEmbedding":
        return ConditionEmbedding(self.sentence.to(dtype), self.tokens.to(dtype), self.token_mask, self.is_null)

    def select(self, index) -> "ConditionEmbedding":
        return ConditionEmbedding(
            self.sentence[index], self.tokens[index], self.token_mask[index], self.is_null[index]
        )

    def with_null(self, drop: torch.Tensor) -> "ConditionEmbedding":
        """Replace rows where ``drop`` is true by the null condition."""
        keep = ~drop
        return ConditionEmbedding(
            self.sentence * keep[:, None].to(self.sentence.dtype),
            self.tokens * keep[:, None, None].to(self.tokens.dtype),
            self.token_mask & keep[:, None],
            self.is_null | drop,
        )

    @staticmethod
    def cat(items: list["ConditionEmbedding"]) -> "ConditionEmbedding":
        return ConditionEmbedding(
            torch.cat([c.sentence for c in items]),
            torch.cat([c.tokens for c in items]),
            torch.cat([c.token_mask for c in items]),
            torch.cat([c.is_null for c in items]),
        )


# -- functional pieces ---------------------------------------------------------


def sinusoidal_encoding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """[sin(t w_0), ..., sin(t w_{d/2-1}), cos(t w_0), ...] with w_i = 10000^(-i/(d/2))."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def film_modulate(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """x * (1 + scale) + shift with one (scale, shift) per sample and channel, shared by all frames."""
    return x * (1 + scale[..., None]) + shift[..., None]


def groupnorm_featurewise(
    x: torch.Tensor,
    groups: int,
    mask: torch.Tensor | None = None,
    weight: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Group normalization with statistics taken per frame over each channel group.

    No statistic crosses the frame axis, so padded frames cannot leak into valid
    ones; they are zeroed on output.
    """
    b, c, n = x.shape
    if c % groups:
        raise ValueError(f"{c} channels are not divisible into {groups} groups")
    g = x.reshape(b, groups, c // groups, n)
    mean = g.mean(dim=2, keepdim=True)
    var = g.var(dim=2, unbiased=False, keepdim=True)
    out = ((g - mean) / torch.sqrt(var + eps)).reshape(b, c, n)
    if weight is not None:
        out = out * weight[:, None]
    if bias is not None:
        out = out + bias[:, None]
    if mask is not None:
        out = out * mask[:, None, :].to(out.dtype)
    return out


def _phi(u: torch.Tensor) -> torch.Tensor:
    return F.elu(u) + 1


def linear_attention_weights(q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Explicit (..., frames, keys) weights of the kernelized attention; for inspection only."""
    scores = _phi(q) @ (_phi(k) * key_mask[..., None].to(k.dtype)).transpose(-1, -2)
    return scores / scores.sum(-1, keepdim=True)


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """phi(Q) (phi(K)^T V) / (phi(Q) phi(K)^T 1), phi = elu + 1, masked keys zeroed.

    q: (B, H, F, d); k, v: (B, H, L, d); key_mask: (B, L) broadcast over heads.
    Rows without any unmasked key return zeros.
    """
    km = key_mask[:, None, :, None].to(k.dtype)
    fk = _phi(k) * km
    fq = _phi(q)
    kv = fk.transpose(-1, -2) @ v  # (B, H, d, d)
    z = fq @ fk.sum(-2)[..., None]  # (B, H, F, 1)
    return (fq @ kv) / torch.where(z > 0, z, torch.ones_like(z))


class FeaturewiseGroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int):
        super().__init__()
        self.groups = groups
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, mask=None):
        return groupnorm_featurewise(x, self.groups, mask, self.weight, self.bias)


class ResidualLinearCrossAttention(nn.Module):
    """Motion frames query word-level tokens; the result is added back to the input."""

    def __init__(self, channels: int, text_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(text_dim, channels)
        self.v = nn.Linear(text_dim, channels)
        self.out = nn.Linear(channels, channels)

    def attend(self, x: torch.Tensor, cond: ConditionEmbedding) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (output, all_masked). ``all_masked`` marks non-null rows without any usable token."""
        b, c, n = x.shape
        h, d = self.heads, c // self.heads
        q = self.q(x.transpose(1, 2)).reshape(b, n, h, d).transpose(1, 2)
        k = self.k(cond.tokens).reshape(b, -1, h, d).transpose(1, 2)
        v = self.v(cond.tokens).reshape(b, -1, h, d).transpose(1, 2)
        att = linear_attention(q, k, v, cond.token_mask).transpose(1, 2).reshape(b, n, c)
        delta = self.out(att).transpose(1, 2)
        has_keys = cond.token_mask.any(-1)
        active = has_keys & ~cond.is_null
        out = torch.where(active[:, None, None], x + delta, x)
        return out, ~has_keys & ~cond.is_null

    def forward(self, x, cond):
        return self.attend(x, cond)[0]


def residual_linear_cross_attention(x, cond: ConditionEmbedding, layer: ResidualLinearCrossAttention):
    return layer.attend(x, cond)


class ConvBlock(nn.Module):
    """GN -> SiLU -> conv -> FiLM -> GN -> SiLU -> dropout -> conv, residual, then cross-attention."""

    def __init__(self, cin: int, cout: int, config: DenoiserConfig):
        super().__init__()
        k = config.kernel_size
        self.norm1 = FeaturewiseGroupNorm(config.groups, cin) if cin % config.groups == 0 else None
        self.conv1 = nn.Conv1d(cin, cout, k, padding=k // 2)
        self.film = nn.Linear(config.time_latent_dim + config.text_latent_dim, 2 * cout)
        self.norm2 = FeaturewiseGroupNorm(config.groups, cout)
        self.dropout = nn.Dropout(config.dropout)
        self.conv2 = nn.Conv1d(cout, cout, k, padding=k // 2)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()
        self.attn = ResidualLinearCrossAttention(cout, config.text_latent_dim, config.attention_heads)

    def forward(self, x, mask, film_in, cond):
        m = mask[:, None, :].to(x.dtype)
        h = self.norm1(x, mask) if self.norm1 is not None else x
        h = self.conv1(F.silu(h) * m)
        scale, shift = self.film(film_in).chunk(2, dim=-1)
        h = film_modulate(h, scale, shift)
        h = F.silu(self.norm2(h, mask))
        h = self.conv2(self.dropout(h) * m)
        h = (h + self.skip(x)) * m
        return self.attn(h, cond) * m


def conv_block(x, mask, film_in, cond, block: ConvBlock):
    return block(x, mask, film_in, cond)


class TimestepEncoder(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        dtype = self.fc1.weight.dtype
        return self.fc2(F.silu(self.fc1(sinusoidal_encoding(t, self.dim).to(dtype))))


class TextEncoder(nn.Module):
    """Token embedding + learned positions + transformer encoder layers."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        d = config.text_latent_dim
        self.vocab_size = config.vocab_size
        self.max_tokens = config.max_tokens
        self.embed = nn.Embedding(config.vocab_size, d, padding_idx=0)
        self.pos = nn.Parameter(torch.randn(config.max_tokens, d) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d, config.text_heads, dim_feedforward=2 * d, dropout=config.dropout,
            activation="gelu", batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, config.text_layers, enable_nested_tensor=False)

    def forward(self, token_ids: torch.Tensor) -> ConditionEmbedding:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] > self.max_tokens:
            raise ValueError(f"{ids.shape[1]} tokens exceed max_tokens={self.max_tokens}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)][0].item()
            raise ValueError(f"unknown token id {bad} (vocab size {self.vocab_size})")
        mask = ids != 0
        empty = ~mask.any(-1)
        # rows with no tokens would make every key masked; let them attend to slot 0
        # and discard the result below
        pad_mask = ~mask
        pad_mask[:, 0] &= ~empty
        h = self.embed(ids) + self.pos[: ids.shape[1]].to(self.embed.weight.dtype)
        h = self.encoder(h, src_key_padding_mask=pad_mask)
        mf = mask[..., None].to(h.dtype)
        tokens = h * mf
        count = mf.sum(1).clamp(min=1)
        sentence = tokens.sum(1) / count
        return ConditionEmbedding(sentence, tokens, mask, empty)


class CondUNet1D(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chans = config.channels
        tdim = config.time_latent_dim
        self.time = TimestepEncoder(tdim)
        self.text = TextEncoder(config)
        self.null_sentence = nn.Parameter(torch.zeros(config.text_latent_dim))
        self.inp = nn.Conv1d(config.feature_dim, config.base_channels, 1)
        self.down_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = config.base_channels
        for i, ch in enumerate(chans):
            self.down_blocks.append(ConvBlock(prev, ch, config))
            if i < len(chans) - 1:
                self.downs.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        self.mid = ConvBlock(prev, prev, config)
        self.ups = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(len(chans))):
            ch = chans[i]
            if i < len(chans) - 1:
                self.ups.append(nn.Conv1d(chans[i + 1], ch, 3, padding=1))
            self.up_blocks.append(ConvBlock(2 * ch, ch, config))
        self.out_norm = FeaturewiseGroupNorm(config.groups, config.base_channels)
        self.out = nn.Conv1d(config.base_channels, config.feature_dim, 1)

    def encode_condition(self, token_ids) -> ConditionEmbedding:
        return self.text(token_ids)

    def null_condition(self, batch: int) -> ConditionEmbedding:
        dtype = self.null_sentence.dtype
        return ConditionEmbedding.null(batch, self.config.max_tokens, self.config.text_latent_dim, dtype)

    def forward(self, x_t: torch.Tensor, t, cond: ConditionEmbedding, mask: torch.Tensor | None = None):
        """Predict x0 from x_t (B, F, M). ``t`` may be fractional; ``mask`` marks valid frames."""
        b, n, m = x_t.shape
        cfg = self.config
        if m != cfg.feature_dim:
            raise ValueError(f"expected feature_dim {cfg.feature_dim}, got {m}")
        if n > cfg.max_frames:
            raise ValueError(f"{n} frames exceed max_frames={cfg.max_frames}")
        if cond.batch_size != b:
            raise ValueError("condition batch does not match x_t")
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool)
        t = torch.as_tensor(t, dtype=torch.float64).expand(b)
        mult = cfg.frame_multiple
        pad = (-n) % mult
        x = F.pad(x_t.transpose(1, 2), (0, pad))
        mk = F.pad(mask, (0, pad))
        sentence = torch.where(cond.is_null[:, None], self.null_sentence.expand(b, -1), cond.sentence)
        film_in = torch.cat([self.time(t), sentence.to(x.dtype)], dim=-1)

        masks = [mk]
        h = self.inp(x) * mk[:, None, :].to(x.dtype)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, masks[-1], film_in, cond)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
                nxt = masks[-1][:, ::2]
                h = h * nxt[:, None, :].to(h.dtype)
                masks.append(nxt)
        h = self.mid(h, masks[-1], film_in, cond)
        for j, block in enumerate(self.up_blocks):
            level = len(skips) - 1 - j
            if j > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j - 1](h) * masks[level][:, None, :].to(h.dtype)
            h = block(torch.cat([h, skips[level]], dim=1), masks[level], film_in, cond)
        h = F.silu(self.out_norm(h, mk))
        out = self.out(h) * mk[:, None, :].to(h.dtype)
        return out[:, :, :n].transpose(1, 2)


def denoise(model: CondUNet1D, x_t, t, cond, mask=None):
    return model(x_t, t, cond, mask)


def expected_parameter_count(config: DenoiserConfig) -> int:
    """Closed-form parameter count of ``CondUNet1D(config)``."""
    k, g = config.kernel_size, config.groups
    tdim, d = config.time_latent_dim, config.text_latent_dim
    cond_in = tdim + d

    def conv(cin, cout, kk):
        return cin * cout * kk + cout

    def lin(i, o):
        return i * o + o

    def block(cin, cout):
        n = conv(cin, cout, k) + lin(cond_in, 2 * cout) + 2 * cout + conv(cout, cout, k)
        n += 2 * cin if cin % g == 0 else 0
        n += conv(cin, cout, 1) if cin != cout else 0
        n += lin(cout, cout) * 2 + lin(d, cout) * 2  # q, out, k, v
        return n

    text_layer = 4 * d * d + 4 * d + lin(d, 2 * d) + lin(2 * d, d) + 4 * d
    total = 2 * lin(tdim, tdim)
    total += config.vocab_size * d + config.max_tokens * d + config.text_layers * text_layer
    total += d  # null sentence
    chans = config.channels
    total += conv(config.feature_dim, config.base_channels, 1)
    prev = config.base_channels
    for i, ch in enumerate(chans):
        total += block(prev, ch)
        if i < len(chans) - 1:
            total += conv(ch, ch, 3)
        prev = ch
    total += block(prev, prev)
    for i in reversed(range(len(chans))):
        if i < len(chans) - 1:
            total += conv(chans[i + 1], chans[i], 3)
        total += block(2 * chans[i], chans[i])
    total += 2 * config.base_channels + conv(config.base_channels, config.feature_dim, 1)
    return total


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
