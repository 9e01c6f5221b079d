"""
Training a small motion denoiser
================================

A short end-to-end run: synthesize labelled motions, fit a small conditioned
UNet for a few hundred iterations, then sample with guidance and see what the
inference tricks save.

Takes a couple of minutes on one CPU core.
"""

# %%
import numpy as np
import torch

from mofusion.footskate import skate_ratio
from mofusion.motion import features_to_positions
from mofusion.sampling import PromptCache, SamplerConfig, generate
from mofusion.skeleton import default_skeleton
from mofusion.synth import DEFAULT_CLASSES, SynthConfig, default_vocabulary, synth_dataset
from mofusion.training import TrainConfig, init_checkpoint, train

torch.manual_seed(0)
skeleton = default_skeleton()
motions = synth_dataset(SynthConfig(DEFAULT_CLASSES, samples_per_class=16, length_range=(32, 48), seed=0))
print(len(motions), "motions;", "feature dim", motions[0].spec.feature_dim)
print("labels:", sorted({" ".join(m.label) for m in motions}))

# %% [markdown]
# The denoiser predicts clean motion from a noised copy. We keep it small so
# the loop finishes quickly.

# %%
ckpt, data = init_checkpoint(
    motions, default_vocabulary(), motions[0].spec, skeleton,
    TrainConfig(iterations=400, batch_size=16, ema_beta=0.99),
    base_channels=32, channel_multipliers=(1, 2), text_layers=2, time_latent_dim=64, text_latent_dim=32,
)
losses = train(ckpt, data)
print("loss: first 20 {:.3f}, last 20 {:.3f}".format(np.mean(losses[:20]), np.mean(losses[-20:])))

# %% [markdown]
# Sampling: 10 solver steps with classifier-free guidance. Encoding the prompt
# once (the cache) and stacking the conditional and unconditional passes into
# one batch (parallel CFG) each cut a different counter.

# %%
prompt, frames = [("walk", "forward")], [40]
for label, cfg, cache, use_cache in [
    ("ddpm, 1000 steps", SamplerConfig(kind="ddpm", steps=1000, batched_cfg=False), None, False),
    ("solver, 10 steps", SamplerConfig(batched_cfg=False), None, False),
    ("+ prompt cache", SamplerConfig(batched_cfg=False), PromptCache(), True),
    ("+ parallel cfg", SamplerConfig(), PromptCache(), True),
]:
    (motion,), report = generate(ckpt, prompt, frames, cfg, cache, use_cache=use_cache)
    print(f"{label:18s} denoiser {report.denoiser_calls:4d}  network {report.network_calls:4d}  "
          f"encoder {report.encoder_calls:4d}  {report.seconds:.2f}s")

# %%
pos = features_to_positions(motion.valid_features(), motion.spec, skeleton)
print("pelvis travel (m):", np.round(pos[-1, 0] - pos[0, 0], 2))
print("skate ratio:", round(skate_ratio(pos, skeleton, motion.fps), 3))
