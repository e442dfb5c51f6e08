"""
Training the diffusion path on a two-mode toy set
=================================================

Every 4x4 image is flat grey at either -0.5 or +0.5 (plus a little noise), each
mode with probability one half. A small ViT learns to predict the noise, and
its samples should land on the two modes in equal proportion.

About 30 seconds on one core. Run with ``python demos/generative_toy.py``.
"""

import time

import numpy as np

from hybvit.data import make_synthetic
from hybvit.diffusion import make_schedule, vlb_terms
from hybvit.sampling import SampleRequest, sample
from hybvit.training import TrainConfig, Trainer, new_state
from hybvit.vit import ViT, ViTConfig

data = make_synthetic("two-gaussians", 1024, seed=0, H=4, C=1)
held_out = make_synthetic("two-gaussians", 64, seed=99, H=4, C=1).model_scale(dtype=np.float64)

vit = ViTConfig(image_size=4, channels=1, patch_size=2, dim=32, depth=2, heads=4, mlp_ratio=2.0,
                num_classes=2, time_embed_dim=32)
cfg = TrainConfig(mode="genvit", lr=0.1, epochs=10, warmup_epochs=1, batch_size=64, repeat_aug=1,
                  iters_per_epoch=500, augment="none", timesteps=100, seed=0)
state = new_state(ViT(vit, seed=0), cfg)
schedule = make_schedule(cfg.schedule, cfg.timesteps)
print(f"{state.model.num_params()} parameters, {cfg.epochs * cfg.iters_per_epoch} steps")

# %%
# Track the bound on held-out images as training goes.
start = time.perf_counter()
for st in Trainer(state, data).run(checkpoint_every=1000):
    bpd = vlb_terms(schedule, st.model, held_out, np.random.default_rng(7)).bits_per_dim.mean()
    print(f"  step {st.step:5d}  noise loss {st.running['noise']:.3f}  held-out {bpd:.2f} bits/dim"
          f"  ({time.perf_counter() - start:.0f}s)")

# %%
# Draw a thousand images and look at where their average grey level sits.
x = sample(state.model, schedule, SampleRequest(count=1000, seed=0))
level = x.reshape(len(x), -1).mean(axis=1)
upper = level > 0
print(f"\nlower mode {level[~upper].mean():+.3f}, upper mode {level[upper].mean():+.3f}, "
      f"share of upper {upper.mean():.3f}")
hist, edges = np.histogram(level, bins=20, range=(-1, 1))
for h, e in zip(hist, edges):
    print(f"  {e:+.1f} {'#' * int(h // 10)}")
