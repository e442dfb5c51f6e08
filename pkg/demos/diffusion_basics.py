"""
The forward process and the variational bound, by hand
=======================================================

A tour of the noise schedule on a single pixel. Nothing is trained here: the
noise predictor is either exact or absent, so every number can be checked
with pencil and paper.

Run with ``python demos/diffusion_basics.py``.
"""

import math

import numpy as np

from hybvit.diffusion import (bits_per_dim, make_schedule, mu_from_eps, posterior_mean, prior_kl, q_sample,
                              q_step, vlb_terms)

# Two schedules with the same number of steps. The cosine one keeps more
# signal in the middle of the chain.
T = 1000
cos, lin = make_schedule("cosine", T), make_schedule("linear", T)
print("signal fraction sqrt(abar_t) at a few t")
for t in (1, 250, 500, 750, 1000):
    print(f"  t={t:4d}  cosine {math.sqrt(cos.alpha_bar[t]):.4f}  linear {math.sqrt(lin.alpha_bar[t]):.4f}")

# %%
# Jumping straight to x_t matches walking there one step at a time.
rng = np.random.default_rng(0)
n, x0, t = 100_000, 0.37, 200
x = np.full(n, x0)
for k in range(1, t + 1):
    x = q_step(cos, x, k, rng.standard_normal(n))
direct = q_sample(cos, np.full(n, x0), t, rng.standard_normal(n))
print(f"\nx_{t} from x0={x0}: closed form mean {math.sqrt(cos.alpha_bar[t]) * x0:.4f}, "
      f"var {1 - cos.alpha_bar[t]:.4f}")
print(f"  chained steps  mean {x.mean():.4f}, var {x.var():.4f}")
print(f"  direct jump    mean {direct.mean():.4f}, var {direct.var():.4f}")

# %%
# The two ways of writing the reverse mean agree once the true noise is known.
x0 = rng.uniform(-1, 1, 8)
eps = rng.standard_normal(8)
ts = rng.integers(1, T + 1, 8)
xt = q_sample(cos, x0, ts, eps)
gap = np.abs(mu_from_eps(cos, xt, ts, eps) - posterior_mean(cos, x0, xt, ts)).max()
print(f"\nreverse mean from eps vs from x0, 64-bit: max gap {gap:.2e}")

# %%
# The bound for an image under a predictor that knows the noise exactly: every
# KL term vanishes and only the decoder and prior terms are left.


class Replay:
    """Returns the same normal draws the bound is about to use."""

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_eps(self, xt, t):
        return self.rng.standard_normal(np.shape(xt))


img = 2 * rng.integers(0, 256, (1, 4, 4, 1)) / 255 - 1
terms = vlb_terms(cos, Replay(5), img, np.random.default_rng(5))
print(f"\nperfect predictor: sum of KL terms {terms.Lt.sum():.1f}, decoder {terms.L0[0]:.3f} nats, "
      f"prior {terms.LT[0]:.2e} nats")
print(f"  total {terms.bits_per_dim[0]:.3f} bits/dim for a 16-pixel image")
print(f"  prior term per pixel at the extremes: {prior_kl(cos, np.array([-1.0, 1.0])).max():.2e} nats")


# %%
# A predictor that always says zero pays for every step.
class Zero:
    def predict_eps(self, xt, t):
        return np.zeros_like(xt)


zero = vlb_terms(cos, Zero(), img, np.random.default_rng(5))
print(f"zero predictor: {float(bits_per_dim(zero.total, 16)[0]):.2f} bits/dim")
