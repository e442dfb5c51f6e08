"""Ancestral sampling from the reverse process."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .diffusion import NoiseSchedule, _eps_fn, mu_from_eps, predict_x0, posterior_mean


@dataclass
class SampleRequest:
    count: int = 16
    seed: int = 0
    x_T: np.ndarray | None = None
    dump_every: int = 0  # keep x_t every k steps (0: off)
    clip_x0: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ContractError("count must be >= 1")


def p_sample_step(model, schedule: NoiseSchedule, xt, t: int, rng=None, noise=None,
                  clip_x0: bool = False):
    """x_{t-1} = mu_theta(x_t, t) + sqrt(beta_tilde_t) z, with z = 0 at t = 1.

    Pass either a Generator ``rng`` or a pre-drawn ``noise`` array.
    """
    if not 1 <= t <= schedule.T:
        raise ContractError(f"timestep {t} out of range 1..{schedule.T}")
    xt = np.asarray(xt)
    tt = np.full(xt.shape[0], t, dtype=np.int64)
    eps_hat = np.asarray(_eps_fn(model)(xt, tt), dtype=np.float64)
    if clip_x0:
        x0_hat = np.clip(predict_x0(schedule, xt, tt, eps_hat), -1.0, 1.0)
        mean = posterior_mean(schedule, x0_hat, xt.astype(np.float64), tt)
    else:
        mean = mu_from_eps(schedule, xt.astype(np.float64), tt, eps_hat)
    if t == 1:
        return mean
    if noise is None:
        if rng is None:
            raise ContractError("p_sample_step needs rng or noise for t > 1")
        noise = rng.standard_normal(xt.shape)
    return mean + np.sqrt(schedule.beta_tilde[t]) * noise


def _image_shape(model) -> tuple:
    cfg = getattr(model, "config", None)
    if cfg is None:
        raise ContractError("model has no config; pass request.x_T to fix the image shape")
    return (cfg.image_size, cfg.image_size, cfg.channels)


def _run_chains(model, schedule, chain_ids, seed, x_T, dump_every, clip_x0, shape):
    rngs = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(i),))) for i in chain_ids]
    if x_T is None:
        x = np.stack([r.standard_normal(shape) for r in rngs])
    else:
        x = np.asarray(x_T, np.float64)
    trajectory = {}
    for t in range(schedule.T, 0, -1):
        noise = None if t == 1 else np.stack([r.standard_normal(shape) for r in rngs])
        x = p_sample_step(model, schedule, x, t, noise=noise, clip_x0=clip_x0)
        if dump_every and ((t - 1) % dump_every == 0):
            trajectory[t - 1] = x.copy()
    return x, trajectory


def sample(model, schedule: NoiseSchedule, request: SampleRequest, return_trajectory: bool = False):
    """Run ``request.count`` chains from x_T ~ N(0, I) down to x_0 and clamp to [-1, 1].

    Chain ``i`` draws all its noise from ``SeedSequence(seed, spawn_key=(i,))``,
    so results do not depend on how chains are split across threads.
    """
    shape = _image_shape(model) if request.x_T is None else tuple(np.shape(request.x_T)[1:])
    if request.x_T is not None and len(request.x_T) != request.count:
        raise ContractError("x_T must hold exactly `count` images")
    ids = np.arange(request.count)
    threads = max(1, int(request.threads))
    chunks = np.array_split(ids, min(threads, request.count))

    def work(chunk):
        xT = None if request.x_T is None else np.asarray(request.x_T)[chunk]
        return _run_chains(model, schedule, chunk, request.seed, xT, request.dump_every,
                           request.clip_x0, shape)

    if threads == 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, chunks))
    images = np.clip(np.concatenate([r[0] for r in results]), -1.0, 1.0)
    if not return_trajectory:
        return images
    traj = {k: np.concatenate([r[1][k] for r in results]) for k in results[0][1]}
    return images, traj
