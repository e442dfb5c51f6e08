"""Closed-form DDPM quantities: schedules, forward marginals, posteriors, VLB.

All schedule arrays are float64 and 1-indexed by timestep: index ``t`` of
``beta`` is beta_t, ``beta[0]`` is a NaN placeholder. ``alpha_bar[0] == 1``.

A *noise model* is either an object with a ``predict_eps(x_t, t)`` method or
a plain callable with that signature; ``t`` is an int array of shape (B,).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .autodiff import ContractError, ShapeError

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999
BIN_HALF_WIDTH = 1.0 / 255.0


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    coef_x0: np.ndarray
    coef_xt: np.ndarray

    def check_t(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ContractError(f"timestep out of range 1..{self.T}: {t.min()}..{t.max()}")
        return t

    @property
    def decoder_variance(self) -> float:
        """Variance of the discretised decoder p(x_0 | x_1)."""
        # beta_tilde[1] is 0 because alpha_bar[0] = 1; borrow beta_tilde[2]
        return float(self.beta_tilde[2]) if self.T >= 2 else float(self.beta[1])


def make_schedule(kind: str = "cosine", T: int = 1000) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ContractError(f"T must be a positive integer, got {T}")
    T = int(T)
    beta = np.full(T + 1, np.nan)
    if kind == "linear":
        beta[1:] = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T) if T > 1 else LINEAR_BETA_START
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        abar = f / f[0]
        beta[1:] = np.minimum(1.0 - abar[1:] / abar[:-1], MAX_BETA)
    else:
        raise ContractError(f"unknown schedule kind {kind!r}")

    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1)
    alpha_bar[1:] = np.cumprod(alpha[1:])
    prev = alpha_bar[:-1]
    beta_tilde = np.full(T + 1, np.nan)
    coef_x0 = np.full(T + 1, np.nan)
    coef_xt = np.full(T + 1, np.nan)
    beta_tilde[1:] = (1.0 - prev) / (1.0 - alpha_bar[1:]) * beta[1:]
    coef_x0[1:] = np.sqrt(prev) * beta[1:] / (1.0 - alpha_bar[1:])
    coef_xt[1:] = np.sqrt(alpha[1:]) * (1.0 - prev) / (1.0 - alpha_bar[1:])
    for arr in (beta, alpha, alpha_bar, beta_tilde, coef_x0, coef_xt):
        arr.setflags(write=False)
    return NoiseSchedule(kind, T, beta, alpha, alpha_bar, beta_tilde, coef_x0, coef_xt)


def _per_sample(values: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Gather schedule values at ``t`` shaped to broadcast against ``like``."""
    v = values[np.asarray(t)]
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (like.ndim - v.ndim))


def _check_same(a: np.ndarray, b: np.ndarray, what: str):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shapes {np.shape(a)} and {np.shape(b)} differ")


def q_sample(schedule: NoiseSchedule, x0, t, eps):
    """Draw x_t ~ q(x_t | x_0) given the noise: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_same(x0, eps, "q_sample")
    t = schedule.check_t(t)
    x0 = np.asarray(x0)
    ab = _per_sample(schedule.alpha_bar, t, x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)).astype(x0.dtype, copy=False)


def q_step(schedule: NoiseSchedule, x_prev, t, noise):
    """One forward step x_{t-1} -> x_t."""
    t = schedule.check_t(t)
    x_prev = np.asarray(x_prev)
    b = _per_sample(schedule.beta, t, x_prev)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * noise


def posterior_mean(schedule: NoiseSchedule, x0, xt, t):
    _check_same(x0, xt, "posterior_mean")
    t = schedule.check_t(t)
    x0, xt = np.asarray(x0), np.asarray(xt)
    return _per_sample(schedule.coef_x0, t, x0) * x0 + _per_sample(schedule.coef_xt, t, xt) * xt


def mu_from_eps(schedule: NoiseSchedule, xt, t, eps_hat):
    """Reverse-process mean from a noise prediction."""
    _check_same(xt, eps_hat, "mu_from_eps")
    t = schedule.check_t(t)
    xt = np.asarray(xt)
    a = _per_sample(schedule.alpha, t, xt)
    b = _per_sample(schedule.beta, t, xt)
    ab = _per_sample(schedule.alpha_bar, t, xt)
    return (xt - b / np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(a)


def predict_x0(schedule: NoiseSchedule, xt, t, eps_hat):
    t = schedule.check_t(t)
    ab = _per_sample(schedule.alpha_bar, t, np.asarray(xt))
    return (np.asarray(xt) - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def gaussian_kl(mean1, var1, mean2, var2):
    """Elementwise KL(N(mean1, var1) || N(mean2, var2))."""
    return 0.5 * (np.log(var2 / var1) + (var1 + (mean1 - mean2) ** 2) / var2 - 1.0)


def prior_kl(schedule: NoiseSchedule, x0):
    """Per-element KL(q(x_T | x_0) || N(0, I))."""
    ab = schedule.alpha_bar[schedule.T]
    return gaussian_kl(math.sqrt(ab) * np.asarray(x0, np.float64), 1.0 - ab, 0.0, 1.0)


def _log_diff_ndtr(a, b):
    """log(Phi(b) - Phi(a)) for a < b, stable in both tails."""
    a, b = np.broadcast_arrays(np.asarray(a, np.float64), np.asarray(b, np.float64))
    out = np.empty(a.shape)
    upper = a > 0
    # in the upper tail use the survival function: Phi(b)-Phi(a) = Phi(-a)-Phi(-b)
    hi, lo = np.where(upper, -a, b), np.where(upper, -b, a)
    lhi, llo = special.log_ndtr(hi), special.log_ndtr(lo)
    out[...] = lhi + np.log1p(-np.exp(np.minimum(llo - lhi, 0.0)))
    return out


def discretized_gaussian_log_likelihood(x0, mean, var):
    """log P(bin containing x0) under N(mean, var); 256 levels on [-1, 1], open outer bins."""
    x0 = np.asarray(x0, np.float64)
    std = np.sqrt(var)
    upper = (x0 - mean + BIN_HALF_WIDTH) / std
    lower = (x0 - mean - BIN_HALF_WIDTH) / std
    mid = _log_diff_ndtr(lower, upper)
    return np.where(
        x0 < -1.0 + 1e-6,
        special.log_ndtr(upper),
        np.where(x0 > 1.0 - 1e-6, special.log_ndtr(-lower), mid),
    )


def _eps_fn(model):
    return getattr(model, "predict_eps", model)


@dataclass
class VlbTerms:
    """Per-image VLB decomposition in nats (arrays over the batch)."""

    L0: np.ndarray
    Lt: np.ndarray  # (B, T-1): column j holds L_{j+1}, i.e. timestep t = j + 2
    LT: np.ndarray
    dims: int
    bits_per_dim: np.ndarray = field(init=False)

    def __post_init__(self):
        self.bits_per_dim = self.total / (self.dims * math.log(2.0))

    @property
    def total(self) -> np.ndarray:
        return self.L0 + self.Lt.sum(axis=1) + self.LT


def _check_pixels(x0):
    x0 = np.asarray(x0)
    if x0.size and (x0.min() < -1.0 or x0.max() > 1.0):
        raise ContractError("x0 must lie in [-1, 1]")
    return x0


def _term_at(schedule, eps_fn, x0, t, eps):
    """Loss term for timestep t (L_0 at t=1, KL L_{t-1} otherwise), summed per image."""
    B = x0.shape[0]
    tt = np.full(B, t, dtype=np.int64)
    xt = q_sample(schedule, x0, tt, eps)
    eps_hat = np.asarray(eps_fn(xt, tt), np.float64)
    axes = tuple(range(1, x0.ndim))
    if t == 1:
        mean = mu_from_eps(schedule, xt, tt, eps_hat)
        ll = discretized_gaussian_log_likelihood(x0, mean, schedule.decoder_variance)
        return -ll.sum(axis=axes)
    # Identical covariances: KL = |mu_tilde - mu_theta|^2 / (2 beta_tilde), and
    # mu_tilde - mu_theta = beta_t / (sqrt(alpha_t) sqrt(1 - abar_t)) (eps_hat - eps).
    scale = schedule.beta[t] / math.sqrt(schedule.alpha[t] * (1.0 - schedule.alpha_bar[t]))
    diff = scale * (eps_hat - eps)
    return (diff * diff).sum(axis=axes) / (2.0 * schedule.beta_tilde[t])


def vlb_terms(schedule: NoiseSchedule, model, x0, rng: np.random.Generator) -> VlbTerms:
    """Exact-over-t variational bound for each image, one noise draw per timestep.

    Draw order is fixed: for t = 1..T one ``rng.standard_normal(x0.shape)``.
    """
    x0 = _check_pixels(x0).astype(np.float64)
    eps_fn = _eps_fn(model)
    B = x0.shape[0]
    axes = tuple(range(1, x0.ndim))
    dims = int(np.prod(x0.shape[1:]))
    L0 = np.zeros(B)
    Lt = np.zeros((B, schedule.T - 1))
    for t in range(1, schedule.T + 1):
        eps = rng.standard_normal(x0.shape)
        term = _term_at(schedule, eps_fn, x0, t, eps)
        if t == 1:
            L0 = term
        else:
            Lt[:, t - 2] = term
    LT = prior_kl(schedule, x0).sum(axis=axes)
    return VlbTerms(L0=L0, Lt=Lt, LT=LT, dims=dims)


def vlb_estimate(schedule: NoiseSchedule, model, x0, rng: np.random.Generator, n_draws: int = 32):
    """Unbiased uniform-t estimate of the total VLB (nats per image).

    Each draw picks one t per image; the mean term is scaled by T.
    """
    x0 = _check_pixels(x0).astype(np.float64)
    eps_fn = _eps_fn(model)
    B = x0.shape[0]
    axes = tuple(range(1, x0.ndim))
    acc = np.zeros(B)
    for _ in range(n_draws):
        ts = rng.integers(1, schedule.T + 1, size=B)
        eps = rng.standard_normal(x0.shape)
        for t in np.unique(ts):
            idx = np.flatnonzero(ts == t)
            acc[idx] += _term_at(schedule, eps_fn, x0[idx], int(t), eps[idx])
    return schedule.T * acc / n_draws + prior_kl(schedule, x0).sum(axis=axes)


def bits_per_dim(nats, dims: int):
    return np.asarray(nats) / (dims * math.log(2.0))
