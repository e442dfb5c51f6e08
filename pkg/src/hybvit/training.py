"""Losses, SGD with warmup + cosine decay, and the GenViT / HybViT training loop.

Randomness is counter-based: the data order of epoch ``e`` comes from
``SeedSequence(seed, spawn_key=(0, e))`` and everything drawn inside step
``s`` (timesteps, noise, augmentation, the second mini-batch) from
``spawn_key=(1, s)``. A run is therefore fully determined by
(seed, config, dataset) and resumes bit-exactly from any saved step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor
from .data import Dataset, augment
from .diffusion import NoiseSchedule, make_schedule, q_sample

logger = logging.getLogger(__name__)

MODES = ("genvit", "hybvit", "vit-only")
NOISE_LOSSES = ("l1", "l2")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "hybvit"
    alpha: float = 100.0
    noise_loss: str = "l1"
    lr: float = 0.1
    warmup_epochs: float = 10
    epochs: int = 500
    batch_size: int = 128
    repeat_aug: int = 3
    seed: int = 0
    momentum: float = 0.9
    augment: str = "strong"
    iters_per_epoch: int = 0  # 0 -> len(dataset) * repeat_aug // batch_size
    grad_clip: float = 0.0  # 0 disables global-norm clipping
    schedule: str = "cosine"
    timesteps: int = 1000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.noise_loss not in NOISE_LOSSES:
            raise ContractError(f"noise_loss must be one of {NOISE_LOSSES}, got {self.noise_loss!r}")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ContractError("epochs and warmup_epochs must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ContractError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if self.repeat_aug < 1:
            raise ContractError("repeat_aug must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def steps_per_epoch(config: TrainConfig, n_images: int) -> int:
    if config.iters_per_epoch:
        return int(config.iters_per_epoch)
    return max(1, n_images * config.repeat_aug // config.batch_size)


# ------------------------------------------------------------------------- losses

def _noise_error(eps: np.ndarray, eps_hat: Tensor, kind: str) -> Tensor:
    diff = ad.sub(eps_hat, eps.astype(eps_hat.dtype))
    per = ad.tabs(diff) if kind == "l1" else ad.square(diff)
    return ad.mean(per)


def loss_simple(model, schedule: NoiseSchedule, x0, rng: np.random.Generator,
                noise_loss: str = "l1") -> Tensor:
    """Mean |eps - eps_hat| (or squared) with one uniform t and fresh eps per image.

    Draw order: ``t = rng.integers(1, T + 1, B)`` then ``eps = rng.standard_normal(x0.shape)``.
    """
    x0 = np.asarray(x0)
    if x0.shape[0] == 0:
        raise ContractError("empty batch")
    if x0.min() < -1.0 or x0.max() > 1.0:
        raise ContractError("x0 must lie in [-1, 1]")
    if noise_loss not in NOISE_LOSSES:
        raise ContractError(f"noise_loss must be one of {NOISE_LOSSES}")
    t = rng.integers(1, schedule.T + 1, size=x0.shape[0])
    eps = rng.standard_normal(x0.shape)
    xt = q_sample(schedule, x0.astype(np.float64), t, eps)
    dtype = getattr(model, "dtype", np.float64)
    eps_hat = model.forward_generative(xt.astype(dtype), t)
    return _noise_error(eps, eps_hat, noise_loss)


def classification_loss(model, images, labels) -> Tensor:
    return ad.cross_entropy(model.forward_classifier(images), labels)


def loss_hybrid(model, schedule: NoiseSchedule, images, labels, alpha: float,
                rng: np.random.Generator, noise_images=None, noise_loss: str = "l1"):
    """L_CE + alpha * L_simple.

    ``images``/``labels`` feed the classifier; ``noise_images`` (default: the
    same images) feed the diffusion term. Returns ``(total, {"ce", "noise"})``.
    """
    labels = np.asarray(labels)
    ce = classification_loss(model, images, labels)
    simple = loss_simple(model, schedule, images if noise_images is None else noise_images,
                         rng, noise_loss)
    total = ad.add(ce, ad.mul(simple, alpha))
    return total, {"ce": ce, "noise": simple}


# --------------------------------------------------------------------- optimiser

def lr_at(epoch: float, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` over ``warmup_epochs``, then cosine decay to 0 at ``epochs``."""
    peak, warm, total = config.lr, config.warmup_epochs, config.epochs
    if warm > 0 and epoch < warm:
        return peak * max(epoch, 0.0) / warm
    if total <= warm:
        return peak
    progress = min((epoch - warm) / (total - warm), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class SGD:
    """Heavy-ball SGD: buf = m * buf + g; p -= lr * buf."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, grad_clip: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: float):
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:  # not reached by this loss (e.g. classifier head in genvit mode)
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {name}")
            grads[name] = g
        if self.grad_clip > 0:
            norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        for name, g in grads.items():
            p = self.params[name]
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else buf * p.dtype.type(self.momentum) + g
                self.buffers[name] = buf
                g = buf
            p.data = p.data - p.dtype.type(lr) * g


# --------------------------------------------------------------------- training

@dataclass
class TrainState:
    model: object
    optimizer: SGD
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    running: dict = field(default_factory=lambda: {"ce": math.nan, "noise": math.nan})

    @property
    def rng_state(self) -> dict:
        return {"seed": self.config.seed, "step": self.step}


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def epoch_order(config: TrainConfig, n: int, epoch: int) -> np.ndarray:
    """Index order for one epoch: every image ``repeat_aug`` times, shuffled."""
    return _rng(config.seed, 0, epoch).permutation(np.repeat(np.arange(n), config.repeat_aug))


class Trainer:
    """Owns the schedule and drives optimisation of a :class:`TrainState`."""

    def __init__(self, state: TrainState, dataset: Dataset):
        cfg = state.config
        if len(dataset) == 0:
            raise ContractError("dataset is empty")
        if cfg.mode != "genvit" and dataset.labels is None:
            raise ContractError(f"mode {cfg.mode} needs labels")
        self.state = state
        self.dataset = dataset
        self.schedule = make_schedule(cfg.schedule, cfg.timesteps)
        self.steps_per_epoch = steps_per_epoch(cfg, len(dataset))
        self.total_steps = self.steps_per_epoch * cfg.epochs
        self._order_epoch = -1
        self._order = None
        self._images = dataset.model_scale(dtype=np.float64)

    def _batch_indices(self, step: int) -> np.ndarray:
        epoch, i = divmod(step, self.steps_per_epoch)
        if epoch != self._order_epoch:
            self._order = epoch_order(self.state.config, len(self.dataset), epoch)
            self._order_epoch = epoch
        B = self.state.config.batch_size
        return self._order[(i * B + np.arange(B)) % len(self._order)]

    def lr_for_step(self, step: int) -> float:
        return lr_at((step + 0.5) / self.steps_per_epoch, self.state.config)

    def train_step(self) -> dict:
        st, cfg = self.state, self.state.config
        model = st.model
        step = st.step
        rng = _rng(cfg.seed, 1, step)
        idx = self._batch_indices(step)
        dtype = model.dtype
        model.zero_grad()
        with ad.Tape() as tape:
            if cfg.mode == "genvit":
                noise = loss_simple(model, self.schedule, self._images[idx], rng, cfg.noise_loss)
                ce = None
                total = noise
            else:
                x = augment(self._images[idx], cfg.augment, rng).astype(dtype)
                y = self.dataset.labels[idx]
                if cfg.mode == "vit-only":
                    ce = classification_loss(model, x, y)
                    noise = None
                    total = ce
                else:
                    noise_idx = rng.integers(0, len(self.dataset), cfg.batch_size)
                    total, parts = loss_hybrid(model, self.schedule, x, y, cfg.alpha, rng,
                                               noise_images=self._images[noise_idx],
                                               noise_loss=cfg.noise_loss)
                    ce, noise = parts["ce"], parts["noise"]
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite loss at step {step}")
        ad.backward(tape, total)
        lr = self.lr_for_step(step)
        st.optimizer.step(lr)
        st.step += 1
        st.epoch = st.step // self.steps_per_epoch
        record = {
            "step": step,
            "epoch": step // self.steps_per_epoch,
            "lr": lr,
            "ce": math.nan if ce is None else float(ce.data),
            "noise": math.nan if noise is None else float(noise.data),
            "total": float(total.data),
        }
        for key in ("ce", "noise"):
            v = record[key]
            prev = st.running[key]
            st.running[key] = v if not np.isfinite(prev) else 0.99 * prev + 0.01 * v
        return record

    def run(self, max_steps: int | None = None, checkpoint_every: int = 0,
            log_path=None) -> Iterator[TrainState]:
        """Train until ``total_steps`` (or ``max_steps`` more steps), yielding the state
        every ``checkpoint_every`` steps and once at the end."""
        end = self.total_steps if max_steps is None else min(self.total_steps, self.state.step + max_steps)
        log = _open_log(log_path, self.state.step) if log_path is not None else None
        try:
            while self.state.step < end:
                rec = self.train_step()
                if log is not None:
                    log.write(format_log_line(rec) + "\n")
                if checkpoint_every and self.state.step % checkpoint_every == 0 and self.state.step < end:
                    if log is not None:
                        log.flush()
                    yield self.state
        finally:
            if log is not None:
                log.close()
        yield self.state


LOG_FIELDS = ("step", "epoch", "lr", "ce", "noise", "total")


def format_log_line(rec: dict) -> str:
    return "\t".join([str(rec["step"]), str(rec["epoch"])] + [repr(float(rec[k])) for k in LOG_FIELDS[2:]])


def parse_log_line(line: str) -> dict:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != len(LOG_FIELDS):
        raise ValueError(f"malformed log line: {line!r}")
    return {"step": int(parts[0]), "epoch": int(parts[1]),
            **{k: float(v) for k, v in zip(LOG_FIELDS[2:], parts[2:])}}


def new_state(model, config: TrainConfig) -> TrainState:
    return TrainState(model, SGD(model.params, config.momentum, config.grad_clip), config)


def _open_log(path, step: int):
    """Open the loss log for a run starting at ``step``.

    A fresh run truncates the file. A resumed run keeps the lines for steps
    already taken and drops any written after the checkpoint it resumes from.
    """
    if step == 0 or not os.path.exists(path):
        return open(path, "w")
    with open(path) as fh:
        kept = [line for line in fh if line.strip() and parse_log_line(line)["step"] < step]
    fh = open(path, "w")
    fh.writelines(kept)
    return fh


def train(config: TrainConfig, dataset: Dataset, model, checkpoint_every: int = 0,
          log_path=None, state: TrainState | None = None) -> Iterator[TrainState]:
    """Generator over training states; pass ``state`` to resume."""
    state = state if state is not None else new_state(model, config)
    yield from Trainer(state, dataset).run(checkpoint_every=checkpoint_every, log_path=log_path)


def train_config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
