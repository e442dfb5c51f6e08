"""Metric battery: accuracy, ECE, OOD AUROC, PGD robustness, bits/dim."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import ContractError, ShapeError
from .data import Dataset
from .diffusion import NoiseSchedule, bits_per_dim, vlb_estimate

REPORT_VERSION = 1
REPORT_HEADER = f"# hybvit-report v{REPORT_VERSION}"

LINF_EPS_GRID = tuple(e / 255 for e in (1, 2, 4, 8, 12, 16, 22, 30))
L2_EPS_GRID = tuple(e / 255 for e in (50, 100, 150, 200, 250, 300, 350, 400))


# ----------------------------------------------------------------- calibration

@dataclass
class CalibrationBin:
    lower: float
    upper: float
    confidence: float
    accuracy: float
    count: int


def ece(confidences, correct, n_bins: int = 20):
    """Expected calibration error over equal-width bins on (0, 1].

    Bin ``b`` holds confidences in ``(b / n, (b + 1) / n]``, with the edges
    taken as the floating-point values ``(b + 1) / n`` so that a confidence
    written as ``0.05`` lands in the bin that ends at ``1 / 20``. A confidence
    of exactly 0 falls into the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.shape != corr.shape:
        raise ShapeError(f"{conf.size} confidences vs {corr.size} correctness flags")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ContractError("confidences must lie in [0, 1]")
    edges = np.arange(1, n_bins + 1) / n_bins
    idx = np.minimum(np.searchsorted(edges, conf, side="left"), n_bins - 1)
    N = conf.size
    value = 0.0
    bins = []
    for b in range(n_bins):
        mask = idx == b
        n = int(mask.sum())
        if n:
            c, a = float(conf[mask].mean()), float(corr[mask].mean())
            value += n / N * abs(a - c)
        else:
            c = a = 0.0
        bins.append(CalibrationBin(b / n_bins, (b + 1) / n_bins, c, a, n))
    return value, bins


# ------------------------------------------------------------------------ AUROC

def auroc(in_scores, out_scores) -> float:
    """P(s_in > s_out) + 0.5 P(s_in = s_out), computed from mid-ranks (exact)."""
    s_in = np.asarray(in_scores, dtype=np.float64).ravel()
    s_out = np.asarray(out_scores, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ContractError("auroc needs non-empty score lists")
    ranks = rankdata(np.concatenate([s_in, s_out]))  # average ranks for ties
    n1, n2 = s_in.size, s_out.size
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n2))


# ------------------------------------------------------------------- OOD scores

def _logits_fn(model):
    return getattr(model, "predict_logits", model)


def classifier_scores(logits) -> dict:
    logits = np.asarray(logits, dtype=np.float64)
    lse = special.logsumexp(logits, axis=1)
    return {"max-prob": np.exp(logits.max(axis=1) - lse), "lse-energy": lse}


def logpx_proxy(model, schedule: NoiseSchedule, x, seed: int = 0, n_draws: int = 32,
                offset: int = 0) -> np.ndarray:
    """-VLB (nats) per image; image ``offset + i`` always uses the same random stream."""
    x = np.asarray(x)
    out = np.empty(len(x))
    for i in range(len(x)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(offset + i,)))
        out[i] = -vlb_estimate(schedule, model, x[i:i + 1], rng, n_draws)[0]
    return out


def ood_scores(model, schedule: NoiseSchedule | None, x, seed: int = 0, n_draws: int = 32) -> dict:
    """Higher is more in-distribution for every score.

    ``logpx-proxy`` is only computed when a schedule is given (models with a
    diffusion head); ``max-prob`` and ``lse-energy`` come from the classifier.
    """
    scores = classifier_scores(_logits_fn(model)(x))
    if schedule is not None:
        scores["logpx-proxy"] = logpx_proxy(model, schedule, x, seed, n_draws)
    return scores


# -------------------------------------------------------------------------- PGD

def _unit_ball_sample(rng, shape, norm):
    if norm == "linf":
        return rng.uniform(-1.0, 1.0, shape)
    B = shape[0]
    d = int(np.prod(shape[1:]))
    g = rng.standard_normal((B, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    r = rng.random(B) ** (1.0 / d)
    return (g * r[:, None]).reshape(shape)


def project(delta, eps: float, norm: str):
    """Project perturbations onto the eps-ball of the given norm."""
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(delta.shape[0], -1)
    n = np.linalg.norm(flat, axis=1, keepdims=True)
    factor = np.minimum(1.0, eps / np.maximum(n, 1e-12))
    return (flat * factor).reshape(delta.shape)


def input_gradient(model, x, y):
    """d(mean cross-entropy)/dx and the per-batch loss, without touching parameter grads."""
    xt = ad.Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.cross_entropy(model.forward_classifier(xt), y)
    (g,) = ad.grad(tape, loss, [xt])
    return g.astype(np.float64), float(loss.data)


def pgd_attack(model, x, y, norm: str = "linf", eps: float = 8 / 255 * 2, steps: int = 40,
               step_size: float | None = None, random_start: bool = True, seed: int = 0,
               bounds=(-1.0, 1.0)):
    """Projected gradient ascent on the cross-entropy within an eps-ball.

    ``eps`` and ``step_size`` are in the units of ``x`` (model scale [-1, 1]
    by default, so 8/255 in [0, 1] pixel units is ``2 * 8 / 255``).
    L-inf steps follow the gradient sign; L2 steps the normalised gradient.
    Each iterate is projected onto the ball and then clipped to ``bounds``
    (clipping towards x never leaves the ball, so both constraints hold).
    """
    if eps < 0:
        raise ContractError("eps must be non-negative")
    if norm not in ("linf", "l2"):
        raise ContractError(f"norm must be 'linf' or 'l2', got {norm!r}")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = bounds
    if x.size and (x.min() < lo or x.max() > hi):
        raise ContractError("x outside the valid pixel range")
    y = np.asarray(y)
    step_size = eps / 10 if step_size is None else step_size
    if eps == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    delta = eps * _unit_ball_sample(rng, x.shape, norm) if random_start else np.zeros_like(x)
    x_adv = np.clip(x + delta, lo, hi)
    for _ in range(steps):
        g, _ = input_gradient(model, x_adv, y)
        if norm == "linf":
            step = np.sign(g)
        else:
            gn = np.linalg.norm(g.reshape(len(g), -1), axis=1).reshape((-1,) + (1,) * (g.ndim - 1))
            step = g / np.maximum(gn, 1e-12)
        delta = project(x_adv + step_size * step - x, eps, norm)
        x_adv = np.clip(x + delta, lo, hi)
    return x_adv


# ------------------------------------------------------------------ full report

@dataclass
class EvalConfig:
    n_bins: int = 20
    pgd_steps: int = 40
    pgd_step_frac: float = 0.1
    norms: tuple = ("linf", "l2")
    linf_eps: tuple = LINF_EPS_GRID  # in [0, 1] pixel units
    l2_eps: tuple = L2_EPS_GRID
    vlb_draws: int = 32
    seed: int = 0
    threads: int = 1
    compute_bpd: bool = True
    compute_robustness: bool = True


@dataclass
class EvalReport:
    accuracy: float = math.nan
    ece: float = math.nan
    bins: list = field(default_factory=list)
    auroc: dict = field(default_factory=dict)  # (score, set) -> value
    robustness: list = field(default_factory=list)  # (norm, eps, accuracy)
    bits_per_dim: float = math.nan
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [REPORT_HEADER, f"accuracy\t{self.accuracy!r}", f"ece\t{self.ece!r}",
                 f"bits_per_dim\t{self.bits_per_dim!r}"]
        for (score, name), v in sorted(self.auroc.items()):
            lines.append(f"auroc.{score}.{name}\t{v!r}")
        for norm, eps, acc in self.robustness:
            lines.append(f"robust.{norm}.{eps!r}\t{acc!r}")
        for k, v in sorted(self.extra.items()):
            lines.append(f"extra.{k}\t{v!r}")
        lines.append("bins:")
        for b in self.bins:
            lines.append(f"{b.lower!r}\t{b.upper!r}\t{b.confidence!r}\t{b.accuracy!r}\t{b.count}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if not lines or lines[0] != REPORT_HEADER:
            raise ValueError(f"not a v{REPORT_VERSION} report: header {lines[:1]!r}")
        rep = cls()
        it = iter(lines[1:])
        for line in it:
            if line == "bins:":
                break
            key, value = line.split("\t")
            if key in ("accuracy", "ece", "bits_per_dim"):
                setattr(rep, key, float(value))
            elif key.startswith("auroc."):
                _, score, name = key.split(".", 2)
                rep.auroc[(score, name)] = float(value)
            elif key.startswith("robust."):
                _, norm, eps = key.split(".", 2)
                rep.robustness.append((norm, float(eps), float(value)))
            elif key.startswith("extra."):
                rep.extra[key[len("extra."):]] = float(value)
            else:
                raise ValueError(f"unknown report key {key!r}")
        for line in it:
            lo, up, c, a, n = line.split("\t")
            rep.bins.append(CalibrationBin(float(lo), float(up), float(c), float(a), int(n)))
        return rep

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.to_text() == other.to_text()


def _chunked(fn, x, threads):
    if threads <= 1 or len(x) < 2:
        return fn(x, 0)
    parts = np.array_split(np.arange(len(x)), threads)
    with ThreadPoolExecutor(threads) as pool:
        outs = list(pool.map(lambda idx: fn(x[idx], int(idx[0]) if len(idx) else 0), parts))
    return np.concatenate(outs)


def robustness_curve(model, x, y, norm: str, eps_grid, config: EvalConfig):
    """Accuracy under PGD for each budget (in [0, 1] pixel units).

    An image counts as robust at eps only if it survived every attack with a
    budget <= eps: a perturbation found inside a smaller ball is also inside
    the larger one, so the curve is non-increasing by construction.
    """
    logits = _logits_fn(model)
    alive = logits(x).argmax(axis=1) == y
    out = []
    for eps in sorted(eps_grid):
        e = 2.0 * eps  # [0, 1] pixel units -> model scale
        adv = pgd_attack(model, x, y, norm, e, config.pgd_steps, e * config.pgd_step_frac,
                         seed=config.seed)
        alive &= logits(adv).argmax(axis=1) == y
        out.append((norm, float(eps), float(alive.mean())))
    return out


def evaluate(model, datasets: dict, config: EvalConfig | None = None,
             schedule: NoiseSchedule | None = None) -> EvalReport:
    """Fill an :class:`EvalReport`.

    ``datasets["test"]`` is the labelled in-distribution set; optional
    ``datasets["ood"]`` maps names to out-of-distribution sets. Bits/dim and
    the ``logpx-proxy`` score need ``schedule`` (a diffusion-capable model).
    """
    config = config or EvalConfig()
    if "test" not in datasets:
        raise KeyError("evaluate needs a 'test' dataset")
    test: Dataset = datasets["test"]
    if test.labels is None:
        raise ContractError("test dataset has no labels")
    x = test.model_scale(dtype=np.float64)
    y = test.labels
    rep = EvalReport()

    logits = _chunked(lambda xs, _: _logits_fn(model)(xs), x, config.threads)
    probs = np.exp(logits - special.logsumexp(logits, axis=1, keepdims=True))
    pred = probs.argmax(axis=1)
    correct = pred == y
    rep.accuracy = float(correct.mean())
    rep.ece, rep.bins = ece(probs.max(axis=1), correct, config.n_bins)

    if schedule is not None and config.compute_bpd:
        nats = -_chunked(lambda xs, off: logpx_proxy(model, schedule, xs, config.seed,
                                                     config.vlb_draws, off), x, config.threads)
        rep.bits_per_dim = float(bits_per_dim(nats, int(np.prod(x.shape[1:]))).mean())

    def all_scores(xs):
        s = classifier_scores(_chunked(lambda a, _: _logits_fn(model)(a), xs, config.threads))
        if schedule is not None:
            s["logpx-proxy"] = _chunked(
                lambda a, off: logpx_proxy(model, schedule, a, config.seed, config.vlb_draws, off),
                xs, config.threads)
        return s

    ood = datasets.get("ood") or {}
    if ood:
        in_scores = all_scores(x)
        for name, ds in ood.items():
            out_scores = all_scores(ds.model_scale(dtype=np.float64))
            for score in in_scores:
                rep.auroc[(score, name)] = auroc(in_scores[score], out_scores[score])

    if config.compute_robustness:
        for norm in config.norms:
            grid = config.linf_eps if norm == "linf" else config.l2_eps
            rep.robustness.extend(robustness_curve(model, x, y, norm, grid, config))
    return rep
