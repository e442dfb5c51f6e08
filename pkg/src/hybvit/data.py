"""Datasets: CIFAR binary ingestion, synthetic toy sets, augmentation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

logger = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


class DataFormatError(ValueError):
    """Input file does not have the expected layout or contents."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray | None = None  # (N,) int64
    split: str = "train"
    provenance: str = ""
    num_classes: int | None = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.dtype != np.uint8:
            raise ContractError(f"images must be uint8, got {self.images.dtype}")
        if self.images.ndim != 4:
            raise ContractError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.images),):
                raise ContractError(
                    f"{len(self.labels)} labels for {len(self.images)} images"
                )

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def model_scale(self, idx=slice(None), dtype=np.float32) -> np.ndarray:
        return to_model_scale(self.images[idx], dtype)

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.images[idx], labels, self.split, self.provenance, self.num_classes)


def to_model_scale(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """8-bit value v -> 2 v / 255 - 1."""
    return (np.asarray(images, dtype=np.float64) * (2.0 / 255.0) - 1.0).astype(dtype)


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_model_scale`, clamping to [-1, 1] and rounding."""
    v = (np.clip(np.asarray(x, np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(v).astype(np.uint8)


# ------------------------------------------------------------------------ CIFAR

def parse_cifar_bytes(raw: bytes, source: str = "<bytes>", max_label: int = 9) -> Dataset:
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise DataFormatError(
            f"{source}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record "
            f"({n} full records, {rem} trailing bytes)"
        )
    if n == 0:
        logger.warning("%s: empty CIFAR file, dataset has 0 records", source)
        return Dataset(np.zeros((0, CIFAR_SIDE, CIFAR_SIDE, 3), np.uint8), np.zeros(0, np.int64),
                       provenance=source, num_classes=max_label + 1)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > max_label:
        bad = int(np.argmax(labels > max_label))
        raise DataFormatError(f"{source}: record {bad} has label {labels[bad]} > {max_label}; file corrupt?")
    planar = rec[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = np.ascontiguousarray(planar.transpose(0, 2, 3, 1))
    return Dataset(images, labels, provenance=source, num_classes=max_label + 1)


def load_cifar_binary(path, max_label: int = 9) -> Dataset:
    """Read the standard CIFAR-10 binary layout: 1 label byte then 3072 channel-planar pixels."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as err:
        raise DataFormatError(f"cannot read {path}: {err}") from err
    return parse_cifar_bytes(raw, path, max_label)


def cifar_bytes(dataset: Dataset) -> bytes:
    """Serialise a 32x32x3 labelled dataset in CIFAR binary layout."""
    planar = dataset.images.transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], planar], axis=1)
    return rec.tobytes()


# -------------------------------------------------------------------- synthetic

SYNTHETIC_KINDS = ("two-gaussians", "checker", "separable-classes")


def make_synthetic(kind: str, n: int, seed: int = 0, H: int = 4, C: int = 1, K: int = 2,
                   modes=(-0.5, 0.5), std: float = 0.05, weight: float = 0.5,
                   pattern_seed: int = 0) -> Dataset:
    """Deterministic toy datasets in 8-bit storage.

    two-gaussians
        each image picks the upper mode with probability ``weight`` and every
        pixel is that mode plus N(0, std^2) noise, so every pixel's marginal is
        the two-component mixture; the label is the mode index.
    checker
        a +/-0.75 checkerboard with random phase (label = phase) plus small noise.
    separable-classes
        K fixed random +/-0.6 patterns, one per class, plus N(0, 0.1^2) noise.
        The patterns come from ``pattern_seed`` alone, so sets drawn with
        different ``seed`` values share classes and can serve as train/test.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = np.random.default_rng(seed)
    shape = (n, H, H, C)
    if kind == "two-gaussians":
        labels = (rng.random(n) < weight).astype(np.int64)
        centre = np.asarray(modes, np.float64)[labels].reshape(n, 1, 1, 1)
        x = centre + std * rng.standard_normal(shape)
        K = 2
    elif kind == "checker":
        labels = rng.integers(0, 2, n)
        ii, jj = np.meshgrid(np.arange(H), np.arange(H), indexing="ij")
        board = np.where((ii + jj) % 2 == 0, 0.75, -0.75)[None, :, :, None]
        x = np.where(labels.reshape(n, 1, 1, 1) == 0, board, -board) + 0.05 * rng.standard_normal(shape)
        x = np.broadcast_to(x, shape)
        K = 2
    elif kind == "separable-classes":
        patterns = np.random.default_rng(pattern_seed).choice([-0.6, 0.6], size=(K, H, H, C))
        labels = np.arange(n) % K
        rng.shuffle(labels)
        x = patterns[labels] + 0.1 * rng.standard_normal(shape)
    else:
        raise ContractError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    return Dataset(to_uint8(x), labels, provenance=f"synthetic:{kind}:n={n}:seed={seed}", num_classes=K)


def make_interpolation(dataset: Dataset, n: int, seed: int = 0) -> Dataset:
    """Convex midpoints of random image pairs (an OOD set built from in-distribution data)."""
    rng = np.random.default_rng(seed)
    i = rng.integers(0, len(dataset), n)
    j = rng.integers(0, len(dataset), n)
    mid = (dataset.images[i].astype(np.float64) + dataset.images[j]) / 2.0
    return Dataset(np.rint(mid).astype(np.uint8), None, split="ood",
                   provenance=f"interp({dataset.provenance})", num_classes=dataset.num_classes)


# ------------------------------------------------------------------ augmentation

def random_crop_flip(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Pad with the black level (-1), crop back at a random offset, flip half the images."""
    B, H, W, C = x.shape
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=-1.0)
    oy = rng.integers(0, 2 * pad + 1, B)
    ox = rng.integers(0, 2 * pad + 1, B)
    flip = rng.random(B) < 0.5
    out = np.empty_like(x)
    for b in range(B):
        crop = padded[b, oy[b]:oy[b] + H, ox[b]:ox[b] + W]
        out[b] = crop[:, ::-1] if flip[b] else crop
    return out


def color_jitter(x: np.ndarray, rng: np.random.Generator, strength: float = 0.4) -> np.ndarray:
    B = x.shape[0]
    brightness = rng.uniform(-strength, strength, (B, 1, 1, 1))
    contrast = rng.uniform(1 - strength, 1 + strength, (B, 1, 1, 1))
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    return np.clip((x - mean) * contrast + mean + brightness, -1.0, 1.0).astype(x.dtype)


def random_erasing(x: np.ndarray, rng: np.random.Generator, p: float = 0.25,
                   area=(0.02, 0.33)) -> np.ndarray:
    B, H, W, C = x.shape
    out = x.copy()
    for b in np.flatnonzero(rng.random(B) < p):
        frac = rng.uniform(*area)
        h = max(1, int(round(H * np.sqrt(frac))))
        w = max(1, int(round(W * np.sqrt(frac))))
        y0 = rng.integers(0, H - h + 1)
        x0 = rng.integers(0, W - w + 1)
        out[b, y0:y0 + h, x0:x0 + w] = np.clip(rng.standard_normal((h, w, C)), -1, 1)
    return out


AUGMENTATIONS = ("none", "weak", "strong")


def augment(x: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Apply an augmentation recipe to model-scale images."""
    if kind == "none":
        return x
    if kind not in AUGMENTATIONS:
        raise ContractError(f"unknown augmentation {kind!r}")
    x = random_crop_flip(x, rng)
    if kind == "strong":
        x = color_jitter(x, rng)
        x = random_erasing(x, rng)
    return x
