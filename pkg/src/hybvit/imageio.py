"""Binary PPM (P6) emission for samples."""

from __future__ import annotations

import os

import numpy as np

from .checkpoint import atomic_write
from .data import to_uint8


def ppm_bytes(img: np.ndarray) -> bytes:
    """Encode an (H, W, C) uint8 image as P6; single-channel images are replicated to RGB."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if img.shape[2] != 3:
        raise ValueError(f"cannot write {img.shape[2]}-channel image as PPM")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes()


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 file")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray):
    atomic_write(path, ppm_bytes(img))


def make_grid(images: np.ndarray, ncols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile (N, H, W, C) uint8 images into one image, ``ncols`` across."""
    n, h, w, c = images.shape
    ncols = ncols or int(np.ceil(np.sqrt(n)))
    nrows = int(np.ceil(n / ncols))
    grid = np.zeros((nrows * (h + pad) + pad, ncols * (w + pad) + pad, c), np.uint8)
    for i, img in enumerate(images):
        r, col = divmod(i, ncols)
        y, x = pad + r * (h + pad), pad + col * (w + pad)
        grid[y:y + h, x:x + w] = img
    return grid


def save_samples(out_dir, images: np.ndarray, seed: int, grid: bool = True, ncols: int | None = None) -> list:
    """Write ``sample_{seed}_{index}.ppm`` per image (model-scale input) plus an optional grid."""
    os.makedirs(out_dir, exist_ok=True)
    pixels = to_uint8(images)
    paths = []
    for i, img in enumerate(pixels):
        p = os.path.join(out_dir, f"sample_{seed}_{i}.ppm")
        write_ppm(p, img)
        paths.append(p)
    if grid:
        p = os.path.join(out_dir, f"grid_{seed}.ppm")
        write_ppm(p, make_grid(pixels, ncols))
        paths.append(p)
    return paths
