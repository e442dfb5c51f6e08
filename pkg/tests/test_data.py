import logging
import math

import numpy as np
import pytest

from hybvit.autodiff import ContractError
from hybvit.data import (Dataset, DataFormatError, augment, cifar_bytes, load_cifar_binary, make_interpolation,
                         make_synthetic, to_model_scale, to_uint8)


def crafted_record(label=3):
    """One CIFAR record: label byte then bytes 1..3072 as a ramp (mod 256)."""
    return bytes([label]) + bytes((i % 256) for i in range(1, 3073))


def test_crafted_cifar_record(tmp_path):
    p = tmp_path / "one.bin"
    p.write_bytes(crafted_record(3))
    ds = load_cifar_binary(p)
    assert len(ds) == 1 and ds.labels.tolist() == [3]
    assert ds.images.shape == (1, 32, 32, 3)
    img = ds.images[0]
    # channel-planar: R plane is bytes 1..1024, G 1025..2048, B 2049..3072
    assert img[0, 0, 0] == 1
    assert img[0, 0, 1] == 1025 % 256
    assert img[0, 0, 2] == 2049 % 256
    assert img[0, 1, 0] == 2
    assert img[1, 0, 0] == 33
    assert img[31, 31, 2] == 3072 % 256


def test_cifar_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8), [0, 9, 4])
    p = tmp_path / "three.bin"
    p.write_bytes(cifar_bytes(ds))
    back = load_cifar_binary(p)
    assert np.array_equal(back.images, ds.images)
    assert back.labels.tolist() == [0, 9, 4]


def test_empty_cifar_file_warns(tmp_path, caplog):
    p = tmp_path / "empty.bin"
    p.write_bytes(b"")
    with caplog.at_level(logging.WARNING):
        ds = load_cifar_binary(p)
    assert len(ds) == 0
    assert "empty" in caplog.text


def test_truncated_cifar_file(tmp_path):
    p = tmp_path / "short.bin"
    p.write_bytes(crafted_record()[:3072])
    with pytest.raises(DataFormatError, match="3072 bytes"):
        load_cifar_binary(p)


def test_bad_label_and_missing_file(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(crafted_record(0) + crafted_record(12))
    with pytest.raises(DataFormatError, match="record 1 has label 12"):
        load_cifar_binary(p)
    with pytest.raises(DataFormatError):
        load_cifar_binary(tmp_path / "nope.bin")


def test_dataset_contracts():
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 4, 4, 1), np.float32))
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 4, 4, 1), np.uint8), [0])
    with pytest.raises(ContractError):
        make_synthetic("two-gaussians", 0)
    with pytest.raises(ContractError):
        make_synthetic("spiral", 4)


def test_pixel_scale_round_trip():
    v = np.arange(256, dtype=np.uint8)
    x = to_model_scale(v, np.float64)
    assert x[0] == -1.0 and x[-1] == 1.0
    assert np.array_equal(to_uint8(x), v)
    assert np.array_equal(to_uint8(to_model_scale(v)), v)


@pytest.mark.parametrize("kind", ["two-gaussians", "checker", "separable-classes"])
def test_synthetic_deterministic(kind):
    a = make_synthetic(kind, 20, seed=4, H=4, C=1, K=3)
    b = make_synthetic(kind, 20, seed=4, H=4, C=1, K=3)
    c = make_synthetic(kind, 20, seed=5, H=4, C=1, K=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, c.images)
    assert a.images.shape == (20, 4, 4, 1)


def test_two_gaussians_moments():
    n = 4000
    ds = make_synthetic("two-gaussians", n, seed=0, H=4, C=1)
    x = ds.model_scale(dtype=np.float64)
    # per-image mean: the mixture mean 0 with variance 0.25 + 0.05^2 / 16
    m = x.mean(axis=(1, 2, 3))
    se = math.sqrt((0.25 + 0.05**2 / 16) / n)
    assert abs(m.mean()) < 4 * se
    # within-image spread matches the component std (8-bit quantisation adds ~1/127.5^2 / 12)
    assert abs(x.std(axis=(1, 2, 3), ddof=1).mean() - 0.05) < 0.005


def test_separable_classes_perceptron():
    ds = make_synthetic("separable-classes", 64, seed=0, H=4, C=1, K=4)
    X = np.c_[ds.model_scale(dtype=np.float64).reshape(64, -1), np.ones(64)]
    W = np.zeros((X.shape[1], 4))
    for _ in range(100):
        mistakes = 0
        for x, y in zip(X, ds.labels):
            pred = int(np.argmax(x @ W))
            if pred != y:
                W[:, y] += x
                W[:, pred] -= x
                mistakes += 1
        if mistakes == 0:
            break
    assert np.mean(np.argmax(X @ W, axis=1) == ds.labels) == 1.0


def test_interpolation_set():
    ds = make_synthetic("checker", 10, seed=0)
    mid = make_interpolation(ds, 7, seed=1)
    assert mid.images.shape == (7, 4, 4, 1) and mid.labels is None
    assert mid.split == "ood"


@pytest.mark.parametrize("kind", ["none", "weak", "strong"])
def test_augment_shapes_and_range(kind):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (8, 8, 8, 3)).astype(np.float32)
    out = augment(x, kind, np.random.default_rng(1))
    assert out.shape == x.shape and out.dtype == x.dtype
    assert out.min() >= -1 and out.max() <= 1
    again = augment(x, kind, np.random.default_rng(1))
    assert np.array_equal(out, again)
    with pytest.raises(ContractError):
        augment(x, "medium", rng)


def test_separable_classes_share_patterns_across_seeds():
    a_ds = make_synthetic("separable-classes", 200, seed=0, K=3)
    b_ds = make_synthetic("separable-classes", 200, seed=9, K=3)
    a, b = a_ds.model_scale(dtype=np.float64), b_ds.model_scale(dtype=np.float64)
    for k in range(3):
        ma = a[a_ds.labels == k].mean(axis=0)
        mb = b[b_ds.labels == k].mean(axis=0)
        assert np.all(np.sign(ma) == np.sign(mb))
