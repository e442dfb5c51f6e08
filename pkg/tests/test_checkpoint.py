import json
import os

import numpy as np
import pytest

from hybvit.checkpoint import (CheckpointError, atomic_write, checkpoint_from_bytes, checkpoint_from_model,
                               checkpoint_from_state, expected_size, load_checkpoint, model_from_checkpoint,
                               save_checkpoint, state_from_checkpoint)
from hybvit.data import make_synthetic
from hybvit.imageio import make_grid, ppm_bytes, read_ppm, save_samples, write_ppm
from hybvit.training import TrainConfig, train
from hybvit.vit import ViT

from oracles import tiny_config


def analytic_param_count(cfg):
    """Closed-form parameter count, written out independently of the model's shape table."""
    D, E, K, L = cfg.dim, cfg.time_embed_dim, cfg.num_classes, cfg.depth
    pd = cfg.patch_size**2 * cfg.channels
    N = (cfg.image_size // cfg.patch_size) ** 2
    h = int(round(cfg.mlp_ratio * D))
    stem = pd * D + D + D + (N + 1) * D
    time_mlp = 2 * (E * E + E)
    block = 2 * (E * D + D) + 2 * 2 * D + 4 * (D * D + D) + (D * h + h) + (h * D + D)
    heads = (D * pd + pd) + 2 * D + (D * K + K)
    return stem + time_mlp + L * block + heads


def small_state():
    data = make_synthetic("separable-classes", 8, seed=0, H=4, C=1, K=2)
    cfg = TrainConfig(mode="hybvit", lr=0.01, epochs=1, warmup_epochs=1, batch_size=4, iters_per_epoch=3,
                      timesteps=10, augment="none", seed=1)
    return list(train(cfg, data, ViT(tiny_config(), seed=1)))[-1]


def test_save_load_save_byte_identical(tmp_path):
    state = small_state()
    ck = checkpoint_from_state(state)
    p1, p2 = tmp_path / "a.hvit", tmp_path / "b.hvit"
    save_checkpoint(p1, ck)
    back = load_checkpoint(p1)
    save_checkpoint(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    assert back == ck
    assert back.step == state.step and back.train_config == state.config
    for k, v in state.model.params.items():
        assert np.array_equal(back.params[k], v.data)
    assert set(back.momentum) == set(state.optimizer.buffers)


def test_state_restore_and_model_equivalence():
    state = small_state()
    ck = checkpoint_from_state(state)
    restored = state_from_checkpoint(ck)
    x = np.random.default_rng(0).uniform(-1, 1, (2, 4, 4, 1)).astype(np.float32)
    np.testing.assert_array_equal(restored.model.predict_logits(x), state.model.predict_logits(x))
    with pytest.raises(CheckpointError):
        state_from_checkpoint(checkpoint_from_model(state.model))


def test_size_matches_analytic_formula():
    for cfg in [tiny_config(), tiny_config(depth=2, dim=16, heads=4)]:
        model = ViT(cfg)
        ck = checkpoint_from_model(model)
        buf = ck.to_bytes()
        assert sum(v.size for v in model.params.values()) == analytic_param_count(cfg)
        head = len(json.dumps(ck.header(), sort_keys=True, separators=(",", ":")))
        framing = 4 + 4 + 4 + 4 + 4  # magic, version, header length, tensor count, crc
        records = sum(2 + len("param/" + n) + 2 + 4 * len(v.shape) for n, v in model.params.items())
        analytic = analytic_param_count(cfg) * 4 + head + framing + records
        assert abs(len(buf) - analytic) <= 0.01 * analytic
        assert len(buf) == expected_size(ck)


@pytest.mark.parametrize("offset", [0, 1, 2, 3, 4, 5, 8, 12, 20, -1])
def test_corruption_detected(offset):
    buf = bytearray(checkpoint_from_model(ViT(tiny_config())).to_bytes())
    buf[offset] ^= 0x40
    with pytest.raises(CheckpointError):
        checkpoint_from_bytes(bytes(buf))


def test_version_and_magic_messages():
    buf = bytearray(checkpoint_from_model(ViT(tiny_config())).to_bytes())
    bad = bytes(buf[:4]) + (2).to_bytes(4, "little") + bytes(buf[8:])
    with pytest.raises(CheckpointError, match="version 2"):
        checkpoint_from_bytes(bad)
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint_from_bytes(b"XXXX" + bytes(buf[4:]))
    with pytest.raises(CheckpointError, match="too short"):
        checkpoint_from_bytes(b"HVIT")
    with pytest.raises(CheckpointError, match="checksum"):
        checkpoint_from_bytes(bytes(buf[:-10]) + bytes(buf[-4:]))


def test_shape_disagreement_rejected():
    ck = checkpoint_from_model(ViT(tiny_config()))
    ck.params["cls_token"] = np.zeros(9, np.float32)
    with pytest.raises(CheckpointError, match="cls_token"):
        checkpoint_from_bytes(ck.to_bytes())


def test_float64_round_trip():
    model = ViT(tiny_config(), dtype=np.float64, seed=3)
    back = model_from_checkpoint(checkpoint_from_bytes(checkpoint_from_model(model).to_bytes()))
    for k, v in model.params.items():
        assert back.params[k].data.dtype == np.float64
        assert np.array_equal(back.params[k].data, v.data)


def test_atomic_write_leaves_no_temp_files(tmp_path, monkeypatch):
    p = tmp_path / "sub" / "f.txt"
    atomic_write(p, "one")
    atomic_write(p, b"two")
    assert p.read_bytes() == b"two"
    assert os.listdir(p.parent) == ["f.txt"]

    def interrupted(src, dst):
        raise KeyboardInterrupt

    monkeypatch.setattr(os, "replace", interrupted)
    with pytest.raises(KeyboardInterrupt):
        atomic_write(p, b"three")
    monkeypatch.undo()
    assert p.read_bytes() == b"two"
    assert os.listdir(p.parent) == ["f.txt"]


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    assert ppm_bytes(img).startswith(b"P6\n7 5\n255\n")
    gray = img[:, :, :1]
    assert np.array_equal(read_ppm_bytes(ppm_bytes(gray), tmp_path), np.repeat(gray, 3, axis=2))
    with pytest.raises(ValueError):
        ppm_bytes(img.astype(np.float32))


def read_ppm_bytes(raw, tmp_path):
    p = tmp_path / "tmp.ppm"
    p.write_bytes(raw)
    return read_ppm(p)


def test_grid_and_sample_files(tmp_path):
    imgs = np.random.default_rng(1).uniform(-1, 1, (5, 4, 4, 1))
    paths = save_samples(tmp_path, imgs, seed=7)
    names = sorted(os.path.basename(p) for p in paths)
    assert names == ["grid_7.ppm"] + [f"sample_7_{i}.ppm" for i in range(5)]
    grid = make_grid(np.zeros((5, 4, 4, 3), np.uint8) + 200, ncols=3)
    assert grid.shape == (2 * 5 + 1, 3 * 5 + 1, 3)
    assert grid[1, 1, 0] == 200 and grid[0, 0, 0] == 0
