"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HVIT" | version u32 | header_len u32 | header (UTF-8 JSON, sorted keys)
    | n_tensors u32 | records... | crc32 u32 over every preceding byte

    record := name_len u16 | name | dtype u8 (1 = f32 LE, 2 = f64 LE)
              | ndim u8 | dims u32 * ndim | raw data

Parameters are stored as ``param/<name>`` in canonical model order, SGD
momentum buffers as ``momentum/<name>`` in the same order.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .training import SGD, TrainConfig, TrainState, train_config_from_dict
from .vit import ViT, ViTConfig, param_shapes
from .autodiff import Tensor

MAGIC = b"HVIT"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CheckpointError(ValueError):
    """Unreadable, corrupt or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    vit_config: ViTConfig
    params: dict  # name -> ndarray
    schedule_kind: str = "cosine"
    timesteps: int = 1000
    train_config: TrainConfig | None = None
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    momentum: dict = field(default_factory=dict)
    running: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "vit_config": self.vit_config.to_dict(),
            "schedule": {"kind": self.schedule_kind, "T": self.timesteps},
            "train_config": None if self.train_config is None else self.train_config.to_dict(),
            "train_config_digest": None if self.train_config is None else self.train_config.digest(),
            "step": self.step,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "running": {k: (None if v != v else v) for k, v in self.running.items()},
        }

    def tensors(self):
        for name in param_shapes(self.vit_config):
            yield "param/" + name, self.params[name]
        for name in param_shapes(self.vit_config):
            if name in self.momentum:
                yield "momentum/" + name, self.momentum[name]

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(head)), head]
        records = list(self.tensors())
        parts.append(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode()
            parts.append(struct.pack("<H", len(nb)) + nb)
            parts.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.pos, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.source}: short read at byte {self.pos} (wanted {n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(buf) < 16:
        raise CheckpointError(f"{source}: file too short ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, this reader supports {FORMAT_VERSION}")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{source}: checksum mismatch, file is corrupt")
    r = _Reader(buf[:-4], source)
    r.take(8)
    (hlen,) = r.unpack("<I")
    try:
        head = json.loads(r.take(hlen).decode())
        vit_config = ViTConfig(**head["vit_config"])
    except (ValueError, KeyError, TypeError) as err:
        raise CheckpointError(f"{source}: bad header: {err}") from err
    (n,) = r.unpack("<I")
    params, momentum = {}, {}
    for _ in range(n):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: {name} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        dt = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        kind, _, pname = name.partition("/")
        (params if kind == "param" else momentum)[pname] = arr
    if r.pos != len(r.buf):
        raise CheckpointError(f"{source}: {len(r.buf) - r.pos} trailing bytes")
    shapes = param_shapes(vit_config)
    if set(params) != set(shapes):
        raise CheckpointError(f"{source}: parameter set does not match the declared config")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{source}: {name} has shape {params[name].shape}, config says {shape}")
        if name in momentum and momentum[name].shape != shape:
            raise CheckpointError(f"{source}: momentum for {name} has wrong shape")
    tc = head.get("train_config")
    running = {k: (float("nan") if v is None else v) for k, v in head.get("running", {}).items()}
    return Checkpoint(
        vit_config=vit_config,
        params={k: params[k] for k in shapes},
        schedule_kind=head["schedule"]["kind"],
        timesteps=int(head["schedule"]["T"]),
        train_config=None if tc is None else train_config_from_dict(tc),
        step=int(head["step"]),
        epoch=int(head["epoch"]),
        rng_state=head.get("rng_state", {}),
        momentum=momentum,
        running=running,
    )


def atomic_write(path, data: bytes | str):
    """Write to a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint):
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as err:
        raise CheckpointError(f"cannot read {path}: {err}") from err
    return checkpoint_from_bytes(buf, path)


def expected_size(ckpt: Checkpoint) -> int:
    """Byte size from parameter counts, dtype width and header/record overhead."""
    head = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    size = 4 + 8 + len(head) + 4 + 4
    for name, arr in ckpt.tensors():
        size += 2 + len(name.encode()) + 2 + 4 * np.ndim(arr) + np.size(arr) * np.asarray(arr).dtype.itemsize
    return size


# ----------------------------------------------------------- state conversion

def checkpoint_from_state(state: TrainState) -> Checkpoint:
    model = state.model
    return Checkpoint(
        vit_config=model.config,
        params={k: v.data.copy() for k, v in model.params.items()},
        schedule_kind=state.config.schedule,
        timesteps=state.config.timesteps,
        train_config=state.config,
        step=state.step,
        epoch=state.epoch,
        rng_state=state.rng_state,
        momentum={k: v.copy() for k, v in state.optimizer.buffers.items()},
        running=dict(state.running),
    )


def checkpoint_from_model(model: ViT, schedule_kind: str = "cosine", timesteps: int = 1000) -> Checkpoint:
    return Checkpoint(model.config, {k: v.data.copy() for k, v in model.params.items()},
                      schedule_kind, timesteps)


def model_from_checkpoint(ckpt: Checkpoint) -> ViT:
    params = {k: Tensor(np.array(v), requires_grad=True) for k, v in ckpt.params.items()}
    return ViT(ckpt.vit_config, params)


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig | None = None) -> TrainState:
    config = config or ckpt.train_config
    if config is None:
        raise CheckpointError("checkpoint carries no training config to resume from")
    model = model_from_checkpoint(ckpt)
    opt = SGD(model.params, config.momentum, config.grad_clip)
    opt.buffers = {k: np.array(v) for k, v in ckpt.momentum.items()}
    state = TrainState(model, opt, config, step=ckpt.step, epoch=ckpt.epoch)
    state.running.update(ckpt.running)
    return state
