"""ViT backbone shared by the noise predictor and the classifier.

One set of weights serves two routines: ``forward_generative`` maps a noised
image and its timestep to a noise estimate of the same shape, and
``forward_classifier`` maps a clean image to class logits read off the class
token. Every block is conditioned on a timestep embedding through a
per-layer affine modulation ``h * (scale(A) + 1) + shift(A)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

LN_EPS = 1e-5


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    dim: int = 384
    depth: int = 9
    heads: int = 12
    mlp_ratio: float = 4.0
    num_classes: int = 10
    time_embed_dim: int = 384
    gelu: str = "none"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ContractError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.time_embed_dim % 2:
            raise ContractError("time_embed_dim must be even")
        if self.gelu not in ("none", "tanh"):
            raise ContractError(f"unknown GELU variant {self.gelu!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.dim))

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    """Name -> shape for every learnable tensor, in canonical order."""
    D, E, H = cfg.dim, cfg.time_embed_dim, cfg.mlp_hidden
    shapes = {
        "patch_embed.weight": (cfg.patch_dim, D),
        "patch_embed.bias": (D,),
        "cls_token": (D,),
        "pos_embed": (cfg.num_patches + 1, D),
        "time_mlp.fc1.weight": (E, E),
        "time_mlp.fc1.bias": (E,),
        "time_mlp.fc2.weight": (E, E),
        "time_mlp.fc2.bias": (E,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "mod_scale.weight": (E, D),
            p + "mod_scale.bias": (D,),
            p + "mod_shift.weight": (E, D),
            p + "mod_shift.bias": (D,),
            p + "ln1.gain": (D,),
            p + "ln1.bias": (D,),
            p + "attn.q.weight": (D, D),
            p + "attn.q.bias": (D,),
            p + "attn.k.weight": (D, D),
            p + "attn.k.bias": (D,),
            p + "attn.v.weight": (D, D),
            p + "attn.v.bias": (D,),
            p + "attn.proj.weight": (D, D),
            p + "attn.proj.bias": (D,),
            p + "ln2.gain": (D,),
            p + "ln2.bias": (D,),
            p + "mlp.fc1.weight": (D, H),
            p + "mlp.fc1.bias": (H,),
            p + "mlp.fc2.weight": (H, D),
            p + "mlp.fc2.bias": (D,),
        })
    shapes.update({
        "head_recon.weight": (D, cfg.patch_dim),
        "head_recon.bias": (cfg.patch_dim,),
        "norm.gain": (D,),
        "norm.bias": (D,),
        "head_cls.weight": (D, cfg.num_classes),
        "head_cls.bias": (cfg.num_classes,),
    })
    return shapes


def count_params(cfg: ViTConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def _trunc_normal(rng, shape, std=0.02):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


_ZERO_INIT = ("mod_scale.", "mod_shift.", "head_recon.", "head_cls.")


def init_params(cfg: ViTConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias") or any(tag in name for tag in _ZERO_INIT):
            value = np.zeros(shape)
        else:
            value = _trunc_normal(rng, shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True)
    return params


# ------------------------------------------------------------------ building blocks

def patchify(x, P: int):
    """(B, H, W, C) -> (B, N, P*P*C) in raster order; also accepts a single (H, W, C) image."""
    single = np.ndim(x.data if isinstance(x, Tensor) else x) == 3
    t = ad.as_tensor(x)
    if single:
        t = ad.reshape(t, (1,) + t.shape)
    B, H, W, C = t.shape
    if H % P or W % P:
        raise ContractError(f"image {H}x{W} is not divisible by patch size {P}")
    gh, gw = H // P, W // P
    t = ad.reshape(t, (B, gh, P, gw, P, C))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    t = ad.reshape(t, (B, gh * gw, P * P * C))
    if single:
        t = ad.reshape(t, t.shape[1:])
    return t if isinstance(x, Tensor) else t.data


def unpatchify(p, P: int, H: int, W: int, C: int):
    single = np.ndim(p.data if isinstance(p, Tensor) else p) == 2
    t = ad.as_tensor(p)
    if single:
        t = ad.reshape(t, (1,) + t.shape)
    B = t.shape[0]
    gh, gw = H // P, W // P
    t = ad.reshape(t, (B, gh, gw, P, P, C))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    t = ad.reshape(t, (B, H, W, C))
    if single:
        t = ad.reshape(t, t.shape[1:])
    return t if isinstance(p, Tensor) else t.data


def sinusoidal_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    """[sin(t w_0), ..., sin(t w_{h-1}), cos(t w_0), ...] with w_i = 10000^(-i/h)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def modulate(h, scale, shift) -> Tensor:
    """h * (scale + 1) + shift, with (B, D) scale/shift spread over the token axis."""
    h = ad.as_tensor(h)
    scale, shift = ad.as_tensor(scale), ad.as_tensor(shift)
    if scale.ndim == 1:
        return ad.add(ad.mul(h, ad.add(scale, 1.0)), shift)
    B, S, D = h.shape
    scale = ad.broadcast_to(ad.reshape(scale, (B, 1, D)), (B, S, D))
    shift = ad.broadcast_to(ad.reshape(shift, (B, 1, D)), (B, S, D))
    return ad.add(ad.mul(h, ad.add(scale, 1.0)), shift)


def multi_head_attention(x, p: dict, prefix: str, heads: int) -> Tensor:
    B, S, D = x.shape
    dk = D // heads

    def split(name):
        y = ad.linear(x, p[prefix + name + ".weight"], p[prefix + name + ".bias"])
        return ad.transpose(ad.reshape(y, (B, S, heads, dk)), (0, 2, 1, 3))

    q, k, v = split("q"), split("k"), split("v")
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, S, D))
    return ad.linear(out, p[prefix + "proj.weight"], p[prefix + "proj.bias"])


def attention_block(h, p: dict, i: int, A, cfg: ViTConfig) -> Tensor:
    """One transformer layer: modulated pre-LN attention then modulated pre-LN MLP, both residual."""
    pre = f"blocks.{i}."
    scale = ad.linear(A, p[pre + "mod_scale.weight"], p[pre + "mod_scale.bias"])
    shift = ad.linear(A, p[pre + "mod_shift.weight"], p[pre + "mod_shift.bias"])

    y = ad.layernorm(modulate(h, scale, shift), p[pre + "ln1.gain"], p[pre + "ln1.bias"], LN_EPS)
    h = ad.add(multi_head_attention(y, p, pre + "attn.", cfg.heads), h)

    y = ad.layernorm(modulate(h, scale, shift), p[pre + "ln2.gain"], p[pre + "ln2.bias"], LN_EPS)
    y = ad.linear(y, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"])
    y = ad.gelu(y, cfg.gelu)
    y = ad.linear(y, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"])
    return ad.add(y, h)


class ViT:
    """Parameters plus the two forward routines.

    ``params`` maps canonical names to leaf tensors; both routines read the
    same dict, so the backbone is shared by construction.
    """

    def __init__(self, config: ViTConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = params if params is not None else init_params(config, seed, dtype)
        shapes = param_shapes(config)
        if list(self.params) != list(shapes):
            missing = set(shapes) ^ set(self.params)
            raise ContractError(f"parameter names do not match config: {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ContractError(f"{name}: shape {self.params[name].shape} != expected {shape}")

    @property
    def dtype(self):
        return self.params["cls_token"].dtype

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def time_embedding(self, t) -> Tensor:
        """A = MLP_t(sinusoid(t)) for an int array of timesteps (0 is the classifier's clean input)."""
        p = self.params
        s = Tensor(sinusoidal_embedding(t, self.config.time_embed_dim, self.dtype))
        a = ad.linear(s, p["time_mlp.fc1.weight"], p["time_mlp.fc1.bias"])
        a = ad.gelu(a, self.config.gelu)
        return ad.linear(a, p["time_mlp.fc2.weight"], p["time_mlp.fc2.bias"])

    def _check_images(self, x):
        cfg = self.config
        shape = (cfg.image_size, cfg.image_size, cfg.channels)
        if tuple(x.shape[1:]) != shape or len(x.shape) != 4:
            raise ContractError(f"expected images of shape (B, {shape[0]}, {shape[1]}, {shape[2]}), got {x.shape}")

    def _backbone(self, x, A) -> Tensor:
        cfg, p = self.config, self.params
        patches = patchify(x, cfg.patch_size)
        B, N, _ = patches.shape
        tokens = ad.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
        cls = ad.broadcast_to(ad.reshape(p["cls_token"], (1, 1, cfg.dim)), (B, 1, cfg.dim))
        h = ad.add(ad.concat([cls, tokens], axis=1), p["pos_embed"])
        for i in range(cfg.depth):
            h = attention_block(h, p, i, A, cfg)
        return h

    def forward_generative(self, x_t, t) -> Tensor:
        """Noise estimate for noised images ``x_t`` (B, H, W, C) at int timesteps ``t`` (B,)."""
        cfg, p = self.config, self.params
        x_t = ad.as_tensor(x_t, dtype=self.dtype)
        self._check_images(x_t)
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
        h = self._backbone(x_t, self.time_embedding(t))
        y = ad.linear(h[:, 1:, :], p["head_recon.weight"], p["head_recon.bias"])
        return unpatchify(y, cfg.patch_size, cfg.image_size, cfg.image_size, cfg.channels)

    def forward_classifier(self, x0) -> Tensor:
        """Class logits (B, K) for clean images; conditioning uses the t = 0 embedding."""
        p = self.params
        x0 = ad.as_tensor(x0, dtype=self.dtype)
        self._check_images(x0)
        B = x0.shape[0]
        A = ad.broadcast_to(self.time_embedding(np.zeros(1, dtype=np.int64)), (B, self.config.time_embed_dim))
        h = self._backbone(x0, A)
        y = ad.layernorm(h[:, 0, :], p["norm.gain"], p["norm.bias"], LN_EPS)
        return ad.linear(y, p["head_cls.weight"], p["head_cls.bias"])

    # numpy conveniences (no tape recorded unless one is active)
    def predict_eps(self, x_t, t) -> np.ndarray:
        return self.forward_generative(np.asarray(x_t, dtype=self.dtype), t).data

    def predict_logits(self, x) -> np.ndarray:
        return self.forward_classifier(np.asarray(x, dtype=self.dtype)).data


def time_embedding(model: ViT, t, schedule=None) -> np.ndarray:
    """Conditioning vectors A for timesteps ``t``; with a schedule, t must lie in 1..T."""
    t = np.atleast_1d(np.asarray(t))
    if not np.issubdtype(t.dtype, np.integer):
        raise ContractError(f"timesteps must be integers, got {t.dtype}")
    if schedule is not None and (t.min() < 1 or t.max() > schedule.T):
        raise ContractError(f"timesteps must lie in 1..{schedule.T}, got range {t.min()}..{t.max()}")
    return model.time_embedding(t.astype(np.int64)).data
