"""Pre-norm Vision Transformer encoder that exposes its latent trajectory."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from deflect import tensor as T
from deflect.tensor import Tensor


class ConfigError(ValueError):
    pass


RGB_BANDS = ("R", "G", "B")


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 4.0
    in_channels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            errors.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.num_heads <= 0 or self.embed_dim % self.num_heads:
            errors.append(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 0:
            errors.append("depth must be >= 0")
        if self.mlp_ratio <= 0:
            errors.append("mlp_ratio must be positive")
        return errors

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


PRESETS = {
    "tiny": VitConfig(image_size=16, patch_size=8, depth=4, embed_dim=16, num_heads=2),
    "small": VitConfig(image_size=32, patch_size=8, depth=12, embed_dim=64, num_heads=4),
    "laptop": VitConfig(image_size=64, patch_size=8, depth=12, embed_dim=192, num_heads=3),
    "base": VitConfig(image_size=224, patch_size=16, depth=12, embed_dim=768, num_heads=12),
    "large": VitConfig(image_size=224, patch_size=16, depth=24, embed_dim=1024, num_heads=16),
}

ATTN_LINEARS = ("wq", "wk", "wv", "wo")
MLP_LINEARS = ("w1", "w2")
_BIAS_OF = {"wq": "bq", "wk": "bk", "wv": "bv", "wo": "bo", "w1": "b1", "w2": "b2"}


def block_prefix(layer: int) -> str:
    return f"blocks.{layer}"


def vit_param_shapes(cfg: VitConfig, in_channels: int | None = None) -> dict[str, tuple[int, ...]]:
    """Name -> shape table of every encoder parameter. Layers are numbered from 1."""
    c = cfg.in_channels if in_channels is None else in_channels
    d, p, h = cfg.embed_dim, cfg.patch_size, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (c * p * p, d),
        "patch_embed.bias": (d,),
        "pos_embed": (cfg.num_patches, d),
    }
    for layer in range(1, cfg.depth + 1):
        pre = block_prefix(layer)
        shapes[f"{pre}.norm1.gamma"] = (d,)
        shapes[f"{pre}.norm1.beta"] = (d,)
        for w in ATTN_LINEARS:
            shapes[f"{pre}.attn.{w}"] = (d, d)
            shapes[f"{pre}.attn.{_BIAS_OF[w]}"] = (d,)
        shapes[f"{pre}.norm2.gamma"] = (d,)
        shapes[f"{pre}.norm2.beta"] = (d,)
        shapes[f"{pre}.mlp.w1"] = (d, h)
        shapes[f"{pre}.mlp.b1"] = (h,)
        shapes[f"{pre}.mlp.w2"] = (h, d)
        shapes[f"{pre}.mlp.b2"] = (d,)
    shapes["norm.gamma"] = (d,)
    shapes["norm.beta"] = (d,)
    return shapes


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_vit_params(cfg: VitConfig, seed: int = 0, dtype=np.float32, in_channels: int | None = None) -> dict[str, Tensor]:
    """Seeded stand-in for pretrained weights (truncated-normal 0.02 matrices, unit norms)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in vit_param_shapes(cfg, in_channels).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta",) or (leaf.startswith("b") and len(shape) == 1):
            arr = np.zeros(shape)
        else:
            arr = np.clip(rng.normal(0.0, 0.02, size=shape), -0.04, 0.04)
        params[name] = Tensor(arr.astype(dtype), name=name)
    return params


@dataclass
class LatentState:
    """Per-layer states z^(1..m+1) plus the displacements that produced them."""

    z: list[Tensor]
    attn_displacements: list[Tensor] = field(default_factory=list)
    mlp_displacements: list[Tensor] = field(default_factory=list)
    displacement_norms: list[np.ndarray] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.z[-1]


# hook(encoder, u, layer) -> attention displacement replacing the pretrained one
AttentionHook = Callable[["VisionTransformer", Tensor, int], Tensor]


class VisionTransformer:
    def __init__(self, cfg: VitConfig, params: Mapping[str, Tensor]):
        self.cfg = cfg
        self.params = dict(params)
        # name of a linear weight -> (A, B) low-rank update, installed by apply_lora
        self.lora: dict[str, tuple[Tensor, Tensor]] = {}
        missing = set(vit_param_shapes(cfg, self.in_channels)) - set(self.params)
        if missing:
            raise ConfigError(f"missing encoder parameters: {sorted(missing)[:5]}")

    @property
    def in_channels(self) -> int:
        return self.params["patch_embed.weight"].shape[0] // self.cfg.patch_size**2

    @property
    def dtype(self):
        return self.params["pos_embed"].dtype

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def linear(self, x: Tensor, prefix: str, w: str) -> Tensor:
        weight = f"{prefix}.{w}"
        y = x @ self.params[weight] + self.params[f"{prefix}.{_BIAS_OF[w]}"]
        if weight in self.lora:
            a, b = self.lora[weight]
            y = y + (x @ a) @ b
        return y

    # -- stage 1: patch embedding ---------------------------------------
    def patch_embed(self, patches: Tensor, add_position: bool = True) -> Tensor:
        """(B, n, C*p*p) flattened patches -> (B, n, d)."""
        x = patches @ self.params["patch_embed.weight"] + self.params["patch_embed.bias"]
        if add_position:
            x = x + self.params["pos_embed"]
        return x

    # -- stage 2: transport -----------------------------------------------
    def split_heads(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        h = self.cfg.num_heads
        return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))

    def merge_heads(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))

    def attend(self, q: Tensor, k: Tensor, v: Tensor, prefix: str) -> tuple[Tensor, Tensor]:
        """Multi-head attention from full-width q, k, v; returns (output after W^O, scores)."""
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        qh, kh, vh = self.split_heads(q), self.split_heads(k), self.split_heads(v)
        scores = (qh @ T.swapaxes(kh, -1, -2)) * scale
        weights = T.softmax(scores, axis=-1)
        out = self.merge_heads(weights @ vh)
        return self.linear(out, prefix, "wo"), scores

    def attention_displacement(self, u: Tensor, layer: int) -> tuple[Tensor, Tensor]:
        """Pretrained attention sublayer on the normalized state ``u`` (B, n, d)."""
        pre = f"{block_prefix(layer)}.attn"
        q = self.linear(u, pre, "wq")
        k = self.linear(u, pre, "wk")
        v = self.linear(u, pre, "wv")
        return self.attend(q, k, v, pre)

    def mlp_displacement(self, u: Tensor, layer: int) -> Tensor:
        pre = f"{block_prefix(layer)}.mlp"
        return self.linear(T.gelu(self.linear(u, pre, "w1")), pre, "w2")

    def norm(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.cfg.ln_eps)

    def block(self, z: Tensor, layer: int, hook: AttentionHook | None = None) -> tuple[Tensor, Tensor, Tensor]:
        pre = block_prefix(layer)
        u = self.norm(z, f"{pre}.norm1")
        if hook is None:
            d1, _ = self.attention_displacement(u, layer)
        else:
            d1 = hook(self, u, layer)
        mid = z + d1
        d2 = self.mlp_displacement(self.norm(mid, f"{pre}.norm2"), layer)
        return mid + d2, d1, d2

    def transport(
        self,
        x: Tensor,
        hooks: Mapping[int, AttentionHook] | None = None,
        record_norms: bool = False,
    ) -> LatentState:
        hooks = dict(hooks or {})
        bad = [k for k in hooks if not 1 <= k <= self.cfg.depth]
        if bad:
            raise ConfigError(f"hook layers {bad} outside 1..{self.cfg.depth}")
        state = LatentState(z=[x])
        z = x
        for layer in range(1, self.cfg.depth + 1):
            z, d1, d2 = self.block(z, layer, hooks.get(layer))
            state.z.append(z)
            state.attn_displacements.append(d1)
            state.mlp_displacements.append(d2)
            if record_norms:
                state.displacement_norms.append(np.sqrt((d1.data.astype(np.float64) ** 2).sum(-1)))
        return state

    def final_norm(self, z: Tensor) -> Tensor:
        return self.norm(z, "norm")


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n, C*p*p), channel-major inside each patch, patches row-major."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def select_bands(images: np.ndarray, band_map: Mapping[str, int], bands=RGB_BANDS) -> np.ndarray:
    missing = [b for b in bands if b not in band_map]
    if missing:
        raise ConfigError(f"band map lacks {missing}; have {sorted(band_map)}")
    return images[:, [band_map[b] for b in bands]]


def patch_embed_rgb(images: np.ndarray, band_map: Mapping[str, int], encoder: VisionTransformer) -> Tensor:
    """x_P: RGB bands through the pretrained stem plus positional encodings."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    size = encoder.cfg.image_size
    if images.shape[-2:] != (size, size):
        raise ConfigError(f"image is {images.shape[-2:]}, encoder expects {size}x{size}")
    rgb = select_bands(images, band_map)
    patches = Tensor(extract_patches(rgb, encoder.cfg.patch_size).astype(encoder.dtype))
    return encoder.patch_embed(patches)
