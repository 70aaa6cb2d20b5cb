"""Baseline PEFT methods, stem initialisation for multispectral inputs, and the
entanglement diagnostic for low-rank updates on summed embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from deflect import tensor as T
from deflect.tensor import Tensor
from deflect.vit import (
    ATTN_LINEARS,
    MLP_LINEARS,
    ConfigError,
    VisionTransformer,
    VitConfig,
    block_prefix,
    xavier_uniform,
)

KINDS = ("frozen", "full", "lora", "bitfit", "normtune", "deflect")
STEMS = ("rgb", "repeat", "rgb_plus_random")
LORA_ALL = ("wq", "wk", "wv", "wo", "w1", "w2")
# query, key and value projections only, matching the attention-score analysis
LORA_QKV = ("wq", "wk", "wv")


@dataclass
class PeftMethod:
    kind: str = "deflect"
    lora_rank: int = 16
    lora_targets: tuple[str, ...] = LORA_QKV
    stem: str = "rgb"

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if self.kind not in KINDS:
            errors.append(f"unknown method kind {self.kind!r}, expected one of {KINDS}")
        if self.stem not in STEMS:
            errors.append(f"unknown stem {self.stem!r}, expected one of {STEMS}")
        if self.kind == "deflect" and self.stem != "rgb":
            errors.append("deflect keeps the pretrained RGB stem, so stem must be 'rgb'")
        if self.lora_rank < 1:
            errors.append("lora_rank must be >= 1")
        bad = [t for t in self.lora_targets if t not in LORA_ALL]
        if bad:
            errors.append(f"unknown lora targets {bad}")
        return errors


def _lora_weight_name(layer: int, target: str) -> str:
    sub = "attn" if target in ATTN_LINEARS else "mlp"
    return f"{block_prefix(layer)}.{sub}.{target}"


def lora_param_shapes(cfg: VitConfig, rank: int, targets=LORA_QKV) -> dict[str, tuple[int, ...]]:
    shapes = {}
    sizes = {"w1": (cfg.embed_dim, cfg.mlp_dim), "w2": (cfg.mlp_dim, cfg.embed_dim)}
    for layer in range(1, cfg.depth + 1):
        for t in targets:
            fan_in, fan_out = sizes.get(t, (cfg.embed_dim, cfg.embed_dim))
            name = _lora_weight_name(layer, t)
            shapes[f"lora.{name}.A"] = (fan_in, rank)
            shapes[f"lora.{name}.B"] = (rank, fan_out)
    return shapes


def apply_lora(encoder: VisionTransformer, rank: int, targets=LORA_QKV, seed: int = 0) -> dict[str, Tensor]:
    """Attach W_P + A B updates (A Xavier, B zero) to ``targets`` of every layer; returns the new params."""
    if rank < 1:
        raise ConfigError("LoRA rank must be >= 1")
    rng = np.random.default_rng(seed)
    dtype = encoder.dtype
    new = {}
    for name, shape in lora_param_shapes(encoder.cfg, rank, targets).items():
        arr = xavier_uniform(rng, *shape, dtype) if name.endswith(".A") else np.zeros(shape, dtype)
        new[name] = Tensor(arr, name=name)
    for layer in range(1, encoder.cfg.depth + 1):
        for t in targets:
            w = _lora_weight_name(layer, t)
            encoder.lora[w] = (new[f"lora.{w}.A"], new[f"lora.{w}.B"])
    return new


def merged_weight(encoder: VisionTransformer, weight_name: str) -> np.ndarray:
    w = encoder.params[weight_name].data
    if weight_name not in encoder.lora:
        return w
    a, b = encoder.lora[weight_name]
    return w + a.data @ b.data


def is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("bias", "beta") or (leaf.startswith("b") and leaf[1:].isalnum() and len(leaf) == 2)


def is_norm(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("gamma", "beta") and not name.startswith(("upe.", "adapter.", "lora.", "head."))


def encoder_partition(encoder_names, method: PeftMethod) -> dict[str, str]:
    """theta_P / theta_A assignment of the pretrained encoder's own parameters."""
    out = {}
    for name in encoder_names:
        if method.kind == "full":
            group = "theta_A"
        elif method.kind == "bitfit":
            group = "theta_A" if is_bias(name) else "theta_P"
        elif method.kind == "normtune":
            group = "theta_A" if is_norm(name) else "theta_P"
        else:
            group = "theta_P"
        out[name] = group
    return out


def apply_bitfit(encoder_names) -> dict[str, str]:
    return encoder_partition(encoder_names, PeftMethod("bitfit"))


def apply_normtune(encoder_names) -> dict[str, str]:
    return encoder_partition(encoder_names, PeftMethod("normtune"))


def multispectral_stem_init(
    rgb_weight: np.ndarray, patch_size: int, channels: int, strategy: str, seed: int = 0
) -> np.ndarray:
    """Expand a (3*p*p, d) RGB stem to (C*p*p, d). Channels 1..3 of the result are R, G, B."""
    if channels < 3:
        raise ConfigError(f"multispectral stem needs at least 3 channels, got {channels}")
    if strategy not in ("repeat", "rgb_plus_random"):
        raise ConfigError(f"unknown stem strategy {strategy!r}")
    pp = patch_size * patch_size
    d = rgb_weight.shape[1]
    rgb = rgb_weight.reshape(3, pp, d)
    if strategy == "repeat":
        out = rgb[np.arange(channels) % 3]
    else:
        rng = np.random.default_rng(seed)
        extra = xavier_uniform(rng, (channels - 3) * pp, d, rgb_weight.dtype).reshape(channels - 3, pp, d)
        out = np.concatenate([rgb, extra], axis=0)
    return np.ascontiguousarray(out.reshape(channels * pp, d))


def multispectral_band_order(band_map: Mapping[str, int]) -> list[str]:
    """R, G, B first (matching the pretrained stem), then every other band in channel order."""
    rest = sorted((i, b) for b, i in band_map.items() if b not in ("R", "G", "B"))
    return ["R", "G", "B"] + [b for _, b in rest]


# -- entanglement diagnostic ----------------------------------------------

def entanglement_diagnostic(
    x_p: np.ndarray,
    x_a: np.ndarray,
    w_q: np.ndarray,
    w_k: np.ndarray,
    dw_q: np.ndarray,
    dw_k: np.ndarray,
) -> dict:
    """Single-head scores of a low-rank-adapted layer on x = x_P + x_A, computed directly,
    through the 4-term embedding expansion and through the 8-term weight expansion.

    Returns the three score matrices, the max absolute disagreements and the Frobenius
    norm of every term so the cross terms can be compared with the RGB-to-RGB one.
    """
    d = x_p.shape[1]
    s = 1.0 / math.sqrt(d)
    wq_t, wk_t = w_q + dw_q, w_k + dw_k
    direct = s * ((x_p + x_a) @ wq_t) @ ((x_p + x_a) @ wk_t).T

    four = {
        "P-P": (x_p @ wq_t) @ (x_p @ wk_t).T,
        "P-A": (x_p @ wq_t) @ (x_a @ wk_t).T,
        "A-P": (x_a @ wq_t) @ (x_p @ wk_t).T,
        "A-A": (x_a @ wq_t) @ (x_a @ wk_t).T,
    }
    four_sum = s * sum(four.values())

    emb = {"P": x_p, "A": x_a}
    eight = {}
    # the middle terms (P-A, A-P) stay unexpanded, like the first and last terms are expanded
    for i, j in (("P", "P"), ("A", "A")):
        for qn, qw in (("Wp", w_q), ("dW", dw_q)):
            for kn, kw in (("Wp", w_k), ("dW", dw_k)):
                eight[f"{i}{qn}-{j}{kn}"] = (emb[i] @ qw) @ (emb[j] @ kw).T
    eight_sum = s * (sum(eight.values()) + four["P-A"] + four["A-P"])

    magnitudes = {f"four:{k}": float(np.linalg.norm(s * v)) for k, v in four.items()}
    magnitudes.update({f"eight:{k}": float(np.linalg.norm(s * v)) for k, v in eight.items()})
    return {
        "direct": direct,
        "four_term": four_sum,
        "eight_term": eight_sum,
        "err_four": float(np.abs(direct - four_sum).max()),
        "err_eight": float(np.abs(direct - eight_sum).max()),
        "term_norms": magnitudes,
    }
