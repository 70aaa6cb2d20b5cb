"""Untangled attention with norm-constrained embedding deflection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from deflect import tensor as T
from deflect.tensor import Tensor
from deflect.upe import init_projection, project_spectral, projection_param_shapes
from deflect.vit import ConfigError, VisionTransformer, VitConfig, block_prefix, xavier_uniform

DEFAULT_LAYERS = {12: (3, 5, 7, 11), 24: (7, 11, 15, 23)}
UATT_TARGETS = ("q", "k", "v")


def default_adapted_layers(depth: int) -> tuple[int, ...]:
    if depth in DEFAULT_LAYERS:
        return DEFAULT_LAYERS[depth]
    # same relative positions as the depth-12 default, deduplicated
    layers = sorted({max(1, min(depth, round(k * depth / 12))) for k in DEFAULT_LAYERS[12]})
    return tuple(layers)


@dataclass
class AdapterConfig:
    adapted_layers: tuple[int, ...] | None = None
    rank: int | None = 16
    epsilon_norm: float = 1e-8
    detach_reference_norm: bool = False
    reference_from_frozen_trajectory: bool = False

    def __post_init__(self):
        if self.adapted_layers is not None:
            self.adapted_layers = tuple(sorted(set(int(k) for k in self.adapted_layers)))
        if self.rank is not None and self.rank < 1:
            raise ConfigError(f"rank must be a positive integer or None, got {self.rank}")
        if self.epsilon_norm <= 0:
            raise ConfigError("epsilon_norm must be positive")

    def layers_for(self, depth: int) -> tuple[int, ...]:
        layers = self.adapted_layers if self.adapted_layers is not None else default_adapted_layers(depth)
        bad = [k for k in layers if not 1 <= k <= depth]
        if bad:
            raise ConfigError(f"adapted layers {bad} outside 1..{depth}")
        return tuple(layers)


def uatt_param_shapes(vit_cfg: VitConfig, cfg: AdapterConfig) -> dict[str, tuple[int, ...]]:
    d = vit_cfg.embed_dim
    shapes = {}
    for layer in cfg.layers_for(vit_cfg.depth):
        for t in UATT_TARGETS:
            pre = f"adapter.{block_prefix(layer)}.{t}"
            if cfg.rank is None:
                shapes[f"{pre}.W"] = (d, d)
            else:
                shapes[f"{pre}.A"] = (d, cfg.rank)
                shapes[f"{pre}.B"] = (cfg.rank, d)
    return shapes


def adapter_param_shapes(vit_cfg: VitConfig, cfg: AdapterConfig, raw_dim: int, use_projection: bool = True):
    shapes = uatt_param_shapes(vit_cfg, cfg)
    if use_projection:
        shapes.update(projection_param_shapes(raw_dim, vit_cfg.embed_dim))
    return shapes


def init_adapter_params(
    vit_cfg: VitConfig, cfg: AdapterConfig, raw_dim: int, use_projection: bool = True, seed: int = 0, dtype=np.float32
) -> dict[str, Tensor]:
    """Low-rank A ~ Xavier and B = 0 (dense W = 0), so the adapted model starts frozen-equivalent."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in uatt_param_shapes(vit_cfg, cfg).items():
        if name.endswith(".A"):
            arr = xavier_uniform(rng, *shape, dtype)
        else:
            arr = np.zeros(shape, dtype)
        params[name] = Tensor(arr, name=name)
    if use_projection:
        params.update(init_projection(raw_dim, vit_cfg.embed_dim, rng, dtype))
    return params


def deflect(d: Tensor, reference: Tensor, eps: float = 1e-8, detach_reference: bool = False) -> Tensor:
    """Rescale each row of ``d`` to the norm of the matching row of ``reference``."""
    if d.shape != reference.shape:
        raise T.ShapeError(f"deflect: displacement {d.shape} vs reference {reference.shape}")
    ref_norm = T.l2_norm_rows(reference)
    if detach_reference:
        ref_norm = ref_norm.detach()
    return _rescale(d, ref_norm, eps)


def _rescale(d: Tensor, target_norm: Tensor, eps: float) -> Tensor:
    scale = target_norm / (T.l2_norm_rows(d) + eps)
    return d * T.reshape(scale, scale.shape + (1,))


class DeflectAdapter:
    """θ_A of the method: per-layer W_A^{Q,K,V} plus the shared spectral projection."""

    def __init__(self, vit_cfg: VitConfig, cfg: AdapterConfig, params: Mapping[str, Tensor], use_projection: bool = True):
        self.vit_cfg = vit_cfg
        self.cfg = cfg
        self.layers = cfg.layers_for(vit_cfg.depth)
        self.params = dict(params)
        self.use_projection = use_projection

    # -- spectral embedding ----------------------------------------------
    def spectral_embedding(self, raw) -> Tensor:
        if not self.use_projection:
            raw = T.as_tensor(raw)
            if raw.shape[-1] != self.vit_cfg.embed_dim:
                raise ConfigError(
                    f"without projection the spectral width {raw.shape[-1]} must equal embed_dim {self.vit_cfg.embed_dim}"
                )
            return raw
        return project_spectral(raw, self.params, self.vit_cfg.ln_eps)

    def new_projection(self, x_a: Tensor, layer: int, target: str) -> Tensor:
        """x_A W_A for one of q/k/v; W_A = A B when low-rank."""
        pre = f"adapter.{block_prefix(layer)}.{target}"
        if self.cfg.rank is None:
            return x_a @ self.params[f"{pre}.W"]
        return (x_a @ self.params[f"{pre}.A"]) @ self.params[f"{pre}.B"]

    def new_weight(self, layer: int, target: str) -> np.ndarray:
        pre = f"adapter.{block_prefix(layer)}.{target}"
        if self.cfg.rank is None:
            return self.params[f"{pre}.W"].data
        return self.params[f"{pre}.A"].data @ self.params[f"{pre}.B"].data

    # -- uAtt ----------------------------------------------------------------
    def _streams(self, encoder: VisionTransformer, u: Tensor, x_a: Tensor, layer: int):
        if u.shape != x_a.shape:
            raise T.ShapeError(f"latent state {u.shape} and spectral embedding {x_a.shape} are not row-aligned")
        pre = f"{block_prefix(layer)}.attn"
        rgb = {t: encoder.linear(u, pre, f"w{t}") for t in UATT_TARGETS}
        spec = {t: self.new_projection(x_a, layer, t) for t in UATT_TARGETS}
        return rgb, spec

    def uatt_scores(self, encoder: VisionTransformer, u: Tensor, x_a: Tensor, layer: int, expanded: bool = False) -> Tensor:
        """Pre-softmax scores (B, h, n, n): combined query/key form, or the four-term sum."""
        rgb, spec = self._streams(encoder, u, x_a, layer)
        scale = 1.0 / math.sqrt(self.vit_cfg.head_dim)
        sh = encoder.split_heads
        if not expanded:
            q = sh(rgb["q"] + spec["q"])
            k = sh(rgb["k"] + spec["k"])
            return (q @ T.swapaxes(k, -1, -2)) * scale
        q_p, k_p, q_a, k_a = sh(rgb["q"]), sh(rgb["k"]), sh(spec["q"]), sh(spec["k"])
        terms = [q_p @ T.swapaxes(k_p, -1, -2), q_p @ T.swapaxes(k_a, -1, -2),
                 q_a @ T.swapaxes(k_p, -1, -2), q_a @ T.swapaxes(k_a, -1, -2)]
        return (terms[0] + terms[1] + terms[2] + terms[3]) * scale

    def uatt_displacement(self, encoder: VisionTransformer, u: Tensor, x_a: Tensor, layer: int) -> Tensor:
        """Raw (pre-deflection) displacement D after the pretrained output projection."""
        rgb, spec = self._streams(encoder, u, x_a, layer)
        pre = f"{block_prefix(layer)}.attn"
        out, _ = encoder.attend(rgb["q"] + spec["q"], rgb["k"] + spec["k"], rgb["v"] + spec["v"], pre)
        return out

    def adapted_attention_sublayer(
        self,
        encoder: VisionTransformer,
        u: Tensor,
        x_a: Tensor,
        layer: int,
        reference_norm: np.ndarray | None = None,
    ) -> Tensor:
        """Deflected displacement; the reference norm comes from the pretrained attention on the
        same ``u`` unless a frozen-trajectory norm is passed in."""
        d = self.uatt_displacement(encoder, u, x_a, layer)
        if reference_norm is not None:
            return _rescale(d, Tensor(np.asarray(reference_norm, dtype=d.dtype)), self.cfg.epsilon_norm)
        reference, _ = encoder.attention_displacement(u, layer)
        return deflect(d, reference, self.cfg.epsilon_norm, self.cfg.detach_reference_norm)

    def hooks(self, x_a: Tensor, reference_norms: Mapping[int, np.ndarray] | None = None) -> dict:
        def make(layer):
            ref = None if reference_norms is None else reference_norms[layer]
            return lambda enc, u, lay: self.adapted_attention_sublayer(enc, u, x_a, lay, ref)

        return {layer: make(layer) for layer in self.layers}


class PartitionError(ValueError):
    pass


def count_parameters(shapes: Mapping[str, tuple[int, ...]], partition: Mapping) -> dict:
    """Parameter counts per group ('theta_P', 'theta_A', 'phi') and the encoder tuned fraction.

    ``partition`` maps every parameter name to its group, or each group to a set of names
    (in which case the sets must be disjoint).
    """
    if partition and not all(isinstance(v, str) for v in partition.values()):
        check_disjoint({g: set(v) for g, v in partition.items()})
        partition = {name: g for g, names in partition.items() for name in names}
    groups = {"theta_P": 0, "theta_A": 0, "phi": 0}
    missing = set(shapes) - set(partition)
    if missing:
        raise PartitionError(f"partition does not cover {sorted(missing)[:5]}")
    for name, group in partition.items():
        if group not in groups:
            raise PartitionError(f"{name}: unknown group {group!r}")
        if name not in shapes:
            raise PartitionError(f"{name}: not a model parameter")
        groups[group] += int(np.prod(shapes[name], dtype=np.int64))
    encoder = groups["theta_P"] + groups["theta_A"]
    groups["tuned_fraction"] = groups["theta_A"] / encoder if encoder else 0.0
    return groups


def check_disjoint(groups: Mapping[str, set[str]]) -> None:
    names = list(groups)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            overlap = groups[a] & groups[b]
            if overlap:
                raise PartitionError(f"{a} and {b} overlap on {sorted(overlap)[:5]}")
