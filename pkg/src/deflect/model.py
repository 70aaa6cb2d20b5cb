"""Encoder + PEFT method + task head, with the parameter partition each method induces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from deflect import tensor as T
from deflect.adapter import (
    AdapterConfig,
    DeflectAdapter,
    adapter_param_shapes,
    count_parameters,
    init_adapter_params,
)
from deflect.peft import (
    PeftMethod,
    apply_lora,
    encoder_partition,
    lora_param_shapes,
    multispectral_band_order,
    multispectral_stem_init,
)
from deflect.tensor import Tensor
from deflect.upe import UpeConfig, spectral_features
from deflect.vit import (
    RGB_BANDS,
    ConfigError,
    LatentState,
    VisionTransformer,
    VitConfig,
    extract_patches,
    vit_param_shapes,
    xavier_uniform,
)

TASKS = ("classification", "segmentation")
IGNORE_INDEX = 255


def head_param_shapes(cfg: VitConfig, num_classes: int) -> dict[str, tuple[int, ...]]:
    return {"head.weight": (cfg.embed_dim, num_classes), "head.bias": (num_classes,)}


def model_param_shapes(
    vit_cfg: VitConfig,
    method: PeftMethod,
    num_classes: int,
    adapter_cfg: AdapterConfig | None = None,
    spectral_dim: int = 20,
    use_projection: bool = True,
    in_channels: int = 3,
) -> dict[str, tuple[int, ...]]:
    """Shape table of every parameter; lets budgets be counted without allocating weights."""
    shapes = vit_param_shapes(vit_cfg, in_channels if method.stem != "rgb" else 3)
    if method.kind == "lora":
        shapes.update(lora_param_shapes(vit_cfg, method.lora_rank, method.lora_targets))
    elif method.kind == "deflect":
        shapes.update(adapter_param_shapes(vit_cfg, adapter_cfg or AdapterConfig(), spectral_dim, use_projection))
    shapes.update(head_param_shapes(vit_cfg, num_classes))
    return shapes


def method_partition(shapes: Mapping[str, tuple], method: PeftMethod) -> dict[str, str]:
    encoder_names = [n for n in shapes if not n.startswith(("head.", "lora.", "adapter.", "upe."))]
    part = encoder_partition(encoder_names, method)
    for name in shapes:
        if name.startswith("head."):
            part[name] = "phi"
        elif name.startswith(("lora.", "adapter.", "upe.")):
            part[name] = "theta_A"
    return part


def parameter_budget(vit_cfg: VitConfig, method: PeftMethod, num_classes: int = 10, **kw) -> dict:
    shapes = model_param_shapes(vit_cfg, method, num_classes, **kw)
    return count_parameters(shapes, method_partition(shapes, method))


@dataclass
class Batch:
    images: np.ndarray  # (B, C, H, W)
    labels: np.ndarray | None = None  # (B,) or (B, H, W)
    spectral: np.ndarray | None = None  # (B, n, q*s) raw UPE features
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)


class Model:
    def __init__(
        self,
        encoder: VisionTransformer,
        method: PeftMethod,
        task: str,
        num_classes: int,
        band_map: Mapping[str, int],
        head_params: Mapping[str, Tensor],
        adapter: DeflectAdapter | None = None,
        lora_params: Mapping[str, Tensor] | None = None,
        upe_cfg: UpeConfig | None = None,
    ):
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        if method.kind == "deflect" and (adapter is None or upe_cfg is None):
            raise ConfigError("deflect needs an adapter and a UPE config")
        self.encoder = encoder
        self.method = method
        self.task = task
        self.num_classes = num_classes
        self.band_map = dict(band_map)
        self.head = dict(head_params)
        self.adapter = adapter
        self.lora_params = dict(lora_params or {})
        self.upe_cfg = upe_cfg
        self.set_trainable()

    # -- parameters ----------------------------------------------------------
    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.encoder.params)
        out.update(self.lora_params)
        if self.adapter is not None:
            out.update(self.adapter.params)
        out.update(self.head)
        return out

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.params.items()}

    def partition(self) -> dict[str, str]:
        return method_partition(self.shapes(), self.method)

    def groups(self) -> dict[str, list[str]]:
        out = {"theta_P": [], "theta_A": [], "phi": []}
        for name, g in self.partition().items():
            out[g].append(name)
        return out

    def count_parameters(self) -> dict:
        return count_parameters(self.shapes(), self.partition())

    def trainable(self) -> dict[str, Tensor]:
        params = self.params
        return {n: params[n] for n, g in self.partition().items() if g != "theta_P"}

    def frozen(self) -> dict[str, Tensor]:
        params = self.params
        return {n: params[n] for n, g in self.partition().items() if g == "theta_P"}

    def set_trainable(self) -> None:
        part = self.partition()
        for name, p in self.params.items():
            p.requires_grad = part[name] != "theta_P"

    def frozen_encoder(self) -> VisionTransformer:
        """The same θ_P without any LoRA update."""
        return VisionTransformer(self.encoder.cfg, self.encoder.params)

    # -- inputs ------------------------------------------------------------------
    def stem_bands(self) -> list[str]:
        return list(RGB_BANDS) if self.method.stem == "rgb" else multispectral_band_order(self.band_map)

    def patches(self, images: np.ndarray) -> Tensor:
        bands = self.stem_bands()
        missing = [b for b in bands if b not in self.band_map]
        if missing:
            raise ConfigError(f"band map lacks {missing}")
        sel = images[:, [self.band_map[b] for b in bands]]
        return Tensor(extract_patches(sel, self.encoder.cfg.patch_size).astype(self.encoder.dtype))

    def spectral_raw(self, batch: Batch) -> np.ndarray:
        if batch.spectral is not None:
            return batch.spectral
        ids = batch.ids or range(len(batch))
        return np.stack(
            [spectral_features(img, self.band_map, self.encoder.cfg.patch_size, self.upe_cfg, i) for img, i in zip(batch.images, ids)]
        )

    # -- forward -------------------------------------------------------------------
    def embed(self, batch: Batch) -> Tensor:
        return self.encoder.patch_embed(self.patches(batch.images))

    def hooks(self, batch: Batch, x: Tensor) -> dict | None:
        """Attention-sublayer replacements at the adapted layers (None for other methods)."""
        if self.method.kind != "deflect":
            return None
        raw = self.spectral_raw(batch).astype(self.encoder.dtype)
        x_a = self.adapter.spectral_embedding(Tensor(raw))
        ref = None
        if self.adapter.cfg.reference_from_frozen_trajectory:
            with T.no_grad():
                frozen = self.frozen_encoder().transport(x, record_norms=True)
            ref = {k: frozen.displacement_norms[k - 1] for k in self.adapter.layers}
        return self.adapter.hooks(x_a, ref)

    def encode(self, batch: Batch, record_norms: bool = False) -> LatentState:
        x = self.embed(batch)
        return self.encoder.transport(x, self.hooks(batch, x), record_norms=record_norms)

    def head_logits(self, z: Tensor) -> Tensor:
        h = self.encoder.final_norm(z)
        if self.task == "classification":
            h = T.mean(h, axis=1)
        return h @ self.head["head.weight"] + self.head["head.bias"]

    def logits(self, batch: Batch) -> Tensor:
        """(B, K) for classification, (B, n, K) per-patch logits for segmentation."""
        return self.head_logits(self.encode(batch).final)

    def pixel_index(self) -> np.ndarray:
        """Patch index of every pixel (row-major), i.e. nearest-neighbour upsampling."""
        cfg = self.encoder.cfg
        rows = np.arange(cfg.image_size) // cfg.patch_size
        return (rows[:, None] * cfg.grid + rows[None, :]).reshape(-1)

    def pixel_logits(self, patch_logits: Tensor) -> Tensor:
        return T.take(patch_logits, self.pixel_index(), axis=1)

    def loss(self, batch: Batch) -> tuple[Tensor, Tensor]:
        logits = self.logits(batch)
        if self.task == "classification":
            return T.cross_entropy(logits, batch.labels), logits
        pix = self.pixel_logits(logits)
        flat = T.reshape(pix, (-1, self.num_classes))
        return T.cross_entropy(flat, batch.labels.reshape(-1), ignore_index=IGNORE_INDEX), logits

    def predict(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            logits = self.logits(batch)
        if self.task == "classification":
            return logits.data.argmax(-1)
        cfg = self.encoder.cfg
        pred = logits.data.argmax(-1)[:, self.pixel_index()]
        return pred.reshape(len(batch), cfg.image_size, cfg.image_size)


def init_head(vit_cfg: VitConfig, num_classes: int, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    return {
        "head.weight": Tensor(xavier_uniform(rng, vit_cfg.embed_dim, num_classes, dtype), name="head.weight"),
        "head.bias": Tensor(np.zeros(num_classes, dtype), name="head.bias"),
    }


def build_model(
    encoder_params: Mapping[str, Tensor],
    vit_cfg: VitConfig,
    method: PeftMethod,
    task: str,
    num_classes: int,
    band_map: Mapping[str, int],
    adapter_cfg: AdapterConfig | None = None,
    upe_cfg: UpeConfig | None = None,
    seed: int = 0,
) -> Model:
    """Copy ``encoder_params`` (the pretrained RGB encoder) and attach the method's new parameters."""
    params = {k: Tensor(v.data.copy(), name=k) for k, v in encoder_params.items()}
    dtype = params["pos_embed"].dtype
    if method.stem != "rgb":
        order = multispectral_band_order(band_map)
        missing = [b for b in order if b not in band_map]
        if missing:
            raise ConfigError(f"band map lacks {missing}")
        params["patch_embed.weight"] = Tensor(
            multispectral_stem_init(params["patch_embed.weight"].data, vit_cfg.patch_size, len(order), method.stem, seed + 17),
            name="patch_embed.weight",
        )
    encoder = VisionTransformer(vit_cfg, params)
    lora = {}
    adapter = None
    if method.kind == "lora":
        lora = apply_lora(encoder, method.lora_rank, method.lora_targets, seed=seed + 1)
    elif method.kind == "deflect":
        adapter_cfg = adapter_cfg or AdapterConfig()
        upe_cfg = upe_cfg or UpeConfig()
        adapter = DeflectAdapter(
            vit_cfg,
            adapter_cfg,
            init_adapter_params(vit_cfg, adapter_cfg, upe_cfg.raw_dim, upe_cfg.use_projection, seed + 2, dtype),
            upe_cfg.use_projection,
        )
    head = init_head(vit_cfg, num_classes, seed + 3, dtype)
    return Model(encoder, method, task, num_classes, band_map, head, adapter, lora, upe_cfg)
