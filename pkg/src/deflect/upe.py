"""Untangled patch embedding: RGB through the frozen stem, everything else
summarized per patch by order statistics of spectral indices."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from deflect import tensor as T
from deflect.tensor import Tensor
from deflect.vit import ConfigError, VisionTransformer, patch_embed_rgb, xavier_uniform

INDEX_EPS = 1e-8

STATISTICS = ("mean", "std", "min", "max", "Q1", "Q3", "q0.1", "q0.4", "q0.6", "q0.9")
_QUANTILE_LEVELS = {"Q1": 0.25, "Q3": 0.75, "q0.1": 0.1, "q0.4": 0.4, "q0.6": 0.6, "q0.9": 0.9}


@dataclass(frozen=True)
class SpectralIndexDef:
    """value = sum(numerator[b] * band_b) / sum(denominator[b] * band_b)."""

    name: str
    numerator: Mapping[str, float]
    denominator: Mapping[str, float]

    @classmethod
    def normalized_difference(cls, name: str, a: str, b: str) -> "SpectralIndexDef":
        return cls(name, {a: 1.0, b: -1.0}, {a: 1.0, b: 1.0})

    @property
    def bands(self) -> set[str]:
        return set(self.numerator) | set(self.denominator)

    def to_dict(self) -> dict:
        return {"name": self.name, "numerator": dict(self.numerator), "denominator": dict(self.denominator)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SpectralIndexDef":
        if "plus" in d or "minus" in d:
            return cls.normalized_difference(d["name"], d["plus"], d["minus"])
        return cls(d["name"], dict(d["numerator"]), dict(d["denominator"]))


NDVI = SpectralIndexDef.normalized_difference("NDVI", "NIR", "R")
NDTI = SpectralIndexDef.normalized_difference("NDTI", "R", "G")


def default_index_defs(band_names: Sequence[str]) -> list[SpectralIndexDef]:
    """NDVI, NDTI, and one normalized difference against Red per other non-RGB band."""
    defs = []
    names = set(band_names)
    if {"NIR", "R"} <= names:
        defs.append(NDVI)
    if {"R", "G"} <= names:
        defs.append(NDTI)
    for band in band_names:
        if band in ("R", "G", "B", "NIR") or "R" not in names:
            continue
        defs.append(SpectralIndexDef.normalized_difference(f"ND_{band}_R", band, "R"))
    return defs


@dataclass
class UpeConfig:
    sample_fraction: float = 0.10
    index_defs: list[SpectralIndexDef] = field(default_factory=lambda: [NDVI, NDTI])
    statistics: tuple[str, ...] = STATISTICS
    use_projection: bool = True
    seed: int = 0

    def __post_init__(self):
        self.statistics = tuple(self.statistics)
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        if not 0.0 < self.sample_fraction <= 1.0:
            errors.append(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        unknown = [s for s in self.statistics if s not in STATISTICS]
        if unknown:
            errors.append(f"unknown statistics {unknown}")
        if not self.index_defs:
            errors.append("index list is empty")
        if not self.statistics:
            errors.append("statistics list is empty")
        return errors

    @property
    def raw_dim(self) -> int:
        return len(self.index_defs) * len(self.statistics)


def sample_count(patch_pixels: int, fraction: float) -> int:
    # round before ceil so 0.1 * 100 stays 10 despite float error
    return max(1, min(patch_pixels, math.ceil(round(fraction * patch_pixels, 9))))


def sample_pixel_set(patch: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of ceil(fraction * p*p) pixels from a C x p x p patch.

    Returns the sampled pixel spectra, shape (k, C).
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"sample fraction must be in (0, 1], got {fraction}")
    c = patch.shape[0]
    flat = patch.reshape(c, -1)
    k = sample_count(flat.shape[1], fraction)
    idx = rng.choice(flat.shape[1], size=k, replace=False)
    return flat[:, idx].T


def _combine(pixels: np.ndarray, weights: Mapping[str, float], band_map: Mapping[str, int]) -> np.ndarray:
    out = np.zeros(pixels.shape[:-1], dtype=np.float64)
    for band, w in weights.items():
        out = out + w * pixels[..., band_map[band]]
    return out


def compute_indices(pixels: np.ndarray, defs: Sequence[SpectralIndexDef], band_map: Mapping[str, int]) -> np.ndarray:
    """(..., C) pixel spectra -> (..., len(defs)) index values."""
    pixels = np.asarray(pixels, dtype=np.float64)
    for d in defs:
        missing = sorted(d.bands - set(band_map))
        if missing:
            raise ConfigError(f"index {d.name} needs band(s) {missing} absent from band map")
    cols = []
    for d in defs:
        num = _combine(pixels, d.numerator, band_map)
        den = _combine(pixels, d.denominator, band_map)
        den = np.where(np.abs(den) < INDEX_EPS, INDEX_EPS, den)
        cols.append(num / den)
    return np.stack(cols, axis=-1)


def compute_statistics(values: np.ndarray, statistics: Sequence[str] = STATISTICS) -> np.ndarray:
    """Statistics over the sample axis (-2) of (..., k, q) values, index-major: (..., q * s)."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-2] == 0:
        raise ValueError("compute_statistics needs at least one sample")
    stats = []
    for s in statistics:
        if s == "mean":
            stats.append(values.mean(axis=-2))
        elif s == "std":
            stats.append(values.std(axis=-2))
        elif s == "min":
            stats.append(values.min(axis=-2))
        elif s == "max":
            stats.append(values.max(axis=-2))
        else:
            stats.append(np.quantile(values, _QUANTILE_LEVELS[s], axis=-2, method="linear"))
    out = np.stack(stats, axis=-1)  # (..., q, s)
    return out.reshape(*out.shape[:-2], -1)


def image_seed(global_seed: int, image_id) -> int:
    return zlib.crc32(f"{global_seed}:{image_id}".encode()) & 0xFFFFFFFF


def spectral_features(
    image: np.ndarray,
    band_map: Mapping[str, int],
    patch_size: int,
    cfg: UpeConfig,
    image_id=0,
) -> np.ndarray:
    """Raw (pre-projection) x_A features of one C x H x W image, shape (n, q * s)."""
    c, h, w = image.shape
    p = patch_size
    rng = np.random.default_rng(image_seed(cfg.seed, image_id))
    patches = image.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4).reshape(-1, c, p, p)
    k = sample_count(p * p, cfg.sample_fraction)
    flat = patches.reshape(len(patches), c, p * p)
    idx = np.stack([rng.choice(p * p, size=k, replace=False) for _ in range(len(patches))])
    sampled = np.take_along_axis(flat, idx[:, None, :], axis=2).transpose(0, 2, 1)  # (n, k, C)
    return compute_statistics(compute_indices(sampled, cfg.index_defs, band_map), cfg.statistics)


def projection_param_shapes(raw_dim: int, embed_dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "upe.proj.weight": (raw_dim, embed_dim),
        "upe.proj.bias": (embed_dim,),
        "upe.norm.gamma": (embed_dim,),
        "upe.norm.beta": (embed_dim,),
    }


def init_projection(raw_dim: int, embed_dim: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    return {
        "upe.proj.weight": Tensor(xavier_uniform(rng, raw_dim, embed_dim, dtype), name="upe.proj.weight"),
        "upe.proj.bias": Tensor(np.zeros(embed_dim, dtype), name="upe.proj.bias"),
        "upe.norm.gamma": Tensor(np.ones(embed_dim, dtype), name="upe.norm.gamma"),
        "upe.norm.beta": Tensor(np.zeros(embed_dim, dtype), name="upe.norm.beta"),
    }


def project_spectral(raw, params: Mapping[str, Tensor] | None, ln_eps: float = 1e-6) -> Tensor:
    """linear -> layer norm -> GELU; ``params=None`` is the no-projection ablation."""
    raw = T.as_tensor(raw)
    if params is None:
        return raw
    w = params["upe.proj.weight"]
    if raw.shape[-1] != w.shape[0]:
        raise T.ShapeError(f"spectral features of width {raw.shape[-1]} vs projection {w.shape}")
    h = raw @ w + params["upe.proj.bias"]
    return T.gelu(T.layer_norm(h, params["upe.norm.gamma"], params["upe.norm.beta"], ln_eps))


@dataclass
class EmbeddingPair:
    x_p: Tensor
    x_a: Tensor


def untangled_patch_embed(
    image: np.ndarray,
    band_map: Mapping[str, int],
    encoder: VisionTransformer,
    cfg: UpeConfig,
    proj_params: Mapping[str, Tensor] | None,
    image_id=0,
) -> EmbeddingPair:
    raw = spectral_features(image, band_map, encoder.cfg.patch_size, cfg, image_id)
    if proj_params is None and raw.shape[-1] != encoder.cfg.embed_dim:
        raise ConfigError(
            f"without projection the spectral width {raw.shape[-1]} must equal embed_dim {encoder.cfg.embed_dim}"
        )
    x_a = project_spectral(raw[None].astype(encoder.dtype), proj_params, encoder.cfg.ln_eps)
    x_p = patch_embed_rgb(image, band_map, encoder)
    return EmbeddingPair(x_p=x_p, x_a=x_a)
