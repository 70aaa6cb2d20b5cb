"""Experiment configuration: one JSON file per run, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from deflect.adapter import AdapterConfig
from deflect.data import SyntheticTaskSpec
from deflect.peft import PeftMethod
from deflect.train import TrainConfig
from deflect.upe import STATISTICS, SpectralIndexDef, UpeConfig, default_index_defs
from deflect.vit import PRESETS, ConfigError, VitConfig


class ConfigErrors(ConfigError):
    def __init__(self, errors: list[str]):
        super().__init__("\n".join(errors))
        self.errors = errors


@dataclass
class EncoderInit:
    init: str = "pretrain"  # pretrain | random
    seed: int = 0
    pretrain_steps: int = 200
    precision: str = "float32"


@dataclass
class UpeSection:
    sample_fraction: float = 0.10
    indices: list | str = "default"
    statistics: list[str] = field(default_factory=lambda: list(STATISTICS))
    use_projection: bool = True
    seed: int = 0

    def build(self, band_names) -> UpeConfig:
        if self.indices == "default":
            defs = default_index_defs(band_names)
        else:
            defs = [SpectralIndexDef.from_dict(d) for d in self.indices]
        return UpeConfig(self.sample_fraction, defs, tuple(self.statistics), self.use_projection, self.seed)


@dataclass
class DataSection:
    spec: dict | None = None
    path: str | None = None
    seed: int = 0

    def task_spec(self) -> SyntheticTaskSpec:
        return SyntheticTaskSpec(**(self.spec or {}))


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=lambda: {"preset": "small"})
    encoder: EncoderInit = field(default_factory=EncoderInit)
    method: PeftMethod = field(default_factory=PeftMethod)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    upe: UpeSection = field(default_factory=UpeSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    data: DataSection = field(default_factory=DataSection)
    output_dir: str = "runs/default"
    seed: int = 0

    def vit(self) -> VitConfig:
        return build_vit(self.model)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def build_vit(model: dict) -> VitConfig:
    model = dict(model)
    preset = model.pop("preset", None)
    if preset is not None and preset not in PRESETS:
        raise ConfigError(f"unknown model preset {preset!r}, choose from {sorted(PRESETS)}")
    base = dataclasses.asdict(PRESETS[preset]) if preset else {}
    unknown = set(model) - {f.name for f in dataclasses.fields(VitConfig)}
    if unknown:
        raise ConfigError(f"model: unknown keys {sorted(unknown)}")
    base.update(model)
    return VitConfig(**base)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, SpectralIndexDef):
        return x.to_dict()
    return x


_SECTIONS = {
    "encoder": EncoderInit,
    "method": PeftMethod,
    "adapter": AdapterConfig,
    "upe": UpeSection,
    "training": TrainConfig,
    "data": DataSection,
}


def _section(cls, raw: Any, name: str, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object, got {type(raw).__name__}")
        return None
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        errors.append(f"{name}: unknown keys {unknown}")
    try:
        return cls(**{k: v for k, v in raw.items() if k in known})
    except (ConfigError, TypeError, ValueError) as exc:
        errors.extend(f"{name}: {line}" for line in str(exc).split("; "))
        return None


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate everything and raise one ConfigErrors listing every problem found."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigErrors(["config root must be an object"])
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        errors.append(f"unknown top-level keys {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _section(cls, raw[name], name, errors)
    if "model" in raw:
        try:
            build_vit(raw["model"])
            kwargs["model"] = dict(raw["model"])
        except (ConfigError, TypeError) as exc:
            errors.append(f"model: {exc}")
    for key in ("output_dir", "seed"):
        if key in raw:
            kwargs[key] = raw[key]
    data = kwargs.get("data")
    if data is not None:
        if data.spec is not None and data.path is not None:
            errors.append("data: give either spec or path, not both")
        if data.path is None:
            try:
                data.task_spec()
            except (ConfigError, TypeError) as exc:
                errors.append(f"data.spec: {exc}")
    if errors:
        raise ConfigErrors(errors)
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigErrors([f"{path}: invalid JSON ({exc})"]) from exc
    return config_from_dict(raw)
