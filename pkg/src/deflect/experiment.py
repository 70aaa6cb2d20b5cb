"""Config-driven runs: build data and model, train, write history/checkpoint/summary, re-evaluate."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from deflect.checkpoint import load_checkpoint, save_checkpoint
from deflect.config import ExperimentConfig
from deflect.data import Split, SyntheticTaskSpec, atomic_write, generate_dataset, read_dataset
from deflect.model import IGNORE_INDEX, Model, build_model
from deflect.peft import PeftMethod
from deflect.tensor import Tensor, parameters_checksum
from deflect.train import TrainConfig, TrainResult, evaluate, train
from deflect.vit import ConfigError, VitConfig, init_vit_params

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


ENCODER_FILE = "encoder.dflt"


class CheckpointMismatch(RuntimeError):
    pass


def pretrain_encoder(vit_cfg: VitConfig, seed: int, steps: int, dtype=np.float32) -> dict[str, Tensor]:
    """Stand-in for a pretrained RGB encoder: a short supervised run on a synthetic RGB task.

    The task reuses the synthetic generator with its own seed; only R, G, B reach the
    encoder, so the result is an ordinary RGB model.
    """
    params = init_vit_params(vit_cfg, seed, dtype)
    if steps <= 0:
        return params
    spec = SyntheticTaskSpec(num_classes=4, ambiguous=(0, 1), image_size=vit_cfg.image_size, n_train=256, n_val=4, n_test=4)
    splits = generate_dataset(spec, seed + 1000)
    model = build_model(params, vit_cfg, PeftMethod("full"), "classification", spec.num_classes, spec.band_map, seed=seed)
    train(model, {"train": splits["train"]}, TrainConfig(epochs=10**6, max_steps=steps, learning_rate=1e-3, eval_every_epoch=False, seed=seed))
    return {k: Tensor(model.encoder.params[k].data.copy(), name=k) for k in params}


def _cached_pretrain(cfg: ExperimentConfig, dtype) -> dict[str, Tensor]:
    """Pretrain once per run directory; train, eval and diagnose then share the same encoder."""
    enc = cfg.encoder
    key = json.loads(json.dumps({"model": asdict(cfg.vit()), "seed": enc.seed, "steps": enc.pretrain_steps, "precision": enc.precision}))
    path = Path(cfg.output_dir) / ENCODER_FILE
    if path.exists():
        params, meta = load_checkpoint(path)
        if meta == key:
            return {k: Tensor(v, name=k) for k, v in params.items()}
        log.info("%s was pretrained with different settings; pretraining again", path)
    params = pretrain_encoder(cfg.vit(), enc.seed, enc.pretrain_steps, dtype)
    save_checkpoint(path, params, key)
    return params


def encoder_params(cfg: ExperimentConfig) -> dict[str, Tensor]:
    enc = cfg.encoder
    if enc.precision not in DTYPES:
        raise ConfigError(f"encoder.precision must be one of {sorted(DTYPES)}")
    dtype = DTYPES[enc.precision]
    if enc.init == "random":
        return init_vit_params(cfg.vit(), enc.seed, dtype)
    if enc.init == "pretrain":
        return _cached_pretrain(cfg, dtype)
    raise ConfigError(f"encoder.init must be 'random' or 'pretrain', got {enc.init!r}")


@dataclass
class TaskData:
    splits: dict[str, Split]
    task: str
    num_classes: int
    band_names: list[str]


def load_data(cfg: ExperimentConfig) -> TaskData:
    if cfg.data.path is not None:
        splits = read_dataset(cfg.data.path)
        if "train" not in splits:
            raise ConfigError(f"{cfg.data.path}: no train split found")
        labels = splits["train"].labels
        task = "classification" if labels.ndim == 1 else "segmentation"
        seen = np.concatenate([s.labels.reshape(-1) for s in splits.values()])
        num_classes = int(seen[seen != IGNORE_INDEX].max()) + 1
        band_map = splits["train"].band_map
    else:
        spec = cfg.data.task_spec()
        if spec.image_size != cfg.vit().image_size:
            raise ConfigError(f"data image_size {spec.image_size} differs from model image_size {cfg.vit().image_size}")
        splits = generate_dataset(spec, cfg.data.seed)
        task, num_classes, band_map = spec.task, spec.num_classes, spec.band_map
    names = sorted(band_map, key=band_map.get)
    return TaskData(splits, task, num_classes, names)


def build_experiment(cfg: ExperimentConfig, data: TaskData | None = None) -> tuple[Model, TaskData]:
    data = data or load_data(cfg)
    band_map = {b: i for i, b in enumerate(data.band_names)}
    model = build_model(
        encoder_params(cfg),
        cfg.vit(),
        cfg.method,
        data.task,
        data.num_classes,
        band_map,
        adapter_cfg=cfg.adapter,
        upe_cfg=cfg.upe.build(data.band_names),
        seed=cfg.seed,
    )
    return model, data


def frozen_checksum(model: Model) -> str:
    frozen = model.frozen()
    return parameters_checksum(frozen[k] for k in sorted(frozen))


def write_history(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "split", "metric", "value"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "value": repr(float(row["value"]))})


def run_training(cfg: ExperimentConfig) -> dict:
    """Train per config; writes metrics.csv, adapter.dflt, summary.json and config.json."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    model, data = build_experiment(cfg)
    result: TrainResult = train(model, data.splits, cfg.training)
    if not result.frozen_intact:
        raise RuntimeError("frozen parameters changed during training")
    last_epoch = max((r["epoch"] for r in result.history), default=0)
    final = {}
    rows = list(result.history)
    for split in ("val", "test"):
        if split in data.splits:
            final[split] = evaluate(model, data.splits[split], cfg.training.batch_size).summary()
            rows += [{"epoch": last_epoch, "split": f"final_{split}", "metric": k, "value": v} for k, v in final[split].items()]
    write_history(out / "metrics.csv", rows)

    counts = model.count_parameters()
    ckpt_config = {"experiment": cfg.to_dict(), "theta_P_checksum": result.frozen_checksum_after, "steps": result.steps}
    ckpt_bytes = save_checkpoint(out / "adapter.dflt", model.trainable(), ckpt_config)
    summary = {
        "method": cfg.method.kind,
        "task": data.task,
        "steps": result.steps,
        "parameters": {k: counts[k] for k in ("theta_P", "theta_A", "phi")},
        "tuned_fraction": counts["tuned_fraction"],
        "final": final,
        "frozen_intact": result.frozen_intact,
        "theta_P_checksum": result.frozen_checksum_after,
        "checkpoint": "adapter.dflt",
        "checkpoint_bytes": ckpt_bytes,
        "seconds": round(time.perf_counter() - start, 3),
    }
    atomic_write(out / "summary.json", (json.dumps(summary, indent=2) + "\n").encode())
    cfg.save(out / "config.json")
    return summary


def load_trained(cfg: ExperimentConfig, checkpoint) -> tuple[Model, TaskData]:
    """Rebuild the model from ``cfg`` and overwrite its trainable tensors from ``checkpoint``."""
    model, data = build_experiment(cfg)
    params, meta = load_checkpoint(checkpoint)
    trainable = model.trainable()
    missing = sorted(set(trainable) - set(params))
    extra = sorted(set(params) - set(trainable))
    if missing or extra:
        raise CheckpointMismatch(f"checkpoint does not match the configured method: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in params.items():
        if arr.shape != trainable[name].shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape} vs model {trainable[name].shape}")
        trainable[name].data[...] = arr
    expected = meta.get("theta_P_checksum")
    if expected is not None and expected != frozen_checksum(model):
        raise CheckpointMismatch("frozen encoder differs from the one the checkpoint was trained against")
    return model, data


def run_eval(cfg: ExperimentConfig, checkpoint) -> dict:
    model, data = load_trained(cfg, checkpoint)
    return {
        split: evaluate(model, data.splits[split], cfg.training.batch_size).summary()
        for split in ("val", "test")
        if split in data.splits
    }
