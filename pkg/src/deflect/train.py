"""Optimisation of θ_A ∪ φ with AdamW and a multi-step schedule; evaluation and
displacement-norm diagnostics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from deflect import tensor as T
from deflect.metrics import Metrics, compute_metrics
from deflect.model import IGNORE_INDEX, Batch, Model
from deflect.tensor import Tensor, parameters_checksum
from deflect.vit import ConfigError, VisionTransformer

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    milestones: tuple[float, ...] = (0.6, 0.9)
    decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    max_steps: int | None = None
    record_norms: bool = False
    eval_every_epoch: bool = True
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        errors = self.validate()
        if errors:
            raise ConfigError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        m = self.milestones
        if any(not 0 < x < 1 for x in m) or any(a >= b for a, b in zip(m, m[1:])):
            errors.append(f"milestones must be strictly increasing in (0, 1), got {m}")
        if self.epochs < 0 or self.batch_size < 1:
            errors.append("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            errors.append("learning_rate must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            errors.append("max_steps must be >= 0")
        return errors


def learning_rate(step: int, total: int, cfg: TrainConfig) -> float:
    """base * decay ** #{milestones <= step / total}."""
    if total <= 0:
        return cfg.learning_rate
    frac = step / total
    return cfg.learning_rate * cfg.decay ** sum(m <= frac for m in cfg.milestones)


class AdamW:
    """Adam with decoupled weight decay applied to matrices only."""

    def __init__(self, params: Mapping[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def decays(self, name: str, p: Tensor) -> bool:
        return p.ndim >= 2

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            if self.decays(name, p) and c.weight_decay:
                p.data -= (lr * c.weight_decay) * p.data
            update = (m / bc1) / (np.sqrt(v / bc2) + c.adam_eps)
            p.data -= (lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- batching ------------------------------------------------------------------

def precompute_spectral(model: Model, split) -> np.ndarray | None:
    if model.method.kind != "deflect":
        return None
    cache = getattr(split, "_spectral_cache", None)
    key = (repr(model.upe_cfg), model.encoder.cfg.patch_size)
    if cache is not None and cache[0] == key:
        return cache[1]
    feats = model.spectral_raw(Batch(split.images, ids=list(split.ids)))
    split._spectral_cache = (key, feats)
    return feats


def iter_batches(model: Model, split, batch_size: int, order=None) -> Iterator[Batch]:
    order = np.arange(len(split)) if order is None else order
    spectral = precompute_spectral(model, split)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            images=split.images[idx],
            labels=split.labels[idx],
            spectral=None if spectral is None else spectral[idx],
            ids=[split.ids[i] for i in idx],
        )


def evaluate(model: Model, split, batch_size: int = 32) -> Metrics:
    preds, labels = [], []
    for batch in iter_batches(model, split, batch_size):
        preds.append(model.predict(batch))
        labels.append(batch.labels)
    ignore = IGNORE_INDEX if model.task == "segmentation" else None
    return compute_metrics(np.concatenate(preds), np.concatenate(labels), model.num_classes, ignore)


def _batch_stats(batch: Batch, logits: Tensor | None) -> str:
    x = batch.images
    parts = [f"images mean={x.mean():.4g} std={x.std():.4g} min={x.min():.4g} max={x.max():.4g}"]
    if logits is not None:
        lg = logits.data
        parts.append(f"logits finite={np.isfinite(lg).mean():.3f} absmax={np.nanmax(np.abs(lg)):.4g}")
    parts.append(f"ids={batch.ids[:4]}")
    return "; ".join(parts)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    frozen_checksum_before: str = ""
    frozen_checksum_after: str = ""

    @property
    def frozen_intact(self) -> bool:
        return self.frozen_checksum_before == self.frozen_checksum_after

    def rows(self, metric: str, split: str = "train") -> list[float]:
        return [r["value"] for r in self.history if r["metric"] == metric and r["split"] == split]


def train(model: Model, splits: Mapping, cfg: TrainConfig) -> TrainResult:
    """Minimise the task loss over the method's trainable parameters only."""
    train_split = splits["train"]
    val_split = splits.get("val")
    model.set_trainable()
    trainable = model.trainable()
    frozen = model.frozen()
    result = TrainResult(frozen_checksum_before=parameters_checksum(frozen[k] for k in sorted(frozen)))
    opt = AdamW(trainable, cfg)
    rng = np.random.default_rng(cfg.seed)
    per_epoch = -(-len(train_split) // cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    step = 0
    epoch = 0
    while step < total:
        losses = []
        lr_epoch = learning_rate(step, total, cfg)
        for batch in iter_batches(model, train_split, cfg.batch_size, rng.permutation(len(train_split))):
            if step >= total:
                break
            lr = learning_rate(step, total, cfg)
            opt.zero_grad()
            loss, logits = model.loss(batch)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite loss at step {step}: {_batch_stats(batch, logits)}")
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data))
            step += 1
        result.history.append({"epoch": epoch, "split": "train", "metric": "loss", "value": float(np.mean(losses))})
        result.history.append({"epoch": epoch, "split": "train", "metric": "lr", "value": lr_epoch})
        if val_split is not None and cfg.eval_every_epoch:
            for k, v in evaluate(model, val_split, cfg.batch_size).summary().items():
                result.history.append({"epoch": epoch, "split": "val", "metric": k, "value": v})
        if cfg.record_norms and val_split is not None:
            probe = next(iter_batches(model, val_split, cfg.batch_size))
            with T.no_grad():
                state = model.encode(probe, record_norms=True)
            for layer, norms in enumerate(state.displacement_norms, start=1):
                result.history.append(
                    {"epoch": epoch, "split": "val", "metric": f"disp_norm_l{layer}", "value": float(norms.mean())}
                )
        log.info("epoch %d step %d loss %.4f", epoch, step, np.mean(losses))
        epoch += 1
    result.steps = step
    for p in trainable.values():
        p.grad = None
    result.frozen_checksum_after = parameters_checksum(frozen[k] for k in sorted(frozen))
    return result


# -- diagnostics ---------------------------------------------------------------------

def displacement_norm_report(model: Model, reference: Model | VisionTransformer, split, batch_size: int = 32) -> np.ndarray:
    """Per-layer mean | ||Δ1 z||_model - ||Δ1 z||_reference | over a probe split.

    ``reference`` is the frozen model (or bare frozen encoder) fed the same RGB input.
    """
    diffs = []
    for batch in iter_batches(model, split, batch_size):
        with T.no_grad():
            adapted = model.encode(batch, record_norms=True)
            if isinstance(reference, Model):
                frozen = reference.encode(batch, record_norms=True)
            else:
                frozen = reference.transport(reference.patch_embed(model.patches(batch.images)), record_norms=True)
        diffs.append(
            np.stack([np.abs(a - f).mean(axis=-1) for a, f in zip(adapted.displacement_norms, frozen.displacement_norms)], axis=1)
        )
    return np.concatenate(diffs).mean(axis=0)


def norm_constraint_violation(model: Model, batch: Batch) -> dict[int, float]:
    """Max relative gap, per adapted layer, between the displacement the model actually adds
    and the pretrained attention displacement on the same sublayer input."""
    if model.method.kind != "deflect":
        raise ConfigError("norm constraint only applies to deflect models")
    seen: dict[int, float] = {}

    def probe(layer, hook):
        def wrapped(e, u, lay):
            out = hook(e, u, lay)
            ref, _ = e.attention_displacement(u, lay)
            a = np.linalg.norm(out.data.astype(np.float64), axis=-1)
            r = np.linalg.norm(ref.data.astype(np.float64), axis=-1)
            seen[lay] = float((np.abs(a - r) / r).max())
            return out

        return wrapped

    with T.no_grad():
        x = model.embed(batch)
        hooks = model.hooks(batch, x)
        model.encoder.transport(x, {k: probe(k, h) for k, h in hooks.items()})
    return seen
