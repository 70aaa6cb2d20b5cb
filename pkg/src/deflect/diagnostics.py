"""Diagnostic suites: algebraic identities, displacement norms, gradients and budgets.

Every suite returns a :class:`SuiteResult`; a non-empty ``violations`` list means a
tolerance was exceeded.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from deflect import tensor as T
from deflect.adapter import AdapterConfig, DeflectAdapter, init_adapter_params
from deflect.config import ExperimentConfig
from deflect.data import SyntheticTaskSpec, generate_dataset
from deflect.gradcheck import check_gradients
from deflect.model import Batch, build_model, parameter_budget
from deflect.peft import PeftMethod, entanglement_diagnostic
from deflect.tensor import Tensor
from deflect.train import displacement_norm_report, iter_batches, norm_constraint_violation
from deflect.upe import UpeConfig, default_index_defs
from deflect.vit import VisionTransformer, VitConfig, init_vit_params

SUITES = ("algebra", "norms", "gradients", "budget")


@dataclass
class SuiteResult:
    name: str
    lines: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)
    values: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


# -- algebra ---------------------------------------------------------------------

def _random_lowrank(rng, d: int, r: int) -> np.ndarray:
    return rng.normal(0, 0.1, (d, r)) @ rng.normal(0, 0.1, (r, d))


def algebra_suite(vit_cfg: VitConfig, seeds: int = 50, tol: float = 1e-10, rank: int = 4, n_tokens: int = 16) -> SuiteResult:
    """Low-rank score expansions and the four-term uAtt sum versus their direct forms (float64)."""
    res = SuiteResult("algebra")
    d = vit_cfg.embed_dim
    worst = {"lora_four_term": 0.0, "lora_eight_term": 0.0, "uatt_four_term": 0.0}
    small = dataclasses.replace(vit_cfg, depth=1)
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x_p, x_a = rng.normal(size=(n_tokens, d)), rng.normal(size=(n_tokens, d))
        w_q, w_k = rng.normal(0, d**-0.5, (d, d)), rng.normal(0, d**-0.5, (d, d))
        diag = entanglement_diagnostic(x_p, x_a, w_q, w_k, _random_lowrank(rng, d, rank), _random_lowrank(rng, d, rank))
        worst["lora_four_term"] = max(worst["lora_four_term"], diag["err_four"])
        worst["lora_eight_term"] = max(worst["lora_eight_term"], diag["err_eight"])

        enc = VisionTransformer(small, init_vit_params(small, seed, np.float64))
        acfg = AdapterConfig(adapted_layers=(1,), rank=rank)
        params = init_adapter_params(small, acfg, d, False, seed, np.float64)
        for name, p in params.items():
            if name.endswith(".B"):
                p.data[...] = rng.normal(0, 0.1, p.shape)
        adapter = DeflectAdapter(small, acfg, params, use_projection=False)
        u = Tensor(rng.normal(size=(2, n_tokens, d)))
        xa = Tensor(rng.normal(size=(2, n_tokens, d)))
        with T.no_grad():
            combined = adapter.uatt_scores(enc, u, xa, 1).data
            expanded = adapter.uatt_scores(enc, u, xa, 1, expanded=True).data
        worst["uatt_four_term"] = max(worst["uatt_four_term"], float(np.abs(combined - expanded).max()))
    for name, err in worst.items():
        res.lines.append(f"{name:<18} max abs error {err:.3e} over {seeds} seeds (tol {tol:g})")
        if not err <= tol:
            res.violations.append(f"{name}: {err:.3e} > {tol:g}")
    res.values = worst
    return res


# -- displacement norms ------------------------------------------------------------

def norms_suite(model, split, reference: VisionTransformer | None = None, probe: int = 20, tol: float = 1e-5) -> SuiteResult:
    """Per-layer |norm difference| to the frozen trajectory plus the deflection constraint.

    ``reference`` is the untouched pretrained encoder; it defaults to the model's own θ_P,
    which is only right for methods that leave the encoder weights alone.
    """
    res = SuiteResult("norms")
    sub = dataclasses.replace(split, images=split.images[:probe], labels=split.labels[:probe], ids=list(split.ids[:probe]))
    frozen = reference or model.frozen_encoder()
    report = displacement_norm_report(model, frozen, sub)
    adapted = set(model.adapter.layers) if model.adapter is not None else set()
    probe_batch = next(iter_batches(model, sub, probe))
    with T.no_grad():
        ref = frozen.transport(frozen.patch_embed(model.patches(probe_batch.images)), record_norms=True)
    scale = np.array([float(n.mean()) for n in ref.displacement_norms])
    res.lines.append("layer  mean|diff|   relative  adapted")
    for layer, (diff, s) in enumerate(zip(report, scale), start=1):
        res.lines.append(f"{layer:>5}  {diff:.3e}  {diff / s:.3e}  {'*' if layer in adapted else ''}")
    res.values["per_layer"] = report.tolist()
    if model.method.kind == "deflect":
        first = min(adapted)
        # the trajectory up to and including the first adapted layer matches the frozen one
        for layer in range(1, first + 1):
            rel = report[layer - 1] / scale[layer - 1]
            if not rel <= tol:
                res.violations.append(f"layer {layer}: relative norm difference {rel:.3e} > {tol:g}")
        gaps = norm_constraint_violation(model, probe_batch)
        res.values["constraint"] = gaps
        for layer, gap in sorted(gaps.items()):
            res.lines.append(f"constraint layer {layer}: max relative gap {gap:.3e}")
            if not gap <= tol:
                res.violations.append(f"constraint layer {layer}: {gap:.3e} > {tol:g}")
    return res


# -- gradients --------------------------------------------------------------------

TINY_VIT = VitConfig(image_size=16, patch_size=8, depth=4, embed_dim=16, num_heads=2)


def tiny_gradient_model(method: PeftMethod | None = None, seed: int = 0, adapter_cfg: AdapterConfig | None = None):
    """float64 model (d=16, 4 tokens, depth 4; two adapted layers of rank 2) with every
    trainable tensor randomised so no gradient path is trivially zero."""
    method = method or PeftMethod("deflect")
    if method.kind == "lora":
        method = dataclasses.replace(method, lora_rank=2)
    spec = SyntheticTaskSpec(image_size=16, n_train=4, n_val=4, n_test=4)
    split = generate_dataset(spec, seed)["train"]
    adapter_cfg = adapter_cfg or AdapterConfig(adapted_layers=(2, 4), rank=2)
    model = build_model(
        init_vit_params(TINY_VIT, seed, np.float64),
        TINY_VIT,
        method,
        "classification",
        spec.num_classes,
        spec.band_map,
        adapter_cfg=adapter_cfg,
        upe_cfg=UpeConfig(index_defs=default_index_defs(spec.bands)),
        seed=seed,
    )
    rng = np.random.default_rng(seed + 99)
    for p in model.trainable().values():
        p.data += rng.normal(0, 0.1, p.shape)
    batch = next(iter_batches(model, split, 3))
    return model, batch


def gradients_suite(method: PeftMethod | None = None, tol: float = 1e-4, h: float = 1e-5, seed: int = 0) -> SuiteResult:
    res = SuiteResult("gradients")
    model, batch = tiny_gradient_model(method, seed)
    reports = check_gradients(lambda: model.loss(batch)[0], model.trainable(), h=h)
    for r in reports:
        res.lines.append(f"{r.name:<40} n={r.size:<5} max rel {r.max_rel_error:.2e}")
        if not r.passed(tol):
            res.violations.append(f"{r.name}: relative error {r.max_rel_error:.2e} > {tol:g}")
    res.values = {r.name: r.max_rel_error for r in reports}
    return res


# -- parameter budget ----------------------------------------------------------------

BUDGET_RANKS = (8, 16, 32, None)


def budget_table(vit_cfg: VitConfig, upe: UpeConfig, num_classes: int = 10, adapter_cfg: AdapterConfig | None = None) -> list[dict]:
    adapter_cfg = adapter_cfg or AdapterConfig()
    rows = []
    for kind in ("frozen", "normtune", "bitfit", "full"):
        b = parameter_budget(vit_cfg, PeftMethod(kind), num_classes)
        rows.append({"method": kind, "rank": None, **b})
    for rank in BUDGET_RANKS[:-1]:
        b = parameter_budget(vit_cfg, PeftMethod("lora", lora_rank=rank), num_classes)
        rows.append({"method": "lora", "rank": rank, **b})
    for rank in BUDGET_RANKS:
        acfg = dataclasses.replace(adapter_cfg, rank=rank)
        b = parameter_budget(
            vit_cfg, PeftMethod("deflect"), num_classes, adapter_cfg=acfg, spectral_dim=upe.raw_dim, use_projection=upe.use_projection
        )
        rows.append({"method": "deflect", "rank": rank, **b})
    return rows


def budget_suite(vit_cfg: VitConfig, upe: UpeConfig, adapter_cfg: AdapterConfig | None = None) -> SuiteResult:
    res = SuiteResult("budget")
    rows = budget_table(vit_cfg, upe, adapter_cfg=adapter_cfg)
    res.lines.append(f"spectral features: {upe.raw_dim} ({len(upe.index_defs)} indices x {len(upe.statistics)} statistics)")
    res.lines.append(f"{'method':<9} {'rank':>5} {'theta_A':>12} {'tuned %':>9}")
    for r in rows:
        rank = "-" if r["rank"] is None and r["method"] != "deflect" else ("dense" if r["rank"] is None else r["rank"])
        res.lines.append(f"{r['method']:<9} {rank!s:>5} {r['theta_A']:>12,} {100 * r['tuned_fraction']:>9.4f}")
    frac = {(r["method"], r["rank"]): r["tuned_fraction"] for r in rows}
    d = [frac[("deflect", k)] for k in (8, 16, 32)]
    if not d[0] < d[1] < d[2]:
        res.violations.append(f"deflect fractions not increasing in rank: {d}")
    for k in (8, 16, 32):
        if not frac[("deflect", k)] < frac[("lora", k)]:
            res.violations.append(f"rank {k}: deflect {frac[('deflect', k)]:.5f} not below lora {frac[('lora', k)]:.5f}")
    res.values = {f"{m}:{k}": v for (m, k), v in frac.items()}
    return res


def run_suite(name: str, cfg: ExperimentConfig, model=None, data=None, reference=None) -> SuiteResult:
    if name == "algebra":
        return algebra_suite(cfg.vit())
    if name == "gradients":
        return gradients_suite(cfg.method)
    if name == "budget":
        if data is not None:
            bands = data.band_names
        elif cfg.data.path is None:
            bands = cfg.data.task_spec().bands
        else:
            from deflect.experiment import load_data

            bands = load_data(cfg).band_names
        return budget_suite(cfg.vit(), cfg.upe.build(list(bands)), cfg.adapter)
    if name == "norms":
        split = data.splits.get("val") or data.splits["train"]
        return norms_suite(model, split, reference)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
