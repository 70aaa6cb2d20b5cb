import math

import numpy as np
import pytest

from conftest import leaf
from deflect import tensor as T
from deflect.adapter import (
    AdapterConfig,
    DeflectAdapter,
    PartitionError,
    count_parameters,
    deflect,
    default_adapted_layers,
    init_adapter_params,
)
from deflect.data import SyntheticTaskSpec, generate_dataset
from deflect.model import Batch, build_model, parameter_budget
from deflect.peft import PeftMethod
from deflect.tensor import Tensor
from deflect.train import TrainConfig, norm_constraint_violation, train
from deflect.upe import UpeConfig
from deflect.vit import PRESETS, ConfigError, VisionTransformer, VitConfig, block_prefix, init_vit_params

CFG = VitConfig(image_size=16, patch_size=4, depth=3, embed_dim=12, num_heads=3)


def make(rng, rank=4, layers=(2,), randomize=True, dtype=np.float64, cfg=CFG):
    enc = VisionTransformer(cfg, init_vit_params(cfg, 0, dtype))
    acfg = AdapterConfig(adapted_layers=layers, rank=rank)
    params = init_adapter_params(cfg, acfg, 20, use_projection=False, seed=1, dtype=dtype)
    if randomize:
        for p in params.values():
            p.data[...] = rng.normal(0, 0.3, p.shape)
    return enc, DeflectAdapter(cfg, acfg, params, use_projection=False)


def states(rng, n=None, b=2):
    n = n or CFG.num_patches
    return Tensor(rng.normal(size=(b, n, CFG.embed_dim))), Tensor(rng.normal(size=(b, n, CFG.embed_dim)))


def heads(x, h):
    b, n, d = x.shape
    return x.reshape(b, n, h, d // h)


# -- uAtt scores --------------------------------------------------------------

def test_zero_new_weights_give_pretrained_scores(rng):
    enc, ad = make(rng, randomize=False)
    u, x_a = states(rng)
    _, pretrained = enc.attention_displacement(u, 2)
    np.testing.assert_array_equal(ad.uatt_scores(enc, u, x_a, 2).data, pretrained.data)


def test_zero_spectral_input_gives_pretrained_scores(rng):
    enc, ad = make(rng)
    u, _ = states(rng)
    _, pretrained = enc.attention_displacement(u, 2)
    zero = Tensor(np.zeros(u.shape))
    np.testing.assert_array_equal(ad.uatt_scores(enc, u, zero, 2).data, pretrained.data)


@pytest.mark.parametrize("rank", [2, None])
def test_four_term_expansion_matches_combined_scores(rank, rng):
    enc, ad = make(rng, rank=rank)
    u, x_a = states(rng)
    combined = ad.uatt_scores(enc, u, x_a, 2).data
    expanded = ad.uatt_scores(enc, u, x_a, 2, expanded=True).data
    np.testing.assert_allclose(expanded, combined, rtol=0, atol=1e-10)


def test_misaligned_streams_rejected(rng):
    enc, ad = make(rng)
    u, _ = states(rng)
    with pytest.raises(T.ShapeError):
        ad.uatt_scores(enc, u, Tensor(np.zeros((2, 3, CFG.embed_dim))), 2)


# -- uAtt displacement ------------------------------------------------------------

def test_zero_new_weights_give_pretrained_displacement_bitwise(rng):
    enc, ad = make(rng, randomize=False, dtype=np.float32)
    u, x_a = states(rng)
    u, x_a = Tensor(u.data.astype(np.float32)), Tensor(x_a.data.astype(np.float32))
    reference, _ = enc.attention_displacement(u, 2)
    out = ad.uatt_displacement(enc, u, x_a, 2).data
    assert out.dtype == np.float32
    assert out.tobytes() == reference.data.tobytes()


def test_single_token_displacement(rng):
    enc, ad = make(rng)
    u, x_a = states(rng, n=1)
    p = {k: v.data for k, v in enc.params.items()}
    pre = f"{block_prefix(2)}.attn"
    w_av = ad.new_weight(2, "v")
    value = u.data @ p[f"{pre}.wv"] + p[f"{pre}.bv"] + x_a.data @ w_av
    expected = value @ p[f"{pre}.wo"] + p[f"{pre}.bo"]
    np.testing.assert_allclose(ad.uatt_displacement(enc, u, x_a, 2).data, expected, atol=1e-12)


def naive_uatt(enc, ad, u, x_a, layer):
    """Token-by-token, head-by-head loop over the unexpanded definition."""
    p = {k: v.data for k, v in enc.params.items()}
    pre = f"{block_prefix(layer)}.attn"
    h = CFG.num_heads
    dh = CFG.embed_dim // h
    proj = {}
    for t in "qkv":
        proj[t] = heads(u @ p[f"{pre}.w{t}"] + p[f"{pre}.b{t}"] + x_a @ ad.new_weight(layer, t), h)
    b, n, _ = u.shape
    out = np.zeros((b, n, CFG.embed_dim))
    for s in range(b):
        for i in range(n):
            cat = []
            for hh in range(h):
                scores = [sum(proj["q"][s, i, hh, c] * proj["k"][s, j, hh, c] for c in range(dh)) / math.sqrt(dh) for j in range(n)]
                top = max(scores)
                w = [math.exp(a - top) for a in scores]
                tot = sum(w)
                cat.extend(sum(w[j] / tot * proj["v"][s, j, hh, c] for j in range(n)) for c in range(dh))
            out[s, i] = np.array(cat) @ p[f"{pre}.wo"] + p[f"{pre}.bo"]
    return out


def test_displacement_matches_naive_loop(rng):
    enc, ad = make(rng)
    u, x_a = states(rng, b=1)
    np.testing.assert_allclose(ad.uatt_displacement(enc, u, x_a, 2).data, naive_uatt(enc, ad, u.data, x_a.data, 2), atol=1e-10)


# -- deflection ---------------------------------------------------------------------

def test_deflect_identity_up_to_eps(rng):
    d = rng.normal(size=(5, 6))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    out = deflect(Tensor(d), Tensor(d)).data
    np.testing.assert_allclose(out, d * norms / (norms + 1e-8), rtol=1e-14)
    np.testing.assert_allclose(out, d, rtol=1e-7)


def test_deflect_colinear_rows_rescale_to_reference(rng):
    ref = rng.normal(size=(4, 6))
    np.testing.assert_allclose(deflect(Tensor(2 * ref), Tensor(ref)).data, ref, rtol=1e-8)


def test_deflect_matches_reference_norms(rng):
    d, ref = rng.normal(size=(64, 16)), rng.normal(size=(64, 16)) * rng.uniform(0.1, 5, size=(64, 1))
    out = deflect(Tensor(d), Tensor(ref)).data
    got, want = np.linalg.norm(out, axis=1), np.linalg.norm(ref, axis=1)
    keep = np.linalg.norm(d, axis=1) > 1e-3
    assert np.all(np.abs(got - want)[keep] <= 1e-6 * want[keep])
    # direction preserved
    cos = (out * d).sum(1) / (np.linalg.norm(out, axis=1) * np.linalg.norm(d, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-12)


def test_deflect_zero_row_stays_finite():
    out = deflect(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3)))).data
    assert np.all(np.isfinite(out)) and np.all(out == 0)


def test_deflect_shape_mismatch():
    with pytest.raises(T.ShapeError):
        deflect(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))))


@pytest.mark.parametrize("detach", [False, True])
def test_reference_gradient_follows_flag(detach, rng):
    d, ref = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(3, 4)))
    T.sum(deflect(d, ref, detach_reference=detach) * Tensor(rng.normal(size=(3, 4)))).backward()
    if detach:
        assert ref.grad is None or not np.any(ref.grad)
    else:
        assert np.any(ref.grad)
    assert np.any(d.grad)


# -- full sublayer and network -------------------------------------------------------

def test_adapted_sublayer_norms_equal_pretrained(rng):
    enc, ad = make(rng)
    u, x_a = states(rng)
    out = ad.adapted_attention_sublayer(enc, u, x_a, 2).data
    ref, _ = enc.attention_displacement(u, 2)
    r = np.linalg.norm(ref.data, axis=-1)
    dn = np.linalg.norm(ad.uatt_displacement(enc, u, x_a, 2).data, axis=-1)
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), r * dn / (dn + 1e-8), rtol=1e-12)
    assert not np.allclose(out, ref.data)


def _models(dtype, seed=0):
    cfg = PRESETS["tiny"]
    spec = SyntheticTaskSpec(image_size=cfg.image_size, n_train=6, n_val=4, n_test=4)
    split = generate_dataset(spec, 0)["train"]
    enc = init_vit_params(cfg, 0, dtype)
    frozen = build_model(enc, cfg, PeftMethod("frozen"), "classification", 4, spec.band_map, seed=seed)
    adapted = build_model(enc, cfg, PeftMethod("deflect"), "classification", 4, spec.band_map,
                          adapter_cfg=AdapterConfig(adapted_layers=(2, 4)), seed=seed)
    return frozen, adapted, Batch(split.images, split.labels, ids=split.ids)


def _zero_init_gap(dtype, eps=1e-8):
    frozen, adapted, batch = _models(dtype)
    adapted.adapter.cfg.epsilon_norm = eps
    a, f = adapted.logits(batch).data, frozen.logits(batch).data
    assert a.dtype == dtype
    return np.max(np.abs(a - f)) / np.max(np.abs(f))


def test_zero_init_equals_frozen_network_32bit():
    assert _zero_init_gap(np.float32) <= 1e-6


@pytest.mark.xfail(strict=True, reason="eps=1e-8 over displacement norms near 0.02 shrinks each by ~5e-7 relative")
def test_zero_init_equals_frozen_network_64bit():
    assert _zero_init_gap(np.float64) <= 1e-12


def test_zero_init_gap_is_only_the_eps_guard():
    assert _zero_init_gap(np.float64, eps=1e-30) <= 1e-12


def test_depth_twelve_default_touches_four_sublayers(rng, monkeypatch):
    cfg = VitConfig(image_size=8, patch_size=4, depth=12, embed_dim=8, num_heads=2)
    enc, ad = make(rng, layers=None, cfg=cfg)
    calls = []
    original = DeflectAdapter.adapted_attention_sublayer

    def spy(self, encoder, u, x_a, layer, reference_norm=None):
        calls.append(layer)
        return original(self, encoder, u, x_a, layer, reference_norm)

    monkeypatch.setattr(DeflectAdapter, "adapted_attention_sublayer", spy)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    enc.transport(x, ad.hooks(Tensor(rng.normal(size=(1, 4, 8)))))
    assert calls == [3, 5, 7, 11]


def test_frozen_trajectory_reference(rng):
    _, adapted, batch = _models(np.float64)
    for p in adapted.adapter.params.values():
        p.data[...] += rng.normal(0, 0.3, p.shape)
    adapted.adapter.cfg.reference_from_frozen_trajectory = True
    state = adapted.encode(batch, record_norms=True)
    frozen = adapted.frozen_encoder().transport(adapted.encoder.patch_embed(adapted.patches(batch.images)), record_norms=True)
    for k in adapted.adapter.layers:
        np.testing.assert_allclose(state.displacement_norms[k - 1], frozen.displacement_norms[k - 1], rtol=1e-7)
    # layer 4 sits after an adapted layer, so the literal reading would differ there
    assert not np.allclose(state.z[3].data, frozen.z[3].data)


def test_norm_constraint_holds_through_training():
    cfg = PRESETS["tiny"]
    spec = SyntheticTaskSpec(image_size=cfg.image_size, n_train=32, n_val=4, n_test=4)
    splits = generate_dataset(spec, 0)
    model = build_model(init_vit_params(cfg, 0), cfg, PeftMethod("deflect"), "classification", 4, spec.band_map,
                        adapter_cfg=AdapterConfig(adapted_layers=(2, 4)), upe_cfg=UpeConfig())
    probe = Batch(splits["val"].images, ids=splits["val"].ids)
    for _ in range(2):
        train(model, splits, TrainConfig(epochs=100, max_steps=25, batch_size=8, learning_rate=1e-2, eval_every_epoch=False))
        gaps = norm_constraint_violation(model, probe)
        assert set(gaps) == {2, 4}
        assert max(gaps.values()) <= 1e-5
    b = model.adapter.params[f"adapter.{block_prefix(2)}.q.B"].data
    assert np.any(b)  # training moved the adapter away from zero


# -- configuration and parameters ------------------------------------------------------

def test_default_layers():
    assert default_adapted_layers(12) == (3, 5, 7, 11)
    assert default_adapted_layers(24) == (7, 11, 15, 23)
    assert all(1 <= k <= 4 for k in default_adapted_layers(4))


def test_bad_adapter_config():
    with pytest.raises(ConfigError):
        AdapterConfig(rank=0)
    with pytest.raises(ConfigError):
        AdapterConfig(adapted_layers=(13,)).layers_for(12)
    with pytest.raises(ConfigError):
        AdapterConfig(epsilon_norm=0)


def test_init_is_frozen_equivalent():
    params = init_adapter_params(CFG, AdapterConfig(adapted_layers=(1, 2), rank=3), 20)
    for name, p in params.items():
        if name.endswith(".B"):
            assert not np.any(p.data)
        if name.endswith(".A"):
            assert np.any(p.data)
    dense = init_adapter_params(CFG, AdapterConfig(adapted_layers=(1,), rank=None), 20)
    assert all(not np.any(p.data) for n, p in dense.items() if n.startswith("adapter."))


@pytest.mark.parametrize("rank", [1, 3, 5])
def test_low_rank_bound(rank, rng):
    cfg = VitConfig(image_size=8, patch_size=4, depth=1, embed_dim=16, num_heads=2)
    _, ad = make(rng, rank=rank, layers=(1,), cfg=cfg)
    s = np.linalg.svd(ad.new_weight(1, "q"), compute_uv=False)
    assert np.all(s[rank:] < 1e-6 * s[0])
    assert s[rank - 1] > 1e-6 * s[0]


def test_frozen_fraction_is_zero():
    assert parameter_budget(CFG, PeftMethod("frozen"))["tuned_fraction"] == 0


def test_overlapping_partition_rejected():
    shapes = {"a": (2, 2), "b": (3,)}
    with pytest.raises(PartitionError):
        count_parameters(shapes, {"theta_P": {"a", "b"}, "theta_A": {"b"}, "phi": set()})
    with pytest.raises(PartitionError):
        count_parameters(shapes, {"a": "theta_P"})


def test_count_by_hand():
    shapes = {"w": (4, 5), "a": (4, 2), "head": (5, 3)}
    out = count_parameters(shapes, {"w": "theta_P", "a": "theta_A", "head": "phi"})
    assert out == {"theta_P": 20, "theta_A": 8, "phi": 15, "tuned_fraction": 8 / 28}


def _large_deflect(rank):
    return parameter_budget(PRESETS["large"], PeftMethod("deflect"), adapter_cfg=AdapterConfig(rank=rank), spectral_dim=20)


def test_large_budget_by_hand():
    got = _large_deflect(16)
    projection = 20 * 1024 + 1024 + 2 * 1024
    assert got["theta_A"] == 4 * 3 * (1024 * 16 + 16 * 1024) + projection
    assert got["theta_P"] == 303_299_584


@pytest.mark.xfail(strict=True, reason="0.137% with a 20-dim projection; the stated band starts at 0.15%")
def test_large_budget_in_reported_band():
    assert 0.0015 <= _large_deflect(16)["tuned_fraction"] <= 0.0030


def test_large_rank_family_brackets_reported_values():
    fractions = [_large_deflect(r)["tuned_fraction"] * 100 for r in (8, 16, 32)]
    assert fractions == sorted(fractions) and len(set(fractions)) == 3
    for got, want in zip(fractions, (0.15, 0.20, 0.28)):
        assert abs(got - want) <= 0.08
