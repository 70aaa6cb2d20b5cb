import math

import numpy as np
import pytest

from conftest import leaf, max_grad_error
from deflect import tensor as T
from deflect.tensor import Tensor
from deflect.vit import (
    PRESETS,
    ConfigError,
    VisionTransformer,
    VitConfig,
    extract_patches,
    init_vit_params,
    patch_embed_rgb,
    vit_param_shapes,
)

RGB = {"R": 0, "G": 1, "B": 2, "NIR": 3}


def encoder(cfg: VitConfig, seed: int = 0, dtype=np.float64) -> VisionTransformer:
    return VisionTransformer(cfg, init_vit_params(cfg, seed, dtype))


def randomise(enc: VisionTransformer, rng, scale: float = 0.3) -> VisionTransformer:
    for p in enc.params.values():
        p.data[...] = rng.normal(0, scale, p.shape)
    return enc


# -- configuration -----------------------------------------------------------------

def test_config_rejects_indivisible_sizes():
    with pytest.raises(ConfigError, match="patch_size"):
        VitConfig(image_size=30, patch_size=8)
    with pytest.raises(ConfigError, match="num_heads"):
        VitConfig(embed_dim=10, num_heads=3)


def test_config_derived_sizes():
    cfg = VitConfig(image_size=32, patch_size=16, embed_dim=64, num_heads=4)
    assert (cfg.grid, cfg.num_patches, cfg.head_dim, cfg.mlp_dim) == (2, 4, 16, 256)


def test_large_preset_encoder_size():
    total = sum(math.prod(s) for s in vit_param_shapes(PRESETS["large"]).values())
    assert total == 303_299_584


# -- patch embedding ------------------------------------------------------------------

def test_zero_image_zero_weights_give_zero_embedding():
    cfg = VitConfig(image_size=16, patch_size=8, depth=1, embed_dim=8, num_heads=2)
    enc = encoder(cfg)
    for name in ("patch_embed.weight", "patch_embed.bias", "pos_embed"):
        enc.params[name].data[...] = 0
    x = patch_embed_rgb(np.zeros((4, 16, 16)), RGB, enc)
    np.testing.assert_array_equal(x.data, 0)


def test_patch_count_for_32_by_16():
    cfg = VitConfig(image_size=32, patch_size=16, depth=1, embed_dim=8, num_heads=2)
    assert patch_embed_rgb(np.zeros((4, 32, 32)), RGB, encoder(cfg)).shape == (1, 4, 8)


def test_single_nonzero_patch_gives_single_nonzero_row():
    cfg = VitConfig(image_size=32, patch_size=16, depth=1, embed_dim=8, num_heads=2)
    enc = encoder(cfg)
    w = np.zeros((3 * 16 * 16, 8))
    w[:8, :8] = np.eye(8)  # identity on the first 8 red pixels of the patch
    enc.params["patch_embed.weight"].data[...] = w
    enc.params["patch_embed.bias"].data[...] = 0
    img = np.zeros((4, 32, 32))
    img[0, 0:16, 16:32] = 1.0  # patch index 1 in row-major order
    x = enc.patch_embed(Tensor(extract_patches(img[None, :3], 16)), add_position=False).data[0]
    nonzero = np.flatnonzero(np.abs(x).sum(1))
    assert nonzero.tolist() == [1]
    np.testing.assert_array_equal(x[1], np.ones(8))


def test_patch_embed_missing_band_is_config_error():
    cfg = VitConfig(image_size=16, patch_size=8, depth=1, embed_dim=8, num_heads=2)
    with pytest.raises(ConfigError, match="B"):
        patch_embed_rgb(np.zeros((3, 16, 16)), {"R": 0, "G": 1, "NIR": 2}, encoder(cfg))


def test_extract_patches_layout():
    img = np.arange(2 * 4 * 4, dtype=float).reshape(1, 2, 4, 4)
    p = extract_patches(img, 2)
    assert p.shape == (1, 4, 8)
    # second patch (row 0, col 1): channel 0 pixels then channel 1 pixels
    np.testing.assert_array_equal(p[0, 1], [2, 3, 6, 7, 18, 19, 22, 23])


# -- attention ----------------------------------------------------------------------

def naive_attention(u, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    n, d = u.shape
    dh = d // heads
    q, k, v = u @ wq + bq, u @ wk + bk, u @ wv + bv
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            scores = [sum(q[i, sl][t] * k[j, sl][t] for t in range(dh)) / math.sqrt(dh) for j in range(n)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            z = sum(w)
            for j in range(n):
                out[i, sl] += (w[j] / z) * v[j, sl]
    return out @ wo + bo


@pytest.mark.parametrize("heads", [1, 2])
def test_attention_matches_loop_oracle(heads, rng):
    cfg = VitConfig(image_size=8, patch_size=4, depth=1, embed_dim=4, num_heads=heads)
    enc = randomise(encoder(cfg), rng)
    u = rng.normal(size=(1, 3, 4))
    out, scores = enc.attention_displacement(Tensor(u), 1)
    p = {k.rsplit(".", 1)[-1]: v.data for k, v in enc.params.items() if k.startswith("blocks.1.attn")}
    oracle = naive_attention(u[0], **p, heads=heads)
    np.testing.assert_allclose(out.data[0], oracle, atol=1e-10)
    assert scores.shape == (1, heads, 3, 3)


def test_zero_value_weights_give_zero_displacement(rng):
    cfg = VitConfig(image_size=8, patch_size=4, depth=1, embed_dim=8, num_heads=2)
    enc = randomise(encoder(cfg), rng)
    for w in ("wv", "bv", "bo"):
        enc.params[f"blocks.1.attn.{w}"].data[...] = 0
    out, _ = enc.attention_displacement(Tensor(rng.normal(size=(2, 4, 8))), 1)
    np.testing.assert_array_equal(out.data, 0)


def test_single_token_attention_is_value_path(rng):
    cfg = VitConfig(image_size=4, patch_size=4, depth=1, embed_dim=8, num_heads=2)
    enc = randomise(encoder(cfg), rng)
    z = rng.normal(size=(1, 1, 8))
    out, _ = enc.attention_displacement(Tensor(z), 1)
    p = lambda n: enc.params[f"blocks.1.attn.{n}"].data  # noqa: E731
    np.testing.assert_allclose(out.data, (z @ p("wv") + p("bv")) @ p("wo") + p("bo"), atol=1e-12)


def test_single_head_matches_unsplit_formula(rng):
    cfg = VitConfig(image_size=8, patch_size=4, depth=1, embed_dim=6, num_heads=1)
    enc = randomise(encoder(cfg), rng)
    u = rng.normal(size=(1, 4, 6))
    p = lambda n: enc.params[f"blocks.1.attn.{n}"].data  # noqa: E731
    q, k, v = u[0] @ p("wq") + p("bq"), u[0] @ p("wk") + p("bk"), u[0] @ p("wv") + p("bv")
    a = q @ k.T / math.sqrt(6)
    a = np.exp(a - a.max(1, keepdims=True))
    a /= a.sum(1, keepdims=True)
    out, _ = enc.attention_displacement(Tensor(u), 1)
    np.testing.assert_allclose(out.data[0], (a @ v) @ p("wo") + p("bo"), atol=1e-10)


def test_attention_rows_sum_to_one(rng):
    enc = randomise(encoder(PRESETS["tiny"]), rng)
    _, scores = enc.attention_displacement(Tensor(rng.normal(size=(2, 4, 16))), 2)
    np.testing.assert_allclose(T.softmax(scores, -1).data.sum(-1), 1.0, atol=1e-6)


# -- MLP ----------------------------------------------------------------------------

def test_zero_mlp_weights_give_zero_displacement(rng):
    enc = encoder(PRESETS["tiny"])
    for w in ("w1", "b1", "w2", "b2"):
        enc.params[f"blocks.1.mlp.{w}"].data[...] = 0
    np.testing.assert_array_equal(enc.mlp_displacement(Tensor(rng.normal(size=(1, 4, 16))), 1).data, 0)


def test_mlp_hand_computed():
    cfg = VitConfig(image_size=4, patch_size=4, depth=1, embed_dim=2, num_heads=1, mlp_ratio=1.0)
    enc = encoder(cfg)
    enc.params["blocks.1.mlp.w1"].data[...] = np.eye(2)
    enc.params["blocks.1.mlp.w2"].data[...] = np.eye(2)
    enc.params["blocks.1.mlp.b1"].data[...] = 0
    enc.params["blocks.1.mlp.b2"].data[...] = 0
    out = enc.mlp_displacement(Tensor([[[1.0, -1.0]]]), 1).data
    # GELU(1) = 0.841344746..., GELU(-1) = -0.158655253...
    np.testing.assert_allclose(out, [[[0.8413447460685429, -0.15865525393145707]]], atol=1e-12)


def test_mlp_gradient(rng):
    enc = randomise(encoder(PRESETS["tiny"]), rng)
    u = leaf(rng.normal(size=(1, 3, 16)))
    names = [f"blocks.1.mlp.{w}" for w in ("w1", "b1", "w2", "b2")]
    for n in names:
        enc.params[n].requires_grad = True

    def f(u, *ws):
        return enc.mlp_displacement(u, 1)

    assert max_grad_error(f, u, *[enc.params[n] for n in names]) < 1e-5


# -- transport --------------------------------------------------------------------------

def test_empty_hooks_equal_plain_forward(rng):
    enc = randomise(encoder(PRESETS["tiny"]), rng, 0.1)
    x = Tensor(rng.normal(size=(2, 4, 16)))
    a = enc.transport(x).final.data
    b = enc.transport(x, hooks={}).final.data
    assert a.tobytes() == b.tobytes()


def test_depth_zero_returns_input(rng):
    cfg = VitConfig(image_size=16, patch_size=8, depth=0, embed_dim=8, num_heads=2)
    x = Tensor(rng.normal(size=(1, 4, 8)))
    assert encoder(cfg).transport(x).final is x


def test_copy_hook_gives_bit_identical_trajectory(rng):
    enc = randomise(encoder(PRESETS["tiny"]), rng, 0.1)
    x = Tensor(rng.normal(size=(2, 4, 16)))
    hooks = {k: (lambda e, u, layer: e.attention_displacement(u, layer)[0]) for k in (1, 3)}
    plain, hooked = enc.transport(x), enc.transport(x, hooks)
    for a, b in zip(plain.z, hooked.z):
        assert a.data.tobytes() == b.data.tobytes()


def test_hook_outside_depth_is_config_error():
    enc = encoder(PRESETS["tiny"])
    with pytest.raises(ConfigError):
        enc.transport(Tensor(np.zeros((1, 4, 16))), {5: lambda e, u, layer: u})


def test_residual_identity_holds_exactly(rng):
    enc = randomise(encoder(PRESETS["tiny"], dtype=np.float32), rng, 0.1)
    state = enc.transport(Tensor(rng.normal(size=(2, 4, 16)).astype(np.float32)), record_norms=True)
    for l in range(enc.cfg.depth):
        z, z_next = state.z[l].data, state.z[l + 1].data
        assert np.array_equal(z_next, (z + state.attn_displacements[l].data) + state.mlp_displacements[l].data)
        np.testing.assert_allclose(state.displacement_norms[l], np.linalg.norm(state.attn_displacements[l].data, axis=-1), rtol=1e-6)


def test_permutation_equivariance_without_positions(rng):
    enc = randomise(encoder(PRESETS["tiny"]), rng, 0.1)
    x = rng.normal(size=(1, 4, 16))
    perm = rng.permutation(4)
    a = enc.transport(Tensor(x)).final.data
    b = enc.transport(Tensor(x[:, perm])).final.data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_init_is_seeded_and_bounded():
    a = init_vit_params(PRESETS["tiny"], 3)
    b = init_vit_params(PRESETS["tiny"], 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert max(np.abs(v.data).max() for k, v in a.items() if k.endswith(("wq", "w1"))) <= 0.04
    assert np.all(a["blocks.1.norm1.gamma"].data == 1) and np.all(a["blocks.1.attn.bq"].data == 0)
