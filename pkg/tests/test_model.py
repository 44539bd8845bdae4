"""Networks: embedder symmetries, encoder behavior, aggregation, projector,
mask generator, parameter counts."""

import numpy as np
import pytest

from admask import autodiff as ad
from admask.autodiff import Tensor
from admask.model import (ConfigError, EncoderConfig, ModelConfig, ParamStore,
                          aggregate_features, embed_patches, encode,
                          encoder_param_count, generate_masks, init_params,
                          is_teacher_side, make_teacher, maskgen_param_count,
                          prepend_cls, project, swiglu_hidden)

RNG = np.random.default_rng(0)


def small_config(depth=2, heads=2, dim=16, sd=0.0, mg_depth=1):
    return ModelConfig(
        encoder=EncoderConfig(depth, heads, dim, stochastic_depth_rate=sd),
        maskgen=EncoderConfig(mg_depth, heads, dim, stochastic_depth_rate=sd),
        n_masks=3, n_prototypes=12, proj_hidden=24, proj_bottleneck=8,
        embed_hidden=16, pos_hidden=16)


@pytest.fixture(scope="module")
def params():
    return init_params(small_config(), np.random.default_rng(1))


def rand_patches(rng, b=2, p=5, k=7):
    return (rng.normal(size=(b, p, k, 3)).astype(np.float32),
            rng.normal(size=(b, p, 3)).astype(np.float32))


# ---------------------------------------------------------------------------
# config validation


def test_embed_dim_must_divide_heads():
    with pytest.raises(ConfigError):
        EncoderConfig(2, 3, 16)


def test_maskgen_must_share_embed_dim():
    with pytest.raises(ConfigError):
        ModelConfig(encoder=EncoderConfig(2, 2, 16),
                    maskgen=EncoderConfig(1, 2, 32))


def test_swiglu_hidden_multiple_of_8():
    assert swiglu_hidden(384) % 8 == 0
    assert swiglu_hidden(384) == 1024  # round(8*384/3/8)*8


# ---------------------------------------------------------------------------
# embedder


def test_duplicate_patches_give_identical_tokens(params):
    groups, centers = rand_patches(RNG)
    groups[0, 1] = groups[0, 0]
    centers[0, 1] = centers[0, 0]
    tok = embed_patches(params, groups, centers).data
    # equal up to float32 GEMM blocking effects
    np.testing.assert_allclose(tok[0, 0], tok[0, 1], atol=1e-6)


def test_embedder_permutation_invariant_within_group(params):
    groups, centers = rand_patches(RNG)
    perm = RNG.permutation(groups.shape[2])
    a = embed_patches(params, groups, centers).data
    b = embed_patches(params, groups[:, :, perm], centers).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_translation_only_moves_position_embedding(params):
    groups, centers = rand_patches(RNG)
    t = np.array([0.3, -0.1, 0.2], dtype=np.float32)
    a = embed_patches(params, groups, centers).data
    b = embed_patches(params, groups, centers + t).data
    assert not np.allclose(a, b)
    # with the position MLP zeroed, translation has no effect at all
    zeroed = ParamStore({n: p for n, p in params.items()})
    for n in ("pos.l2.w", "pos.l2.b"):
        zeroed[n] = Tensor(np.zeros(params[n].shape, dtype=np.float32))
    a0 = embed_patches(zeroed, groups, centers).data
    b0 = embed_patches(zeroed, groups, centers + t).data
    np.testing.assert_allclose(a0, b0, atol=1e-6)


# ---------------------------------------------------------------------------
# encoder


def test_eval_mode_deterministic(params):
    groups, centers = rand_patches(RNG)
    cfg = small_config().encoder
    seq = prepend_cls(params, embed_patches(params, groups, centers))
    a = encode(params, seq, cfg, train_mode=False).data
    b = encode(params, seq, cfg, train_mode=False).data
    assert np.array_equal(a, b)


def test_depth_zero_is_identity_plus_final_norm():
    cfg = small_config(depth=0)
    params = init_params(cfg, np.random.default_rng(2))
    x = Tensor(RNG.normal(size=(2, 4, 16)).astype(np.float32))
    out = encode(params, x, cfg.encoder, train_mode=False)
    want = ad.layer_norm(x, params["enc.final.g"], params["enc.final.b"])
    np.testing.assert_allclose(out.data, want.data, atol=1e-6)


def test_attention_rows_sum_to_one(params):
    groups, centers = rand_patches(RNG)
    cfg = small_config().encoder
    seq = prepend_cls(params, embed_patches(params, groups, centers))
    attn = []
    encode(params, seq, cfg, train_mode=False, collect_attn=attn)
    assert len(attn) == cfg.depth
    for a in attn:
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)


def test_train_mode_stochastic_depth_needs_rng():
    cfg = small_config(sd=0.5)
    params = init_params(cfg, np.random.default_rng(3))
    x = Tensor(RNG.normal(size=(2, 4, 16)).astype(np.float32))
    with pytest.raises(ConfigError):
        encode(params, x, cfg.encoder, train_mode=True)


# ---------------------------------------------------------------------------
# aggregation


def test_aggregate_single_patch(params):
    enc = Tensor(RNG.normal(size=(1, 2, 16)).astype(np.float32))  # CLS + 1 patch
    out = aggregate_features(enc).data
    np.testing.assert_allclose(out[0, 16:], 2.0 * enc.data[0, 1], atol=1e-6)
    np.testing.assert_array_equal(out[0, :16], enc.data[0, 0])


def test_aggregate_equal_patches():
    v = RNG.normal(size=16).astype(np.float32)
    enc = Tensor(np.stack([np.zeros(16, np.float32)] + [v] * 4)[None])
    out = aggregate_features(enc).data
    np.testing.assert_allclose(out[0, 16:], 2.0 * v, atol=1e-6)


def test_aggregate_matches_hand_oracle():
    enc = RNG.normal(size=(1, 5, 16)).astype(np.float32)
    out = aggregate_features(Tensor(enc)).data
    patches = enc[0, 1:]
    want = np.concatenate([enc[0, 0], patches.max(0) + patches.mean(0)])
    np.testing.assert_allclose(out[0], want, atol=1e-6)


# ---------------------------------------------------------------------------
# projector


def test_projector_bottleneck_unit_norm(params):
    x = Tensor(RNG.normal(size=(9, 16)).astype(np.float32))
    _, z = project(params, x, "cls", return_bottleneck=True)
    np.testing.assert_allclose(np.linalg.norm(z.data, axis=-1), 1.0, atol=1e-5)


def test_projector_heads_differ(params):
    x = Tensor(RNG.normal(size=(4, 16)).astype(np.float32))
    a = project(params, x, "cls").data
    b = project(params, x, "patch").data
    assert a.shape == b.shape == (4, 12)
    assert not np.allclose(a, b)


def test_projector_zero_input_is_bias_path(params):
    x = Tensor(np.zeros((2, 16), dtype=np.float32))
    a = project(params, x, "cls").data
    np.testing.assert_array_equal(a[0], a[1])


def test_projector_unknown_head(params):
    with pytest.raises(ValueError):
        project(params, Tensor(np.zeros((1, 16))), "both")


# ---------------------------------------------------------------------------
# mask generator


def test_mask_columns_sum_to_one(params):
    groups, centers = rand_patches(RNG)
    cfg = small_config().maskgen
    tokens = embed_patches(params, groups, centers)
    m = generate_masks(params, tokens, cfg, 3).data
    assert m.shape == (2, 3, 5)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-5)
    assert np.all(m > 0) and np.all(m < 1)


def test_mask_generator_needs_two_masks(params):
    with pytest.raises(ValueError):
        generate_masks(params, Tensor(np.zeros((1, 4, 16))),
                       small_config().maskgen, 1)


def test_mask_generator_permutation_equivariant(params):
    groups, centers = rand_patches(RNG, b=1, p=6)
    cfg = small_config().maskgen
    tokens = embed_patches(params, groups, centers)
    perm = RNG.permutation(6)
    m_a = generate_masks(params, tokens, cfg, 3).data
    m_b = generate_masks(params, Tensor(tokens.data[:, perm]), cfg, 3).data
    np.testing.assert_allclose(m_b, m_a[:, :, perm], atol=1e-5)


# ---------------------------------------------------------------------------
# parameter store / teacher


def test_teacher_mirrors_student_without_maskgen(params):
    teacher = make_teacher(params)
    assert all(is_teacher_side(n) for n in teacher.names())
    assert not any(n.startswith("mg.") for n in teacher.names())
    assert "mask_token" not in teacher
    for n, t in teacher.items():
        assert not t.requires_grad
        assert np.array_equal(t.data, params[n].data)
        assert t.data is not params[n].data


def test_load_arrays_reports_shape_conflicts(params):
    store = params.subset("pos.")
    bad = {"pos.l1.w": np.zeros((2, 2), dtype=np.float32)}
    with pytest.raises(ValueError, match="pos.l1.w"):
        store.load_arrays(bad)


def test_gradients_reach_every_parameter():
    cfg = small_config(sd=0.0)
    params = init_params(cfg, np.random.default_rng(4))
    rng = np.random.default_rng(5)
    groups, centers = rand_patches(rng, b=3, p=4, k=5)
    tokens = embed_patches(params, groups, centers)
    masks = generate_masks(params, tokens.detach(), cfg.maskgen, 3,
                           train_mode=False)
    enc = encode(params, prepend_cls(params, tokens), cfg.encoder)
    cls_logits = project(params, enc[:, 0], "cls")
    patch_logits = project(params, enc[:, 1:], "patch")
    mask_tok = params["mask_token"]
    loss = ad.add(
        ad.add(ad.reduce_mean(ad.mul(cls_logits, cls_logits)),
               ad.reduce_mean(ad.mul(patch_logits, patch_logits))),
        ad.add(ad.reduce_mean(ad.mul(masks, masks)),
               ad.reduce_mean(ad.mul(mask_tok, mask_tok))))
    grads = ad.backward(loss, leaves=list(dict(params.items()).values()))
    dead = [n for n, t in params.items()
            if float(np.abs(grads[t]).max(initial=0.0)) == 0.0]
    assert dead == [], f"parameters with zero gradient: {dead}"


def test_paper_parameter_counts_within_15_percent():
    cfg = ModelConfig(encoder=EncoderConfig(12, 6, 384),
                      maskgen=EncoderConfig(3, 4, 384),
                      n_masks=3, n_prototypes=1024,
                      proj_hidden=2048, proj_bottleneck=256)
    params = init_params(cfg, np.random.default_rng(6))
    enc = encoder_param_count(params)
    mg = maskgen_param_count(params)
    assert abs(enc - 21.8e6) / 21.8e6 < 0.15, enc
    assert abs(mg - 6.0e6) / 6.0e6 < 0.15, mg
