import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradchecks import pipeline_errors, tiny_model
from rismae.model import (
    MaskPlan,
    ModelConfig,
    RISMAE,
    classify,
    full_plan,
    load_checkpoint,
    patchify,
    plan_from_masked,
    sample_mask,
    save_checkpoint,
    unpatchify,
)
from rismae.nn import softmax


def _identity_restore_model(n_patches, width):
    # enc_to_dec = identity so restored rows can be compared with their inputs
    cfg = ModelConfig(frame_length=n_patches, patch_size=1, enc_dim=width, enc_layers=0, enc_heads=1,
                      dec_dim=width, dec_layers=0, dec_heads=1, dtype="float64")
    m = RISMAE(cfg, with_decoder=True, with_head=False)
    m.children["enc_to_dec"].params["w"][...] = np.eye(width)
    m.children["enc_to_dec"].params["b"][...] = 0.0
    m.params["mask_token"][...] = -7.0
    return m


def restore_exhaustive(max_n=8):
    """(cases checked, cases correct) over every N <= max_n and every masked subset."""
    checked = correct = 0
    for n in range(1, max_n + 1):
        model = _identity_restore_model(n, 2)
        for k in range(0, n + 1):
            for masked in itertools.combinations(range(n), k):
                plan = plan_from_masked([list(masked)], n)
                frames = np.stack([np.arange(n, dtype=float) + 1, -(np.arange(n, dtype=float) + 1)])[None]
                patches = patchify(frames, 1)  # row i = (i+1, -(i+1))
                kept = np.take_along_axis(patches, plan.kept[..., None], axis=1)
                z_enc = np.concatenate([np.full((1, 1, 2), 99.0), kept], axis=1)
                full = model.restore(z_enc, plan, add_pos=False)[0]
                ok = full.shape == (n + 1, 2) and np.array_equal(full[0], [99.0, 99.0])
                for i in range(n):
                    want = [-7.0, -7.0] if i in masked else patches[0, i]
                    ok &= np.array_equal(full[i + 1], want)
                ok &= np.array_equal(np.sort(plan.ids_shuffle[0]), np.arange(n))
                checked += 1
                correct += bool(ok)
    return checked, correct


# -- patches ------------------------------------------------------------------

def test_patchify_defaults_and_order():
    x = np.arange(2 * 1024, dtype=float).reshape(2, 1024)
    p = patchify(x, 8)
    assert p.shape == (128, 16)
    np.testing.assert_array_equal(p[0], np.r_[x[0, :8], x[1, :8]])
    np.testing.assert_array_equal(unpatchify(p, 8), x)


def test_patchify_small():
    x = np.arange(32.0).reshape(2, 16)
    p = patchify(x, 8)
    assert p.shape == (2, 16)
    np.testing.assert_array_equal(p[0], list(range(8)) + list(range(16, 24)))


@given(st.integers(1, 6), st.integers(1, 8), st.integers(1, 3))
def test_patchify_roundtrip(n, p, b):
    x = np.random.default_rng(n * p).standard_normal((b, 2, n * p))
    np.testing.assert_array_equal(unpatchify(patchify(x, p), p), x)


def test_patchify_divisibility():
    with pytest.raises(ValueError):
        patchify(np.zeros((2, 30)), 8)


# -- masks --------------------------------------------------------------------

def test_sample_mask_defaults():
    plan = sample_mask(128, 0.75, np.random.default_rng(0))
    assert plan.masked.shape == (1, 96) and plan.kept.shape == (1, 32)
    assert np.all(np.diff(plan.kept[0]) > 0)
    plan.validate(128)


def test_sample_mask_zero_ratio_and_determinism():
    plan = sample_mask(16, 0.0, np.random.default_rng(0))
    assert plan.masked.shape[1] == 0
    np.testing.assert_array_equal(plan.ids_restore[0], np.arange(16))
    a = sample_mask(64, 0.5, np.random.default_rng(5), 3)
    b = sample_mask(64, 0.5, np.random.default_rng(5), 3)
    np.testing.assert_array_equal(a.ids_restore, b.ids_restore)


def test_sample_mask_rejects_bad_ratio():
    for r in (-0.1, 1.0, 1.5):
        with pytest.raises(ValueError):
            sample_mask(8, r, np.random.default_rng(0))


@given(st.integers(1, 40), st.floats(0, 0.99), st.integers(0, 100))
@settings(max_examples=80)
def test_mask_plan_partition_property(n, ratio, seed):
    plan = sample_mask(n, ratio, np.random.default_rng(seed), 2)
    plan.validate(n)
    assert plan.masked.shape[1] == int(np.floor(ratio * n + 0.5))
    np.testing.assert_array_equal(
        np.take_along_axis(plan.ids_shuffle, plan.ids_restore, axis=1), np.tile(np.arange(n), (2, 1)))


def test_mask_plan_validate_rejects_overlap():
    bad = MaskPlan(np.array([[0, 1]]), np.array([[1, 2]]), np.array([[0, 1, 2, 3]]), 0.5)
    with pytest.raises(ValueError):
        bad.validate(4)


def test_restore_exhaustive_small():
    checked, correct = restore_exhaustive(8)
    assert checked == correct == sum(2**n for n in range(1, 9))


# -- embedding / encoder ------------------------------------------------------

def _small(**kw):
    base = dict(frame_length=64, patch_size=8, enc_dim=16, enc_layers=2, enc_heads=2, dec_dim=8,
                dec_layers=1, dec_heads=2, num_classes=4, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


def test_embed_zero_patch_gives_positions():
    m = RISMAE(_small())
    m.children["patch_embed"].params["b"][...] = 0
    np.testing.assert_array_equal(m.embed(np.zeros((1, 8, 16)))[0], m.params["pos"])


def test_embed_locality():
    m = RISMAE(_small(frame_length=1024, enc_layers=0))
    x = np.random.default_rng(0).standard_normal((1, 2, 1024))
    y = x.copy()
    y[0, 0, 500] += 1.0
    d = np.any(m.embed(patchify(y, 8)) != m.embed(patchify(x, 8)), axis=-1)[0]
    assert list(np.flatnonzero(d)) == [62]


def test_default_shape_ladder():
    cfg = ModelConfig()  # paper-scale widths; one frame keeps this cheap
    m = RISMAE(cfg, with_decoder=True, with_head=True)
    x = np.random.default_rng(0).standard_normal((1, 2, 1024)).astype(np.float32)
    p = patchify(x, 8)
    assert p.shape == (1, 128, 16)
    emb = m.embed(p)
    assert emb.shape == (1, 128, 768)
    plan = sample_mask(128, 0.75, np.random.default_rng(0))
    z = m.encode(emb, plan)
    assert z.shape == (1, 33, 768)
    full = m.restore(z, plan)
    assert full.shape == (1, 129, 512)
    assert m.decode_predict(full).shape == (1, 128, 16)
    assert m.children["pred"].params["w"].shape == (16, 512)
    assert m.children["patch_embed"].params["w"].shape == (768, 16)
    assert m.children["encoder"].children["0"].children["mlp"].children["fc1"].params["w"].shape == (768, 3072)


def test_zero_layer_encoder_is_identity():
    m = RISMAE(_small(enc_layers=0))
    emb = np.random.default_rng(0).standard_normal((1, 8, 16))
    plan = plan_from_masked([[1, 4, 5]], 8)
    z = m.encode(emb, plan)
    np.testing.assert_array_equal(z[0, 0], m.params["cls_token"])
    np.testing.assert_array_equal(z[0, 1:], emb[0, plan.kept[0]])


def test_encoder_permutation_equivariance():
    m = RISMAE(_small())
    rng = np.random.default_rng(1)
    emb = rng.standard_normal((1, 8, 16))
    plan = plan_from_masked([[0, 2, 6]], 8)
    base = m.encode(emb, plan)
    # swap the first two kept tokens (with their positions) and undo the swap on the output
    kept = plan.kept[0]
    swapped = emb.copy()
    swapped[0, [kept[0], kept[1]]] = emb[0, [kept[1], kept[0]]]
    out = m.encode(swapped, plan)
    np.testing.assert_allclose(out[0, [2, 1]], base[0, [1, 2]], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out[0, 3:], base[0, 3:], rtol=1e-12, atol=1e-14)


def test_restore_zero_ratio_and_mask_fill():
    m = RISMAE(_small())
    z = np.random.default_rng(0).standard_normal((1, 9, 16))
    plan = full_plan(8, 1)
    out = m.restore(z, plan, add_pos=False)
    np.testing.assert_allclose(out, m.children["enc_to_dec"].forward(z))
    plan = plan_from_masked([[0, 3, 7]], 8)
    out = m.restore(z[:, :6], plan, add_pos=False)
    for i in (0, 3, 7):
        np.testing.assert_array_equal(out[0, i + 1], m.params["mask_token"])


def test_decoder_affine_degenerate():
    m = RISMAE(_small())
    for name, p in m.named_parameters().items():
        if name.startswith(("decoder.", "pred.")):
            p[...] = 0.0
    m.children["pred"].params["b"][...] = 0.25
    pred = m.decode_predict(np.random.default_rng(0).standard_normal((2, 9, 8)))
    assert pred.shape == (2, 8, 16)
    np.testing.assert_array_equal(pred, 0.25)


# -- classification ------------------------------------------------------------

def test_classify_probabilities():
    m = RISMAE(_small())
    x = np.random.default_rng(0).standard_normal((5, 2, 64))
    p = classify(m, x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert classify(m, x[0]).shape == (4,)
    m.children["head"].params["w"][...] = 0
    m.children["head"].params["b"][...] = 0
    np.testing.assert_allclose(classify(m, x), 0.25, atol=1e-15)


def test_softmax_argmax_monotone():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((100, 6)) * 3
    assert np.array_equal(np.argmax(softmax(logits), axis=1), np.argmax(logits, axis=1))


def test_classification_sees_every_patch():
    m = RISMAE(_small())
    x = np.random.default_rng(0).standard_normal((1, 2, 64))
    base = m.forward_features(x)
    for i in range(8):
        y = x.copy()
        y[0, :, i * 8] += 0.5
        assert not np.allclose(m.forward_features(y), base)


def test_class_token_flow_under_masking():
    m = RISMAE(_small())
    x = np.random.default_rng(0).standard_normal((1, 2, 64))
    plan = plan_from_masked([[1, 2, 5]], 8)
    emb = m.embed(patchify(x, 8))
    base = m.encode(emb, plan)[0, 0].copy()
    for i in plan.kept[0]:
        e2 = emb.copy()
        e2[0, i, 0] += 0.5  # a uniform shift would vanish in LayerNorm
        assert np.max(np.abs(m.encode(e2, plan)[0, 0] - base)) > 1e-8
    for i in plan.masked[0]:
        e2 = emb.copy()
        e2[0, i, 0] += 0.5
        np.testing.assert_array_equal(m.encode(e2, plan)[0, 0], base)


def test_masked_samples_have_zero_gradient_through_encoder():
    m = tiny_model()
    x = np.random.default_rng(3).standard_normal((1, 2, 32))
    plan = plan_from_masked([[1, 2]], 4)
    pred, _ = m.forward_pretrain(x, plan)
    dpatch = m.backward_pretrain(np.random.default_rng(4).standard_normal(pred.shape))
    assert not np.any(dpatch[0, [1, 2]])
    assert np.all(np.any(dpatch[0, [0, 3]] != 0, axis=-1))


def test_full_pipeline_gradients():
    errs = pipeline_errors()
    assert max(errs.values()) < 1e-3, max(errs.items(), key=lambda kv: kv[1])


# -- config and checkpoints ------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(frame_length=100, patch_size=8).validate()
    with pytest.raises(ValueError):
        ModelConfig(mask_ratio=1.0).validate()
    with pytest.raises(ValueError):
        ModelConfig(enc_dim=10, enc_heads=3).validate()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"enc_width": 3})
    for bad in ({"weight_init": "he"}, {"dropout": 1.0}, {"pos_init": "rope"}):
        with pytest.raises(ValueError):
            ModelConfig(**bad).validate()
    cfg = ModelConfig()
    assert (cfg.num_patches, cfg.patch_dim, cfg.num_masked, cfg.enc_mlp_dim) == (128, 16, 96, 3072)


def test_weight_init_modes():
    base = RISMAE(_small())
    xav = RISMAE(_small(weight_init="xavier_uniform"))
    pb, px = base.named_parameters(), xav.named_parameters()
    for name, w in px.items():
        if w.ndim == 2 and "pos" not in name and not name.startswith("head."):
            bound = math.sqrt(6.0 / sum(w.shape))
            assert np.abs(w).max() <= bound and np.abs(w).max() > 0.5 * bound
        else:
            # tokens, positions, norms, biases and the head keep the default draws
            np.testing.assert_array_equal(w, pb[name])
    assert np.abs(pb["encoder.0.attn.wq"]).max() <= 0.04


def test_checkpoint_roundtrip_and_handoff(tmp_path):
    m = RISMAE(_small(dtype="float32"), with_decoder=True, with_head=False)
    save_checkpoint(m, tmp_path / "ck", rng_state={"seed": 3})
    for f in ("config.json", "params.json", "params.f32", "rng.json"):
        assert (tmp_path / "ck" / f).exists()
    full = load_checkpoint(tmp_path / "ck")
    for k, v in m.named_parameters().items():
        np.testing.assert_array_equal(full.named_parameters()[k], v)
    ft = load_checkpoint(tmp_path / "ck", with_decoder=False, num_classes=3)
    names = set(ft.named_parameters())
    assert not any(n.startswith(("decoder.", "pred.", "enc_to_dec.")) for n in names)
    assert "mask_token" not in names and "dec_pos" not in names
    assert ft.children["head"].params["w"].shape == (3, 16)
    np.testing.assert_array_equal(ft.params["pos"], m.params["pos"])


def test_drop_decoder():
    m = RISMAE(_small())
    m.drop_decoder()
    assert not m.with_decoder
    with pytest.raises(RuntimeError):
        m.forward_pretrain(np.zeros((1, 2, 64)), sample_mask(8, 0.5, np.random.default_rng(0)))
