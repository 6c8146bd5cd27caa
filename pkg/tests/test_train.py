import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import cross_entropy_sum
from rismae.losses import cross_entropy, masked_mse, softmax_cross_entropy
from rismae.model import ModelConfig, RISMAE, plan_from_masked, sample_mask
from rismae.nn import NumericalError
from rismae.siggen import Dataset, DatasetManifest, generate_dataset
from rismae.train import (
    TrainConfig,
    finetune,
    finetune_arrays,
    lr_at,
    pretrain,
    pretrain_arrays,
    select_finetune_labels,
)


def _cfg(**kw):
    base = dict(frame_length=64, patch_size=8, enc_dim=16, enc_layers=1, enc_heads=2, dec_dim=8,
                dec_layers=1, dec_heads=2, num_classes=4, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    generate_dataset(DatasetManifest(frame_length=64, snr_grid_db=[-4, 0, 6, 10], frames_per_cell=30,
                                     master_seed=1), out)
    return Dataset(out)


# -- masked MSE ---------------------------------------------------------------

def test_masked_mse_identical_is_zero():
    x = np.random.default_rng(0).standard_normal((8, 16))
    assert masked_mse(x, x.copy(), plan_from_masked([[1, 5]], 8)) == 0.0


def test_masked_mse_all_ones_residual():
    t = np.zeros((4, 16))
    p = t.copy()
    p[2] = 1.0
    assert masked_mse(p, t, plan_from_masked([[2]], 4)) == 16.0


@given(st.integers(0, 10_000))
def test_masked_mse_ignores_unmasked_predictions(seed):
    rng = np.random.default_rng(seed)
    pred, tgt = rng.standard_normal((2, 8, 6)), rng.standard_normal((2, 8, 6))
    plan = sample_mask(8, 0.5, rng, 2)
    base = masked_mse(pred, tgt, plan)
    p2 = pred.copy()
    keep = plan.kept
    np.put_along_axis(p2, keep[..., None], rng.standard_normal((2, keep.shape[1], 6)) * 1e3, axis=1)
    assert masked_mse(p2, tgt, plan) == base


def test_masked_mse_empty_mask():
    with pytest.raises(ValueError):
        masked_mse(np.zeros((4, 2)), np.zeros((4, 2)), plan_from_masked([[]], 4))


# -- cross entropy ------------------------------------------------------------

def test_cross_entropy_values():
    assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0
    assert abs(cross_entropy(np.full(4, 0.25), 3) - math.log(4)) < 1e-9
    assert abs(cross_entropy(np.array([1.0, 0.0]), 1) - (-math.log(1e-12))) < 1e-9


def test_cross_entropy_matches_summation_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(c))
        y = int(rng.integers(0, c))
        assert abs(cross_entropy(p, y) - cross_entropy_sum(list(p), y)) < 1e-12


def test_cross_entropy_invalid_label():
    with pytest.raises(ValueError):
        cross_entropy(np.full(3, 1 / 3), 3)
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3)), np.array([-1]))


def test_softmax_cross_entropy_agrees_with_probs_path():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    loss, probs, _ = softmax_cross_entropy(z, y)
    assert abs(loss - cross_entropy(probs, y)) < 1e-12


# -- schedule -----------------------------------------------------------------

def test_lr_schedule_points():
    cfg = TrainConfig()
    total = 1000
    warm = 50
    assert lr_at(0, total, cfg) == 0.0
    assert lr_at(warm, total, cfg) == 1e-4
    assert abs(lr_at(warm - 1, total, cfg) - 1e-4 * 49 / 50) < 1e-18
    mid = warm + (total - warm) / 2
    assert abs(lr_at(int(mid), total, cfg) - 1e-4 * (1 + math.cos(math.pi / 2)) / 2) < 1e-12
    assert lr_at(total - 1, total, cfg) < 1e-9


def test_lr_continuous_at_warmup_boundary():
    cfg = TrainConfig(base_lr=3e-3, warmup_frac=0.1)
    total = 10_000
    left = lr_at(999, total, cfg)
    right = lr_at(1000, total, cfg)
    assert abs(right - cfg.base_lr) < 1e-15
    assert abs(left - right) < cfg.base_lr / 999


def test_lr_out_of_range_and_constant():
    with pytest.raises(ValueError):
        lr_at(10, 10, TrainConfig())
    with pytest.raises(ValueError):
        lr_at(-1, 10, TrainConfig())
    assert lr_at(90, 100, TrainConfig(schedule="constant")) == 1e-4


def test_train_config_validation_and_stage_defaults():
    with pytest.raises(ValueError):
        TrainConfig(warmup_frac=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(label_fraction=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    ft = TrainConfig.for_stage("finetune")
    assert (ft.epochs, ft.batch_size, ft.weight_decay) == (50, 512, 0.0)
    pre = TrainConfig()
    assert (pre.epochs, pre.batch_size, pre.base_lr, pre.warmup_frac) == (100, 1024, 1e-4, 0.05)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})


# -- label selection ----------------------------------------------------------

def test_select_all():
    labels = np.repeat(np.arange(4), 10)
    np.testing.assert_array_equal(select_finetune_labels(labels, np.zeros(40), 1.0), np.arange(40))


def test_select_one_percent_stratified():
    labels = np.repeat(np.arange(4), 2500)
    snr = np.tile(np.repeat(np.arange(-20, 21, 2), 120)[:2500], 4)
    idx = select_finetune_labels(labels, snr, 0.01, seed=3)
    assert idx.size == 100 and np.unique(idx).size == 100
    counts = np.bincount(labels[idx], minlength=4)
    assert counts.max() - counts.min() <= 1 and abs(counts - 25).max() <= 1
    np.testing.assert_array_equal(idx, select_finetune_labels(labels, snr, 0.01, seed=3))


@pytest.mark.parametrize("fraction", [0.01, 0.005, 0.001])
def test_select_sweep_fractions(fraction):
    labels = np.repeat(np.arange(4), 10_000)
    idx = select_finetune_labels(labels, np.zeros(labels.size), fraction)
    assert idx.size == round(fraction * labels.size)
    assert np.all(np.bincount(labels[idx]) > 0)


def test_select_spreads_over_snr():
    labels = np.zeros(1000, dtype=int)
    snr = np.repeat([0, 10], 500)
    idx = select_finetune_labels(labels, snr, 0.1)
    assert np.sum(snr[idx] == 0) == np.sum(snr[idx] == 10) == 50


def test_select_names_empty_class():
    labels = np.array([0] * 300 + [1] * 10)
    with pytest.raises(ValueError, match="QPSK"):
        select_finetune_labels(labels, np.zeros(310), 0.01, class_names=["BPSK", "QPSK"])


# -- training loops -------------------------------------------------------------

def test_pretrain_snr_filter(small_ds):
    kept = small_ds.indices("ssl_train", snr_min=6.0)
    assert set(np.unique(small_ds.snr_db[kept])) == {6.0, 10.0}
    m = RISMAE(_cfg(), with_head=False)
    tr = pretrain(small_ds, m, TrainConfig(epochs=1, batch_size=64, max_steps=1))
    assert len(tr.steps) == 1
    with pytest.raises(ValueError, match="SNR"):
        pretrain(small_ds, RISMAE(_cfg(), with_head=False),
                 TrainConfig(epochs=1, pretrain_snr_min_db=30.0))


def test_one_step_updates_every_parameter_and_not_the_head():
    X = np.random.default_rng(0).standard_normal((8, 2, 64))
    m = RISMAE(_cfg(), with_decoder=True, with_head=True)
    before = m.get_state()
    pretrain_arrays(m, X, TrainConfig(epochs=2, batch_size=8, warmup_frac=0.5, base_lr=1e-3,
                                      schedule="constant", max_steps=2))
    after = m.named_parameters()
    for name, v in after.items():
        changed = not np.array_equal(v, before[name])
        assert changed != name.startswith("head."), name
    assert not any(k.startswith("head.") for k in m.grads) and not any(
        np.any(m.children["head"].grads.get(k, 0)) for k in ("w", "b"))


def test_finetune_leaves_decoder_gradients_zero():
    X = np.random.default_rng(0).standard_normal((8, 2, 64))
    y = np.arange(8) % 4
    m = RISMAE(_cfg(), with_decoder=True, with_head=True)
    dec_before = {k: v.copy() for k, v in m.named_parameters().items()
                  if k.startswith(("decoder.", "pred.", "enc_to_dec.", "mask_token", "dec_pos"))}
    finetune_arrays(m, X, y, TrainConfig(stage="finetune", epochs=1, batch_size=8, max_steps=2))
    grads = m.named_grads()
    for k, v in dec_before.items():
        assert not np.any(grads[k]), k
        np.testing.assert_array_equal(m.named_parameters()[k], v)


def test_freeze_encoder_trains_only_head():
    X = np.random.default_rng(0).standard_normal((8, 2, 64))
    y = np.arange(8) % 4
    m = RISMAE(_cfg(), with_decoder=False, with_head=True)
    before = m.get_state()
    finetune_arrays(m, X, y, TrainConfig(stage="finetune", epochs=2, batch_size=4, base_lr=1e-2,
                                         freeze_encoder=True))
    for k, v in m.named_parameters().items():
        if k.startswith("head."):
            assert not np.array_equal(v, before[k])
        else:
            assert v.tobytes() == before[k].tobytes(), k


def test_nan_aborts_with_step_index():
    X = np.random.default_rng(0).standard_normal((8, 2, 64))
    X[3, 0, 5] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        pretrain_arrays(RISMAE(_cfg(), with_head=False), X, TrainConfig(epochs=1, batch_size=8))


def test_reproducible_trace():
    X = np.random.default_rng(0).standard_normal((40, 2, 64)).astype(np.float32)
    runs = []
    for _ in range(2):
        m = RISMAE(_cfg(dtype="float32"), with_head=False)
        runs.append(pretrain_arrays(m, X, TrainConfig(epochs=2, batch_size=8, base_lr=1e-3)).losses)
    np.testing.assert_allclose(runs[0], runs[1], rtol=1e-6)


def test_best_validation_checkpoint_retained():
    rng = np.random.default_rng(0)
    X, Xv = rng.standard_normal((16, 2, 64)), rng.standard_normal((8, 2, 64))
    states = []
    m = RISMAE(_cfg(), with_head=False)
    tr = pretrain_arrays(m, X, TrainConfig(epochs=4, batch_size=8, base_lr=1e-2), X_val=Xv,
                         callback=lambda e, t: states.append(m.get_state()))
    best = int(np.argmin(tr.val_metric))
    assert tr.best_epoch == best
    for k, v in m.named_parameters().items():
        np.testing.assert_array_equal(v, states[best][k])


def test_finetune_on_dataset_uses_all_snr(small_ds):
    m = RISMAE(_cfg(), with_decoder=False, with_head=True)
    tr = finetune(small_ds, m, TrainConfig(stage="finetune", epochs=1, batch_size=16, label_fraction=0.25))
    snr = small_ds.snr_db[tr.selected_frames]
    assert set(np.unique(snr)) == {-4.0, 0.0, 6.0, 10.0}
    assert np.all(small_ds.splits[tr.selected_frames] == 0)
    assert tr.selected_frames.size == round(0.25 * small_ds.indices("ssl_train").size)


def test_finetune_class_mismatch(small_ds):
    with pytest.raises(ValueError, match="classes"):
        finetune(small_ds, RISMAE(_cfg(num_classes=3), with_decoder=False),
                 TrainConfig(stage="finetune", epochs=1))


def test_trace_csv(tmp_path):
    X = np.random.default_rng(0).standard_normal((8, 2, 64))
    tr = pretrain_arrays(RISMAE(_cfg(), with_head=False), X, TrainConfig(epochs=1, batch_size=4))
    tr.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss" and len(lines) == 3
