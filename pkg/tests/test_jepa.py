"""Pretraining mechanics: masking, EMA, stop-gradient, determinism, collapse."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmjepa.batching import pack_dataset
from mmjepa.cohort import DatasetSpec, generate_dataset, usable_mixing_matrix
from mmjepa.jepa import (
    COLLAPSE_STD_THRESHOLD,
    JepaConfig,
    LogRow,
    TrainLog,
    batch_masks,
    collapse_metrics,
    collapse_report,
    ema_update,
    jepa_step,
    load_pretrain_checkpoint,
    mask_token_count,
    mask_tokens,
    pretrain,
    save_pretrain_checkpoint,
    target_representations,
)
from mmjepa.model import Model, ModelConfig
from mmjepa.tensor import Parameter

CFG = ModelConfig(
    d_model=16, n_layers=1, n_heads=2, d_ff=32, predictor_layers=1,
    image_channels=(4, 8), expression_dim=8, image_size=16,
)
MIX = usable_mixing_matrix(8, 0, density=0.2)


def _dataset(n=16, seed=2, **overrides):
    spec = DatasetSpec(
        name="U", kind="U", n=n, complete=True, labeled=False,
        beta=0.99, m=8, image_size=16, cohort_seed=seed, **overrides,
    )
    return generate_dataset(spec, MIX)


def _jcfg(**overrides):
    base = dict(batch_size=8, total_steps=4, checkpoint_every=100, seed=0)
    base.update(overrides)
    return JepaConfig(**base)


# ---------------------------------------------------------------------------
# masking rules
# ---------------------------------------------------------------------------

def test_mask_count_at_twenty_tokens():
    assert mask_token_count(20, 0.15) == 3


def test_mask_count_rounds_half_up():
    assert mask_token_count(10, 0.15) == 2  # 1.5 rounds away from zero


def test_mask_count_floors_at_one():
    assert mask_token_count(2, 0.15) == 1
    assert mask_token_count(6, 0.15) == 1


def test_mask_count_never_masks_everything():
    assert mask_token_count(2, 0.99) == 1
    assert mask_token_count(5, 0.9) == 4


def test_mask_count_rejects_short_sequences():
    with pytest.raises(ValueError, match="fewer than 2"):
        mask_token_count(1, 0.15)


@settings(max_examples=200, deadline=None)
@given(
    n=st.integers(2, 40),
    ratio=st.floats(0.01, 0.99),
    seed=st.integers(0, 2**32 - 1),
)
def test_mask_partition_property(n, ratio, seed):
    keep, masked = mask_tokens(n, ratio, np.random.default_rng(seed))
    assert len(masked) == mask_token_count(n, ratio)
    assert len(keep) + len(masked) == n
    assert np.array_equal(np.union1d(keep, masked), np.arange(n))
    assert np.intersect1d(keep, masked).size == 0
    assert np.all(np.diff(masked) > 0) and np.all(np.diff(keep) > 0)


def test_batch_masks_keyed_by_subject_id():
    uids = np.array([7, 3, 11])
    keep_a, masked_a = batch_masks(uids, 6, 0.15, seed=0, step=5)
    # same subjects in a different batch order get the same personal masks
    keep_b, masked_b = batch_masks(uids[::-1], 6, 0.15, seed=0, step=5)
    assert np.array_equal(masked_a, masked_b[::-1])
    assert np.array_equal(keep_a, keep_b[::-1])


def test_batch_masks_vary_by_step():
    uids = np.arange(32)
    _, masked_a = batch_masks(uids, 6, 0.4, seed=0, step=0)
    _, masked_b = batch_masks(uids, 6, 0.4, seed=0, step=1)
    assert not np.array_equal(masked_a, masked_b)


def test_config_validation():
    with pytest.raises(ValueError, match="mask_ratio"):
        JepaConfig(mask_ratio=0.0)
    with pytest.raises(ValueError, match="ema_momentum"):
        JepaConfig(ema_momentum=1.0)


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def test_ema_recurrence_hand_check():
    tgt = {"w": np.array([1.0, 2.0])}
    ctx = {"w": np.array([3.0, 6.0])}
    ema_update(tgt, ctx, momentum=0.9)
    assert np.allclose(tgt["w"], [0.9 * 1 + 0.1 * 3, 0.9 * 2 + 0.1 * 6])


def test_ema_accepts_parameter_sources():
    tgt = {"w": np.zeros(2)}
    ctx = {"w": Parameter(np.ones(2, dtype=np.float64), name="w", dtype=np.float64)}
    ema_update(tgt, ctx, momentum=0.5)
    assert np.allclose(tgt["w"], 0.5)


def test_ema_missing_key_rejected():
    with pytest.raises(KeyError, match="missing"):
        ema_update({"w": np.zeros(2)}, {"v": np.zeros(2)}, 0.9)


def test_ema_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape mismatch"):
        ema_update({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0.9)


def test_ema_recurrence_holds_at_every_logged_step():
    """Replay theta_t <- m*theta_t + (1-m)*theta_c against the training loop."""
    ds = _dataset()
    model = Model(CFG, seed=0)
    cfg = _jcfg(total_steps=6, ema_momentum=0.95)
    expected = {k: v.copy() for k, v in model.target_copy().items()}
    checked = []

    def hook(step, mdl, target_weights, row):
        # the context encoder has just been updated; apply the recurrence
        for name in expected:
            expected[name] = 0.95 * expected[name] + 0.05 * mdl.params[name].data
            np.testing.assert_allclose(target_weights[name], expected[name], rtol=1e-6, atol=1e-7)
        checked.append(step)

    pretrain(ds, model, cfg, step_hook=hook)
    assert checked == [1, 2, 3, 4, 5, 6]


# ---------------------------------------------------------------------------
# the training step
# ---------------------------------------------------------------------------

def _one_batch(ds, k=8):
    bucket = pack_dataset(ds)[0]
    return [(bucket, np.arange(k))]


def test_step_loss_non_negative_and_logged():
    ds = _dataset()
    model = Model(CFG, seed=0)
    row = jepa_step(model, model.target_copy(), _one_batch(ds), _jcfg(), step=0, lr=1e-3)
    assert row.loss >= 0.0
    assert row.rep_std > 0.0
    assert row.grad_norm > 0.0
    assert row.step == 0 and row.lr == 1e-3


def test_step_updates_context_not_classifier():
    ds = _dataset()
    model = Model(CFG, seed=0)
    before_enc = model.params["encoder.layer0.attn.wq"].data.copy()
    before_head = model.params["classifier.w1"].data.copy()
    jepa_step(model, model.target_copy(), _one_batch(ds), _jcfg(), step=0, lr=1e-2)
    assert not np.array_equal(model.params["encoder.layer0.attn.wq"].data, before_enc)
    assert np.array_equal(model.params["classifier.w1"].data, before_head)


def test_target_encoder_is_stop_gradient():
    """Targets are plain arrays outside the graph; only EMA may move them."""
    ds = _dataset()
    model = Model(CFG, seed=0)
    target = model.target_copy()
    for arr in target.values():
        assert not isinstance(arr, Parameter)
    frozen = {k: v.copy() for k, v in target.items()}
    cfg = _jcfg(ema_momentum=0.9)
    jepa_step(model, target, _one_batch(ds), cfg, step=0, lr=1e-3)
    for name in target:
        manual = 0.9 * frozen[name] + 0.1 * model.params[name].data
        np.testing.assert_allclose(target[name], manual, rtol=1e-6, atol=1e-7)


def test_step_loss_invariant_to_batch_order():
    ds = _dataset()
    cfg = _jcfg()
    bucket = pack_dataset(ds)[0]
    rows = np.arange(8)
    perm = np.array([5, 1, 7, 0, 3, 6, 2, 4])

    model_a = Model(CFG, seed=0)
    row_a = jepa_step(model_a, model_a.target_copy(), [(bucket, rows)], cfg, step=0, lr=1e-3)
    model_b = Model(CFG, seed=0)
    row_b = jepa_step(model_b, model_b.target_copy(), [(bucket, rows[perm])], cfg, step=0, lr=1e-3)
    assert row_a.loss == row_b.loss


def test_step_rejects_single_token_subjects():
    spec = DatasetSpec(
        name="S", kind="S", n=4, complete=False, labeled=True,
        beta=0.99, m=8, image_size=16, cohort_seed=0, expr_missing_rate=1.0,
    )
    ds = generate_dataset(spec, MIX)
    model = Model(CFG, seed=0)
    with pytest.raises(ValueError, match="single-token"):
        jepa_step(model, model.target_copy(), _one_batch(ds, k=4), _jcfg(), 0, 1e-3)


# ---------------------------------------------------------------------------
# the full loop
# ---------------------------------------------------------------------------

def test_pretrain_replays_bit_identically():
    ds = _dataset()
    cfg = _jcfg(total_steps=5)
    model_a = Model(CFG, seed=0)
    tgt_a, log_a = pretrain(ds, model_a, cfg)
    model_b = Model(CFG, seed=0)
    tgt_b, log_b = pretrain(ds, model_b, cfg)
    assert [vars(r) for r in log_a.rows] == [vars(r) for r in log_b.rows]
    for name in tgt_a:
        assert np.array_equal(tgt_a[name], tgt_b[name])
    for name in model_a.params:
        assert np.array_equal(model_a.params[name].data, model_b.params[name].data)


def test_pretrain_loss_decreases():
    ds = _dataset(n=32)
    model = Model(CFG, seed=0)
    _, log = pretrain(ds, model, _jcfg(total_steps=40, batch_size=16, lr_max=3e-3))
    head = np.mean([r.loss for r in log.rows[:5]])
    tail = np.mean([r.loss for r in log.rows[-5:]])
    assert tail < head
    assert all(r.loss >= 0 for r in log.rows)


def test_pretrain_logs_every_step_with_rep_std():
    ds = _dataset()
    model = Model(CFG, seed=0)
    cfg = _jcfg(total_steps=5)
    _, log = pretrain(ds, model, cfg)
    assert [r.step for r in log.rows] == [0, 1, 2, 3, 4]
    assert all(np.isfinite(r.rep_std) and r.rep_std > 0 for r in log.rows)
    assert all(np.isfinite(r.grad_norm) for r in log.rows)


def test_pretrain_skips_single_token_subjects():
    spec = DatasetSpec(
        name="S", kind="S", n=12, complete=False, labeled=True,
        beta=0.99, m=8, image_size=16, cohort_seed=1, expr_missing_rate=0.5,
    )
    ds = generate_dataset(spec, MIX)
    n_single = sum(1 for s in ds.subjects if s.n_tokens() < 2)
    assert 0 < n_single < 12  # the fixture must exercise both layouts
    model = Model(CFG, seed=0)
    _, log = pretrain(ds, model, _jcfg(total_steps=2))
    assert log.skipped_subjects == n_single


def test_pretrain_rejects_all_single_token():
    spec = DatasetSpec(
        name="S", kind="S", n=4, complete=False, labeled=True,
        beta=0.99, m=8, image_size=16, cohort_seed=1, expr_missing_rate=1.0,
    )
    ds = generate_dataset(spec, MIX)
    with pytest.raises(ValueError, match="nothing to pretrain"):
        pretrain(ds, Model(CFG, seed=0), _jcfg())


def test_resume_from_checkpoint_matches_straight_run(tmp_path):
    ds = _dataset()
    cfg = _jcfg(total_steps=6, checkpoint_every=3)

    straight = Model(CFG, seed=0)
    tgt_s, log_s = pretrain(ds, straight, cfg, out_dir=tmp_path / "straight")

    # restart from the mid-run checkpoint with the same config
    resumed, tgt_r, rcfg, step = load_pretrain_checkpoint(tmp_path / "straight" / "checkpoint_0000003.mjpk")
    assert rcfg == cfg
    assert step == 3
    tgt_r, log_r = pretrain(ds, resumed, cfg, start_step=3, target_weights=tgt_r)

    for name in tgt_s:
        assert np.array_equal(tgt_s[name], tgt_r[name])
    for name in straight.params:
        assert np.array_equal(straight.params[name].data, resumed.params[name].data)
    assert [vars(r) for r in log_s.rows[3:]] == [vars(r) for r in log_r.rows]


def test_pretrain_writes_checkpoints_and_log(tmp_path):
    ds = _dataset()
    model = Model(CFG, seed=0)
    cfg = _jcfg(total_steps=4, checkpoint_every=2)
    _, log = pretrain(ds, model, cfg, out_dir=tmp_path)
    assert (tmp_path / "checkpoint_0000002.mjpk").exists()
    assert (tmp_path / "checkpoint_0000004.mjpk").exists()
    replay = TrainLog.from_csv((tmp_path / "train_log.csv").read_text())
    assert [vars(r) for r in replay.rows] == [vars(r) for r in log.rows]


def test_checkpoint_roundtrip_restores_optimizer_state(tmp_path):
    ds = _dataset()
    model = Model(CFG, seed=0)
    target = model.target_copy()
    cfg = _jcfg()
    jepa_step(model, target, _one_batch(ds), cfg, step=0, lr=1e-3)
    path = save_pretrain_checkpoint(tmp_path, model, target, cfg, step=1)
    loaded, tgt, lcfg, step = load_pretrain_checkpoint(path)
    assert step == 1 and lcfg == cfg
    for name, p in model.params.items():
        q = loaded.params[name]
        assert np.array_equal(p.data, q.data)
        assert np.array_equal(p.adam_m, q.adam_m)
        assert np.array_equal(p.adam_v, q.adam_v)
        assert p.step_count == q.step_count
    for name in target:
        assert np.array_equal(target[name], tgt[name])


def test_train_log_csv_roundtrip_is_exact():
    log = TrainLog()
    log.append(LogRow(step=0, loss=1.2345678901234567, lr=1e-3, rep_std=0.1, grad_norm=2.5))
    log.append(LogRow(step=1, loss=0.3, lr=9.87e-4, rep_std=0.09, grad_norm=1.0))
    back = TrainLog.from_csv(log.to_csv())
    assert [vars(r) for r in back.rows] == [vars(r) for r in log.rows]


# ---------------------------------------------------------------------------
# collapse diagnostics
# ---------------------------------------------------------------------------

def test_collapse_metrics_flags_constant_representations():
    reps = np.ones((40, 16))
    out = collapse_metrics(reps)
    assert out["verdict"] == "COLLAPSED"
    assert out["rep_std"] == 0.0
    assert out["rep_rank_proxy"] == 0


def test_collapse_metrics_rank_proxy():
    rng = np.random.default_rng(0)
    basis = rng.normal(size=(2, 16))
    coeffs = rng.normal(size=(40, 2))
    out = collapse_metrics(coeffs @ basis)
    assert out["rep_rank_proxy"] == 2
    assert out["verdict"] == "OK"


def test_collapse_report_on_fresh_init_is_ok():
    ds = _dataset()
    model = Model(CFG, seed=0)
    report = collapse_report(model.target_copy(), CFG, _one_batch(ds))
    assert report["verdict"] == "OK"
    assert report["rep_std"] > COLLAPSE_STD_THRESHOLD
    assert report["rep_rank_proxy"] >= 2


def test_collapse_report_on_zeroed_encoder_is_collapsed():
    ds = _dataset()
    model = Model(CFG, seed=0)
    target = model.target_copy()
    # zero every weight: representations become input-independent
    for arr in target.values():
        arr[...] = 0.0
    report = collapse_report(target, CFG, _one_batch(ds))
    assert report["verdict"] == "COLLAPSED"


def test_target_representations_shape():
    ds = _dataset()
    model = Model(CFG, seed=0)
    reps = target_representations(model.target_copy(), CFG, _one_batch(ds, k=4))
    assert reps.shape == (4 * 6, CFG.d_model)
