"""Loss conformance, optimizer semantics, the unfreezing schedule, and
determinism of the epoch loop."""

import math
import os

import numpy as np
import pytest

import forgeflow.tensor as T
from forgeflow.checkpoint import load_checkpoint
from forgeflow.errors import ConfigError, DataError, NumericError, UsageError
from forgeflow.model import (Detector, DetectorConfig, ParamEntry,
                             ParamRegistry, build_registry)
from forgeflow.tensor import GradientTape, Tensor
from forgeflow.training import (AdamW, FocalLossConfig, TrainConfig,
                                UnfreezeSchedule, apply_unfreeze, focal_loss,
                                train_loop)

from oracles import focal_scalar

HEAD_GROUPS = {"projection", "classifier", "head"}


# ---------------------------------------------------------------- focal loss

def test_focal_scalar_value():
    # p_t = 0.5, alpha=1, gamma=2 -> 0.25 * ln 2
    with T.reference_mode():
        loss = focal_loss(Tensor(np.array([0.5])), [1.0])
    assert loss.item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert loss.item() == pytest.approx(0.173287, abs=1e-6)


def test_focal_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=24)
    y = rng.integers(0, 2, size=24).astype(float)
    with T.reference_mode():
        got = focal_loss(Tensor(p), y, FocalLossConfig(gamma=0.0)).item()
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert got == pytest.approx(bce, abs=1e-12)


def test_focal_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.02, 0.98, size=17)
    y = rng.integers(0, 2, size=17).astype(float)
    cfg = FocalLossConfig(alpha=0.75, gamma=2.0)
    with T.reference_mode():
        got = focal_loss(Tensor(p), y, cfg).item()
    want = np.mean([focal_scalar(pi, yi, 0.75, 2.0) for pi, yi in zip(p, y)])
    assert got == pytest.approx(want, abs=1e-12)


def test_focal_downweights_easy_examples():
    grads = {}
    for prob in (0.9, 0.5):
        p = Tensor(np.array([prob]), trainable=True)
        with GradientTape() as tape:
            loss = focal_loss(p, [1.0])
        tape.backward(loss)
        grads[prob] = abs(float(p.grad[0]))
    assert grads[0.9] < 0.1 * grads[0.5]


def test_focal_clamps_extreme_probs():
    with T.reference_mode():
        loss = focal_loss(Tensor(np.array([0.0, 1.0])), [1.0, 1.0])
    assert np.isfinite(loss.item())


def test_focal_rejects_soft_labels():
    with pytest.raises(DataError, match="labels"):
        focal_loss(Tensor(np.array([0.5])), [0.3])
    with pytest.raises(ConfigError):
        FocalLossConfig(gamma=-1.0)
    with pytest.raises(ConfigError):
        FocalLossConfig(clamp_eps=0.7)


# ---------------------------------------------------------------- optimizer

def _registry(*specs):
    entries = []
    with T.reference_mode():  # float64 params so decay math is exact
        for name, data, group, no_decay in specs:
            t = Tensor(np.asarray(data, dtype=np.float64), trainable=True)
            entries.append(ParamEntry(name, t, group, no_decay))
    return ParamRegistry(entries)


def test_adamw_first_step_is_signed_lr():
    reg = _registry(("w", [1.0, -2.0, 3.0], "head", False))
    opt = AdamW(reg, lr=1e-3, weight_decay=0.0)
    w = reg.entries[0].tensor
    before = w.data.copy()
    g = np.array([0.5, -0.1, 2.0])
    w.grad = g.copy()
    opt.step()
    assert np.allclose(w.data - before, -1e-3 * np.sign(g), atol=1e-9)


def test_adamw_decay_only_is_geometric():
    reg = _registry(("w", [2.0, -4.0], "head", False))
    opt = AdamW(reg, lr=0.01, weight_decay=0.1)
    w = reg.entries[0].tensor
    start = w.data.copy()
    for _ in range(5):
        w.grad = np.zeros_like(w.data)
        opt.step()
    assert np.allclose(w.data, start * (1 - 0.01 * 0.1) ** 5, rtol=1e-12)


def test_adamw_no_decay_entries_skip_decay():
    reg = _registry(("gamma", [1.0, 1.0], "head", True))
    opt = AdamW(reg, lr=0.01, weight_decay=0.5)
    g = reg.entries[0].tensor
    start = g.data.copy()
    g.grad = np.zeros_like(g.data)
    opt.step()
    assert np.array_equal(g.data, start)


def test_adamw_skips_frozen_and_clears_grads():
    reg = _registry(("w", [1.0], "head", False),
                    ("frozen", [5.0], "backbone_early", False))
    reg.set_trainable({"head"})
    frozen = reg.entries[1].tensor
    keep = frozen.data.copy()
    reg.entries[0].tensor.grad = np.array([1.0])
    frozen.grad = np.array([9.0])  # stale grad on a frozen param is ignored
    opt = AdamW(reg, lr=1e-3)
    opt.step()
    assert np.array_equal(frozen.data, keep)
    assert reg.entries[0].tensor.grad is None
    assert frozen.grad is None


def test_adamw_missing_grad_is_integrity_error():
    reg = _registry(("w", [1.0], "head", False))
    opt = AdamW(reg, lr=1e-3)
    with pytest.raises(UsageError, match="optimizer integrity"):
        opt.step()


def test_adamw_converges_on_quadratic():
    reg = _registry(("w", [4.0, -3.0], "head", False))
    w = reg.entries[0].tensor
    opt = AdamW(reg, lr=0.05, weight_decay=0.0)
    for _ in range(400):
        w.grad = 2.0 * w.data
        opt.step()
    assert np.abs(w.data).max() < 1e-2


# ---------------------------------------------------------------- schedule

def test_schedule_group_transitions():
    s = UnfreezeSchedule()
    assert s.groups_for_epoch(1) == HEAD_GROUPS
    assert s.groups_for_epoch(3) == HEAD_GROUPS
    assert s.groups_for_epoch(4) == HEAD_GROUPS | {"backbone_last"}
    assert s.groups_for_epoch(6) == HEAD_GROUPS | {"backbone_last"}
    assert s.groups_for_epoch(7) == HEAD_GROUPS | {"backbone_last",
                                                   "backbone_mid"}
    assert s.groups_for_epoch(9) == HEAD_GROUPS | {"backbone_last",
                                                   "backbone_mid",
                                                   "backbone_early"}
    assert s.groups_for_epoch(15) == s.groups_for_epoch(9)


def test_schedule_is_monotone_with_four_phases():
    s = UnfreezeSchedule()
    seen = []
    prev = set()
    for epoch in range(1, 16):
        groups = s.groups_for_epoch(epoch)
        assert prev <= groups
        if groups != prev:
            seen.append(epoch)
        prev = groups
    assert seen == [1, 4, 7, 9]


def test_schedule_lr_halves_exactly_once():
    s = UnfreezeSchedule()
    assert s.lr_for_epoch(2e-5, 1) == 2e-5
    assert s.lr_for_epoch(2e-5, 3) == 2e-5
    assert s.lr_for_epoch(2e-5, 4) == 1e-5
    assert s.lr_for_epoch(2e-5, 7) == 1e-5
    assert s.lr_for_epoch(2e-5, 9) == 1e-5
    assert s.lr_for_epoch(2e-5, 15) == 1e-5


def test_schedule_validates_ordering():
    with pytest.raises(ConfigError):
        UnfreezeSchedule(stage2_epoch=7, stage1_epoch=4, full_epoch=9)
    with pytest.raises(ConfigError):
        UnfreezeSchedule(stage2_epoch=4, stage1_epoch=4, full_epoch=9)
    with pytest.raises(ConfigError):
        UnfreezeSchedule().groups_for_epoch(0)


def test_apply_unfreeze_sets_registry_state():
    model = Detector(DetectorConfig.tiny(), seed=0)
    reg = build_registry(model)
    groups, lr = apply_unfreeze(UnfreezeSchedule(), reg, 2, 2e-5)
    assert groups == HEAD_GROUPS and lr == 2e-5
    trainables = {e.group for e in reg.trainable_entries()}
    assert trainables <= HEAD_GROUPS
    groups, lr = apply_unfreeze(UnfreezeSchedule(), reg, 9, 2e-5)
    assert lr == 1e-5
    active = {e.group for e in reg.trainable_entries()}
    assert active <= groups and "backbone_early" in active


# ---------------------------------------------------------------- epoch loop

def _toy_data(n, seed, k=2, side=8):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        frames = rng.normal(scale=0.5, size=(k, 3, side, side))
        maps = rng.uniform(size=(k, 1, side, side))
        out.append((f"seg-{seed}-{i:03d}", frames.astype(np.float32),
                    maps.astype(np.float32), int(i % 2)))
    return out


def _quick_cfg(epochs=3, **kw):
    return TrainConfig(epochs=epochs, batch_size=4, lr=1e-3, seed=7,
                       schedule=UnfreezeSchedule(stage2_epoch=2,
                                                 stage1_epoch=3,
                                                 full_epoch=4), **kw)


def _run(seed=7, epochs=3, out_dir=None):
    model = Detector(DetectorConfig.tiny(), seed=1)
    cfg = _quick_cfg(epochs)
    cfg.seed = seed
    result = train_loop(model, _toy_data(10, 0), _toy_data(6, 1), cfg,
                        out_dir=out_dir)
    return model, result


def test_train_loop_bitwise_deterministic():
    _, a = _run(seed=7)
    model_b, b = _run(seed=7)
    assert [r.as_dict() for r in a.records] == [r.as_dict() for r in b.records]
    assert a.best_epoch == b.best_epoch
    assert set(a.best_state) == set(b.best_state)
    for name in a.best_state:
        assert np.array_equal(a.best_state[name], b.best_state[name]), name
    _, c = _run(seed=8)
    assert [r.train_loss for r in a.records] != [r.train_loss for r in c.records]


def test_train_loop_respects_freeze_bitwise():
    model = Detector(DetectorConfig.tiny(), seed=3)
    reg = build_registry(model)
    frozen_before = {e.name: e.tensor.data.copy() for e in reg.entries
                     if e.group.startswith("backbone")}
    cfg = TrainConfig(epochs=2, batch_size=5, lr=1e-3, seed=0)  # head-only phase
    train_loop(model, _toy_data(10, 0), _toy_data(6, 1), cfg, registry=reg)
    after = {name: t for name, t, _ in model.named_parameters()}
    for name, before in frozen_before.items():
        assert np.array_equal(after[name].data, before), name


def test_train_loop_records_schedule(tmp_path):
    _, result = _run(out_dir=tmp_path)
    assert [r.epoch for r in result.records] == [1, 2, 3]
    assert result.records[0].active_groups == sorted(HEAD_GROUPS)
    assert "backbone_last" in result.records[1].active_groups
    assert "backbone_mid" in result.records[2].active_groups
    assert result.records[0].lr == 1e-3
    assert result.records[1].lr == 5e-4
    assert len(result.final_predictions) == 6
    assert result.wall_seconds > 0


def test_train_loop_checkpoints_and_best_link(tmp_path):
    _, result = _run(out_dir=tmp_path)
    files = sorted(os.listdir(tmp_path))
    assert [f for f in files if f.startswith("epoch")] == \
        ["epoch_001.ffck", "epoch_002.ffck", "epoch_003.ffck"]
    link = tmp_path / "best.ffck"
    assert link.is_symlink()
    assert os.readlink(link) == f"epoch_{result.best_epoch:03d}.ffck"
    state, meta = load_checkpoint(link)
    assert meta["epoch"] == result.best_epoch
    assert meta["rng"] == {"master_seed": 7, "epoch": result.best_epoch}
    assert meta["mask"] == [True, True, True]
    assert set(state) == set(result.best_state)


def test_train_loop_checkpoint_restores_model(tmp_path):
    model, result = _run(out_dir=tmp_path)
    state, _ = load_checkpoint(tmp_path / f"epoch_003.ffck")
    twin = Detector(DetectorConfig.tiny(), seed=99)
    twin.load_state_dict(state)
    data = _toy_data(4, 2)
    frames = np.stack([d[1] for d in data])
    maps = np.stack([d[2] for d in data])
    model.eval(), twin.eval()
    a = model.forward_segment(frames, maps).prob.data
    b = twin.forward_segment(frames, maps).prob.data
    assert np.allclose(a, b, atol=1e-6)


def test_train_loop_nan_abort_names_segment():
    model = Detector(DetectorConfig.tiny(), seed=1)
    data = _toy_data(6, 0)
    bad = data[3]
    frames = bad[1].copy()
    frames[0, 0, 0, 0] = np.nan
    data[3] = (bad[0], frames, bad[2], bad[3])
    with pytest.raises(NumericError, match="seg-0-003"):
        train_loop(model, data, _toy_data(4, 1), _quick_cfg(epochs=1))


def test_train_loop_rejects_empty_sets():
    model = Detector(DetectorConfig.tiny(), seed=1)
    with pytest.raises(DataError):
        train_loop(model, [], _toy_data(4, 1), _quick_cfg())
