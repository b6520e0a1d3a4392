"""Acceptance gate: one test per shipped guarantee, numbered, each ending
in a single pass/fail verdict line.

The expensive guarantees (the end-to-end desk-scale run, the retrained
branch-ablation sweep, and the activation-map localization check) share one
module-scoped training run so the whole gate stays runnable on a laptop.
"""

import json
import os
import time

import numpy as np
import pytest

import forgeflow.tensor as T
from forgeflow.checkpoint import load_checkpoint, save_checkpoint
from forgeflow.cli import (detector_config_from, resolve_config,
                           synth_config_from, train_config_from)
from forgeflow.dataio import (ManifestEntry, load_dataset,
                              load_segment_arrays, read_segment,
                              synth_generate, write_manifest, write_segment)
from forgeflow.errors import DataError
from forgeflow.evalkit import (PredictionRecord, auc, bootstrap_ci,
                               evaluate)
from forgeflow.explain import mass_in_bbox, overlay, segment_cams
from forgeflow.gradcheck import run_suite
from forgeflow.model import BranchMask, Detector, DetectorConfig
from forgeflow.tensor import GradientTape, Tensor
from forgeflow.training import (FocalLossConfig, TrainConfig, focal_loss,
                                train_loop)
from forgeflow.fft import fft2d

from oracles import auc_pairs, conv2d_loops, dft2d


def _verdict(num, ok, detail):
    line = f"[acceptance {num:02d}] {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    assert ok, line


# ------------------------------------------------- 1: gradient self-check

def test_acceptance_01_gradient_suite():
    t0 = time.monotonic()
    ok, rows = run_suite()
    elapsed = time.monotonic() - t0
    worst_ops = max(w for n, w, _, _ in rows if n != "end-to-end")
    worst_e2e = max(w for n, w, _, _ in rows if n == "end-to-end")
    ok = ok and worst_ops < 1e-3 and worst_e2e < 1e-2 and elapsed < 60.0
    _verdict(1, ok, f"op err {worst_ops:.2e} (<1e-3), end-to-end "
                    f"{worst_e2e:.2e} (<1e-2), {elapsed:.1f}s (<60s)")


# ---------------------------------------------------- 2: oracle agreement

def test_acceptance_02_oracle_equivalence():
    rng = np.random.default_rng(42)
    worst_conv = 0.0
    for _ in range(50):
        n, c, h, w = 1, int(rng.integers(1, 4)), int(rng.integers(4, 9)), \
            int(rng.integers(4, 9))
        k = int(rng.integers(1, 4))
        f = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2))
        if h + 2 * pad < k or w + 2 * pad < k:
            pad = k
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(f, c, k, k))
        b = rng.normal(size=f)
        with T.reference_mode():
            got = T.conv2d(Tensor(x), Tensor(wt), Tensor(b),
                           stride=stride, padding=pad).data
        want = conv2d_loops(x, wt, b, stride=stride, padding=pad)
        worst_conv = max(worst_conv, float(np.abs(got - want).max()))

    worst_auc = 0.0
    for i in range(50):
        m = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, size=m)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.uniform(size=m), 2)  # force some ties
        records = [PredictionRecord(str(j), int(y), float(s))
                   for j, (y, s) in enumerate(zip(labels, scores))]
        worst_auc = max(worst_auc,
                        abs(auc(records) - auc_pairs(labels, scores)))

    worst_fft = 0.0
    for _ in range(50):
        x = rng.normal(size=(16, 16)) + 1j * rng.normal(size=(16, 16))
        got = fft2d(x)
        want = dft2d(x)
        rel = np.abs(got - want).max() / max(1.0, np.abs(want).max())
        worst_fft = max(worst_fft, float(rel))

    ok = worst_conv < 1e-5 and worst_auc < 1e-12 and worst_fft < 1e-4
    _verdict(2, ok, f"conv vs 6-loop {worst_conv:.2e} (<1e-5), AUC vs pair "
                    f"enumeration {worst_auc:.2e} (exact), FFT vs DFT "
                    f"{worst_fft:.2e} (<1e-4), 50 instances each")


# ------------------------------------------------ 3: unfreezing schedule

def test_acceptance_03_scheduler_conformance(tmp_path):
    cfg = TrainConfig(epochs=15)  # library defaults: lr 2e-5, stages 4/7/9
    model = Detector(DetectorConfig.tiny(), seed=5)
    rng = np.random.default_rng(0)
    data = [(f"s{i}", rng.uniform(size=(2, 3, 8, 8)),
             rng.uniform(size=(2, 1, 8, 8)), i % 2) for i in range(8)]
    train_loop(model, data, data, cfg, out_dir=str(tmp_path))

    from forgeflow.model import build_registry
    group_of = {e.name: e.group for e in build_registry(model).entries}

    states, metas = [], []
    for epoch in range(1, 16):
        st, meta = load_checkpoint(tmp_path / f"epoch_{epoch:03d}.ffck")
        states.append(st)
        metas.append(meta)

    lrs = [m["lr"] for m in metas]
    lr_ok = (lrs[:3] == [2e-5] * 3 and lrs[3:] == [1e-5] * 12)
    groups = [set(m["schedule"]["active_groups"]) for m in metas]
    changes = [e + 2 for e in range(14) if groups[e + 1] != groups[e]]
    stage_ok = changes == [4, 7, 9]

    frozen_ok = True
    for e in range(1, 15):  # epochs 2..15 vs their predecessor
        active = groups[e]
        for name, arr in states[e].items():
            if group_of[name] not in active:
                if not np.array_equal(arr, states[e - 1][name]):
                    frozen_ok = False
    ok = lr_ok and stage_ok and frozen_ok
    _verdict(3, ok, f"stage transitions at {changes} (want [4, 7, 9]), lr "
                    f"2e-5 -> 1e-5 once at epoch 4 ({lr_ok}), frozen params "
                    f"bitwise constant ({frozen_ok})")


# ------------------------------------------------------- 4: focal loss

def test_acceptance_04_focal_loss_conformance():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.02, 0.98, size=40)
    y = rng.integers(0, 2, size=40).astype(float)
    with T.reference_mode():
        got = focal_loss(Tensor(p), y, FocalLossConfig(alpha=1.0,
                                                       gamma=0.0)).item()
    bce = float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    bce_ok = abs(got - bce) < 1e-6

    with T.reference_mode():
        mid = focal_loss(Tensor(np.array([0.5])), [1.0]).item()
    mid_ok = abs(mid - 0.25 * np.log(2)) < 1e-6

    mags = {}
    for prob in (0.9, 0.5):
        t = Tensor(np.array([prob]), trainable=True)
        with GradientTape() as tape:
            loss = focal_loss(t, [1.0])
        tape.backward(loss)
        mags[prob] = abs(float(t.grad[0]))
    grad_ok = mags[0.9] < mags[0.5]
    ok = bce_ok and mid_ok and grad_ok
    _verdict(4, ok, f"gamma=0 equals BCE within 1e-6 ({bce_ok}), value at "
                    f"p_t=0.5 equals 0.25*ln2 within 1e-6 ({mid_ok}), "
                    f"|grad| at 0.9 ({mags[0.9]:.3f}) < at 0.5 "
                    f"({mags[0.5]:.3f})")


# ----------------------------------------- shared desk-scale training run

class AcceptanceRun:
    def __init__(self, tmp):
        self.cfg = resolve_config(None, {})  # shipped defaults
        self.data_dir = os.path.join(tmp, "data")
        os.makedirs(self.data_dir)
        self.entries = synth_generate(synth_config_from(self.cfg),
                                      self.data_dir)
        manifest = os.path.join(self.data_dir, "manifest.jsonl")
        self.train_data = load_dataset(manifest, "train")
        self.val_data = load_dataset(manifest, "val")
        self.train_cfg = train_config_from(self.cfg)
        self.model_cfg = detector_config_from(self.cfg)
        self.model = Detector(self.model_cfg, seed=self.cfg["seed"])
        self.result = train_loop(self.model, self.train_data, self.val_data,
                                 self.train_cfg)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    return AcceptanceRun(str(tmp_path_factory.mktemp("acceptance")))


# ------------------------------------------- 5: end-to-end synthetic run

def test_acceptance_05_end_to_end_training_run(run):
    n_train = len(run.train_data)
    n_val = len(run.val_data)
    fake_train = sum(1 for s in run.train_data if s.label == 1)
    ratio = fake_train / max(1, n_train - fake_train)
    recs = run.result.records
    final_auc = recs[-1].val_auc
    final_f1 = recs[-1].val_f1
    loss_drop = recs[-1].train_loss < recs[0].train_loss
    wall = run.result.wall_seconds
    shape_ok = (n_train == 280 and n_val == 80 and len(recs) == 15
                and 6.0 <= ratio <= 8.0)
    ok = (shape_ok and final_auc >= 0.95 and final_f1 >= 0.90
          and loss_drop and wall < 600.0)
    _verdict(5, ok, f"280/80 split at {ratio:.1f}:1 fake:real "
                    f"({shape_ok}), 15 epochs in {wall:.0f}s (<600s), "
                    f"final val AUC {final_auc:.4f} (>=0.95), F1 "
                    f"{final_f1:.4f} (>=0.90), train loss "
                    f"{recs[0].train_loss:.4f} -> {recs[-1].train_loss:.4f} "
                    f"({loss_drop})")


# -------------------------------------------- 6: retrained branch ablation

def test_acceptance_06_ablation_synergy(run):
    full_auc = run.result.best_auc
    variants = ("rgb", "tex", "freq", "rgb,tex", "rgb,freq", "tex,freq")
    rows = []
    for names in variants:
        mask = BranchMask.from_names(names)
        model = Detector(run.model_cfg, seed=run.cfg["seed"])
        res = train_loop(model, run.train_data, run.val_data, run.train_cfg,
                         mask=mask)
        rows.append((mask.short(), res.best_auc, full_auc - res.best_auc))
    table = ", ".join(f"{name} {auc:.3f} (margin {m:+.3f})"
                      for name, auc, m in rows)
    worst = min(m for _, _, m in rows)
    ok = worst >= 0.03
    _verdict(6, ok, f"full {full_auc:.3f} vs {table}; worst margin "
                    f"{worst:+.3f} (>=0.03), same seed and epochs")


# ------------------------------------------------- 7: bootstrap intervals

def test_acceptance_07_bootstrap_ci_conformance(run):
    preds = run.result.final_predictions
    a = bootstrap_ci(preds, "auc", n=1000, seed=42)
    b = bootstrap_ci(preds, "auc", n=1000, seed=42)
    deterministic = a == b
    point = evaluate(preds).auc
    brackets = a[0] <= point <= a[1]

    perfect = [PredictionRecord(f"p{i}", i % 2, 0.95 if i % 2 else 0.05)
               for i in range(30)]
    lo, hi = bootstrap_ci(perfect, "auc", n=1000, seed=42)
    collapsed = lo == hi == 1.0
    ok = deterministic and brackets and collapsed
    _verdict(7, ok, f"n=1000 seed=42 percentile CI [{a[0]:.4f}, {a[1]:.4f}] "
                    f"brackets point {point:.4f} ({brackets}), repeat "
                    f"identical ({deterministic}), perfect separation -> "
                    f"[1.0, 1.0] ({collapsed})")


# ------------------------------------------ 8: activation-map localization

def test_acceptance_08_gradcam_localization(run):
    base = run.data_dir
    targets = [e for e in run.entries
               if e.artifact_kind == "texture" and e.split == "val"]
    if len(targets) < 20:
        targets += [e for e in run.entries
                    if e.artifact_kind == "texture" and e.split == "train"]
    targets = targets[:24]
    enough = len(targets) >= 20

    ratios = []
    for e in targets:
        frames, maps = load_segment_arrays(os.path.join(base, e.path))
        cams, _ = segment_cams(run.model, frames, maps)
        masses = [mass_in_bbox(hm, e.bbox) for hm in cams]
        mass = float(np.mean([m for m, _ in masses]))
        area = masses[0][1]
        ratios.append(mass / area)
    mean_ratio = float(np.mean(ratios))

    first = os.path.join(base, targets[0].path)
    frames, maps = load_segment_arrays(first)
    raw = read_segment(first)
    cams, _ = segment_cams(run.model, frames, maps)
    blended = overlay(raw[0], cams[0], alpha=0.0)
    exact = np.array_equal(blended, raw[0].astype(np.float64))
    ok = enough and mean_ratio >= 1.5 and exact
    _verdict(8, ok, f"{len(targets)} texture fakes (>=20: {enough}), mean "
                    f"in-box mass {mean_ratio:.2f}x the box area fraction "
                    f"(>=1.5x), alpha=0 overlay bit-exact ({exact})")


# ----------------------------------------------- 9: attention validity

def test_acceptance_09_attention_validity():
    model = Detector(DetectorConfig.tiny(), seed=11)
    model.eval()
    rng = np.random.default_rng(0)
    worst_sum = 0.0
    worst_neg = 0.0
    n_seen = 0
    for _ in range(40):  # 40 batches of 25 = 1000 inputs
        frames = rng.uniform(size=(25, 2, 3, 8, 8))
        maps = rng.uniform(size=(25, 2, 1, 8, 8))
        out = model.forward_segment(frames, maps)
        for w in list(out.frame_weights.values()) + [out.alphas]:
            worst_neg = min(worst_neg, float(w.data.min()))
            worst_sum = max(worst_sum,
                            float(np.abs(w.data.sum(axis=-1) - 1.0).max()))
        n_seen += 25
    simplex_ok = worst_neg >= 0.0 and worst_sum <= 1e-6

    frames = rng.uniform(size=(4, 3, 3, 8, 8))
    maps = rng.uniform(size=(4, 3, 1, 8, 8))
    base = model.forward_segment(frames, maps).prob.data
    perm = np.array([2, 0, 1])
    swapped = model.forward_segment(frames[:, perm], maps[:, perm]).prob.data
    perm_err = float(np.abs(base - swapped).max())

    spatial = BranchMask.from_names("rgb,tex")
    ref = model.forward_segment(frames, maps, spatial).prob.data
    noisy = model.forward_segment(frames, maps + 100.0, spatial).prob.data
    freq_only = BranchMask.from_names("freq")
    ref2 = model.forward_segment(frames, maps, freq_only).prob.data
    noisy2 = model.forward_segment(frames + 100.0, maps, freq_only).prob.data
    mask_err = max(float(np.abs(ref - noisy).max()),
                   float(np.abs(ref2 - noisy2).max()))
    ok = simplex_ok and perm_err < 1e-6 and mask_err == 0.0
    _verdict(9, ok, f"{n_seen} inputs: weights/alphas nonnegative "
                    f"(min {worst_neg:.1e}) summing to 1 (err "
                    f"{worst_sum:.1e} <=1e-6), frame-permutation err "
                    f"{perm_err:.1e} (<1e-6), masked-branch perturbation "
                    f"err {mask_err:.1e}")


# ------------------------------------------------- 10: format round-trips

def test_acceptance_10_format_round_trips(tmp_path):
    rng = np.random.default_rng(9)
    frames = rng.uniform(size=(4, 3, 16, 16)).astype(np.float32)
    p1, p2 = tmp_path / "a.ffsg", tmp_path / "b.ffsg"
    write_segment(p1, frames)
    write_segment(p2, read_segment(p1))
    seg_ok = p1.read_bytes() == p2.read_bytes()

    state = {"w": rng.normal(size=(3, 4)).astype(np.float32),
             "b": rng.normal(size=4).astype(np.float32)}
    c1, c2 = tmp_path / "a.ffck", tmp_path / "b.ffck"
    save_checkpoint(c1, state, {"epoch": 1})
    st, meta = load_checkpoint(c1)
    save_checkpoint(c2, st, meta)
    ck_ok = c1.read_bytes() == c2.read_bytes()

    entries = [ManifestEntry("a.ffsg", 1, "train", "id_1", "texture",
                             (0, 0, 4, 4)),
               ManifestEntry("b.ffsg", 0, "val", "id_1")]
    try:
        write_manifest(tmp_path / "m.jsonl", entries)
        leak_ok = False
    except DataError:
        leak_ok = True
    ok = seg_ok and ck_ok and leak_ok
    _verdict(10, ok, f"segment write-read-write bitwise ({seg_ok}), "
                     f"checkpoint write-read-write bitwise ({ck_ok}), "
                     f"identity-leaking manifest rejected ({leak_ok})")
