"""Command-line front end for the whole pipeline.

One executable, seven subcommands:

    synth      generate a synthetic dataset from a config
    train      run the progressive-unfreezing training loop
    eval       score a checkpoint on a dataset split
    ablate     branch-subset comparison table
    gradcam    write class-activation overlays for segments
    ci         bootstrap confidence interval over a predictions file
    gradcheck  finite-difference self-test of the autodiff core

Configuration is one flat JSON object. Every key has a default, unknown
keys are rejected, and ``--set key=value`` overrides beat the file. Each
artifact-producing run writes the fully-resolved config it used next to
its outputs, so a run directory reproduces itself. All JSON artifacts are
byte-stable across re-runs; wall-clock timing goes to a separate log.

Exit codes: 0 success, 2 configuration error, 3 IO error, 4 numeric
failure, 5 artifact/format mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .dataio import (SynthConfig, load_dataset, load_segment_arrays,
                     read_manifest, read_segment, summarize_manifest,
                     synth_generate)
from .errors import (ConfigError, DataError, FormatError, GeometryError,
                     MetricError, NumericError, ShapeError, UsageError)
from .evalkit import (DEFAULT_VARIANTS, ablate, ablation_table, bootstrap_ci,
                      evaluate, predict, read_predictions, write_predictions)
from .explain import GradCamConfig, emit_segment_cams
from .gradcheck import run_suite
from .model import BranchMask, Detector, DetectorConfig
from .training import (FocalLossConfig, TrainConfig, UnfreezeSchedule,
                       train_loop)

# Flat run configuration. Model geometry and the training recipe mirror
# the library defaults, except lr: the library default suits fine-tuning
# a warm-started model, while `forgeflow train` always starts from
# scratch and needs a from-scratch rate to move at all within 15 epochs.
# List-valued keys stay lists in JSON.
RUN_DEFAULTS = {
    # model
    "d": 64,
    "head_hidden": 64,
    "head_dropout": 0.3,
    "rgb_depths": [1, 1, 2],
    "rgb_dims": [16, 32, 64],
    "tex_embed_dim": 24,
    "tex_depths": [1, 1],
    "tex_heads": [2, 4],
    "tex_window": 4,
    "tex_patch": 4,
    "freq_channels": [8, 16, 32],
    # training
    "epochs": 15,
    "batch_size": 4,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "focal_alpha": 1.0,
    "focal_gamma": 2.0,
    "stage2_epoch": 4,
    "stage1_epoch": 7,
    "full_epoch": 9,
    "threshold": 0.5,
    # data synthesis
    "side": 32,
    "k_frames": 4,
    "n_fake_train": 245,
    "n_real_train": 35,
    "n_fake_val": 70,
    "n_real_val": 10,
    "identities_train": 20,
    "identities_val": 6,
    "mix_texture": 1 / 3,
    "mix_frequency": 1 / 3,
    "mix_color": 1 / 3,
    # plumbing
    "seed": 0,
    "data_dir": "",
    "out_dir": "",
}


def resolve_config(path, overrides) -> dict:
    """Defaults <- config file <- --set flags, with unknown keys rejected
    and value types checked against the defaults."""
    cfg = dict(RUN_DEFAULTS)
    layers = []
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        layers.append((path, loaded))
    if overrides:
        layers.append(("--set", overrides))
    for where, layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigError(f"{where}: unknown config keys {unknown}")
        for key, value in layer.items():
            cfg[key] = _coerce(where, key, value, cfg[key])
    return cfg


def _coerce(where, key, value, default):
    if isinstance(default, bool):
        want: tuple = (bool,)
    elif isinstance(default, int):
        want = (int,)
    elif isinstance(default, float):
        want = (int, float)
    elif isinstance(default, str):
        want = (str,)
    else:
        want = (list, tuple)
    if not isinstance(value, want) or isinstance(value, bool) != \
            isinstance(default, bool):
        raise ConfigError(f"{where}: key {key!r} expects "
                          f"{type(default).__name__}, got {value!r}")
    return float(value) if isinstance(default, float) else value


def parse_set_flags(pairs) -> dict:
    """Each --set argument is key=value with a JSON value; bare words
    fall back to strings so paths do not need quoting."""
    out = {}
    for pair in pairs or []:
        key, eq, raw = pair.partition("=")
        if not eq or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def synth_config_from(cfg: dict) -> SynthConfig:
    return SynthConfig(
        n_fake_train=cfg["n_fake_train"], n_real_train=cfg["n_real_train"],
        n_fake_val=cfg["n_fake_val"], n_real_val=cfg["n_real_val"],
        side=cfg["side"], k_frames=cfg["k_frames"],
        master_seed=cfg["seed"],
        mix={"texture": cfg["mix_texture"], "frequency": cfg["mix_frequency"],
             "color": cfg["mix_color"]},
        identities_train=cfg["identities_train"],
        identities_val=cfg["identities_val"])


def detector_config_from(cfg: dict) -> DetectorConfig:
    from .backbones import (FreqBranchConfig, MiniConvNeXtConfig,
                            MiniSwinConfig)
    return DetectorConfig(
        d=cfg["d"], head_hidden=cfg["head_hidden"],
        head_dropout=cfg["head_dropout"],
        rgb=MiniConvNeXtConfig(depths=tuple(cfg["rgb_depths"]),
                               dims=tuple(cfg["rgb_dims"])),
        tex=MiniSwinConfig(embed_dim=cfg["tex_embed_dim"],
                           depths=tuple(cfg["tex_depths"]),
                           heads=tuple(cfg["tex_heads"]),
                           window=cfg["tex_window"],
                           patch=cfg["tex_patch"]),
        freq=FreqBranchConfig(channels=tuple(cfg["freq_channels"])))


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        weight_decay=cfg["weight_decay"], seed=cfg["seed"],
        focal=FocalLossConfig(alpha=cfg["focal_alpha"],
                              gamma=cfg["focal_gamma"]),
        schedule=UnfreezeSchedule(stage2_epoch=cfg["stage2_epoch"],
                                  stage1_epoch=cfg["stage1_epoch"],
                                  full_epoch=cfg["full_epoch"]))


def write_json(path, obj) -> None:
    """Canonical JSON: sorted keys, fixed separators, trailing newline.
    Re-running a deterministic command rewrites the same bytes."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, separators=(",", ": "))
        fh.write("\n")


def _ensure_out_dir(out_dir):
    if not out_dir:
        raise ConfigError("an output directory is required (--out)")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output dir {out_dir}: {exc}") from None
    if not os.path.isdir(out_dir):
        raise OSError(f"output path {out_dir} is not a directory")
    return out_dir


def _manifest_path(data_dir):
    if not data_dir:
        raise ConfigError("a dataset directory is required (--data)")
    path = os.path.join(data_dir, "manifest.jsonl")
    if not os.path.exists(path):
        raise OSError(f"no manifest.jsonl under {data_dir}")
    return path


def _load_model(checkpoint_path):
    """Rebuild a Detector from checkpoint geometry metadata."""
    from .checkpoint import load_checkpoint
    if not checkpoint_path or not os.path.exists(checkpoint_path):
        raise FormatError(f"checkpoint missing: {checkpoint_path!r}")
    state, meta = load_checkpoint(checkpoint_path)
    if "model" not in meta:
        raise FormatError(f"{checkpoint_path}: no model geometry in "
                          f"metadata; cannot rebuild the network")
    model = Detector(DetectorConfig.from_meta(meta["model"]), seed=0)
    model.load_state_dict(state)
    model.eval()
    return model, meta


def cmd_synth(args) -> int:
    cfg = resolve_config(args.config, parse_set_flags(args.set))
    if args.out:
        cfg["out_dir"] = args.out
    out_dir = _ensure_out_dir(cfg["out_dir"])
    entries = synth_generate(synth_config_from(cfg), out_dir)
    write_json(os.path.join(out_dir, "resolved_config.json"), cfg)
    summary = summarize_manifest(entries)
    for split in sorted(summary):
        s = summary[split]
        fams = ", ".join(f"{k}={v}" for k, v in sorted(s["families"].items()))
        print(f"{split}: fake={s['fake']} real={s['real']} ({fams})")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args.config, parse_set_flags(args.set))
    if args.data:
        cfg["data_dir"] = args.data
    if args.out:
        cfg["out_dir"] = args.out
    out_dir = _ensure_out_dir(cfg["out_dir"])
    manifest = _manifest_path(cfg["data_dir"])
    train_data = load_dataset(manifest, "train")
    val_data = load_dataset(manifest, "val")

    model = Detector(detector_config_from(cfg), seed=cfg["seed"])
    result = train_loop(model, train_data, val_data, train_config_from(cfg),
                        out_dir=out_dir)

    write_json(os.path.join(out_dir, "resolved_config.json"), cfg)
    with open(os.path.join(out_dir, "epoch_records.jsonl"), "w") as fh:
        for rec in result.records:
            fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "loss_curve.csv"), "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for rec in result.records:
            fh.write(f"{rec.epoch},{rec.train_loss:.6f},"
                     f"{rec.val_loss:.6f}\n")
    report = evaluate(result.final_predictions, cfg["threshold"],
                      with_ci=True)
    final = {"best_epoch": result.best_epoch,
             "best_val_auc": result.best_auc,
             "final": report.as_dict()}
    write_json(os.path.join(out_dir, "final_report.json"), final)
    write_predictions(os.path.join(out_dir, "val_predictions.jsonl"),
                      result.final_predictions)
    with open(os.path.join(out_dir, "train_log.txt"), "w") as fh:
        fh.write(f"wall_seconds={result.wall_seconds:.2f}\n")
    print(f"best epoch {result.best_epoch}  val auc {result.best_auc:.4f}")
    print(report.as_text())
    return 0


def cmd_eval(args) -> int:
    model, _ = _load_model(args.checkpoint)
    manifest = _manifest_path(args.data)
    data = load_dataset(manifest, args.split)
    mask = BranchMask.from_names(args.mask) if args.mask else None
    records = predict(model, data, mask)
    report = evaluate(records, args.threshold, with_ci=args.ci)
    print(json.dumps(report.as_dict(), sort_keys=True, indent=2))
    if args.out:
        write_predictions(args.out, records)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args.config, parse_set_flags(args.set))
    if args.data:
        cfg["data_dir"] = args.data
    if args.out:
        cfg["out_dir"] = args.out
    out_dir = _ensure_out_dir(cfg["out_dir"])
    manifest = _manifest_path(cfg["data_dir"])
    train_data = load_dataset(manifest, "train")
    val_data = load_dataset(manifest, "val")
    variants = tuple(args.variants.split(";")) if args.variants \
        else DEFAULT_VARIANTS

    state = None
    if args.mode == "mask":
        model, _ = _load_model(args.checkpoint)
        state = model.state_dict()
        model_cfg = model.cfg
    else:
        model_cfg = detector_config_from(cfg)
    rows = ablate(model_cfg, train_data, val_data, variants=variants,
                  mode=args.mode, seed=cfg["seed"],
                  train_cfg=train_config_from(cfg), state=state,
                  threshold=cfg["threshold"])
    write_json(os.path.join(out_dir, "resolved_config.json"), cfg)
    table = ablation_table(rows)
    write_json(os.path.join(out_dir, "ablation_report.json"),
               [{"variant": r.variant, "epoch": r.epoch,
                 "report": r.report.as_dict()} for r in rows])
    with open(os.path.join(out_dir, "ablation_table.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def cmd_gradcam(args) -> int:
    model, _ = _load_model(args.checkpoint)
    manifest = _manifest_path(args.data)
    entries = read_manifest(manifest)
    base = os.path.dirname(os.path.abspath(manifest))
    wanted = set(args.ids.split(",")) if args.ids else None
    chosen = []
    for e in entries:
        if wanted is not None and e.segment_id not in wanted:
            continue
        if wanted is None:
            if e.split != args.split or not e.label:
                continue
            if args.family and e.artifact_kind != args.family:
                continue
        chosen.append(e)
        if wanted is None and args.limit and len(chosen) >= args.limit:
            break
    if not chosen:
        raise DataError("no segments match the gradcam selection")
    missing = wanted - {e.segment_id for e in chosen} if wanted else set()
    if missing:
        raise DataError(f"segment ids not in manifest: {sorted(missing)}")

    out_dir = _ensure_out_dir(args.out)
    cam_cfg = GradCamConfig(overlay_alpha=args.alpha)
    count = 0
    for e in chosen:
        full = e.path if os.path.isabs(e.path) else os.path.join(base, e.path)
        raw = read_segment(full)
        frames, maps = load_segment_arrays(full)
        paths = emit_segment_cams(model, e.segment_id, frames, maps, raw,
                                  out_dir, cam_cfg)
        count += len(paths)
    print(f"wrote {count} overlays for {len(chosen)} segments to {out_dir}")
    return 0


def cmd_ci(args) -> int:
    if not os.path.exists(args.predictions):
        raise OSError(f"predictions file missing: {args.predictions}")
    records = read_predictions(args.predictions)
    lo, hi = bootstrap_ci(records, metric=args.metric, n=args.n,
                          seed=args.seed, threshold=args.threshold)
    point = evaluate(records, args.threshold)
    value = getattr(point, args.metric)
    print(json.dumps({"metric": args.metric, "point": value,
                      "lower": lo, "upper": hi,
                      "n_resamples": args.n, "seed": args.seed},
                     sort_keys=True, indent=2))
    return 0


def cmd_gradcheck(args) -> int:
    ok, rows = run_suite()
    for name, worst, tol, passed in rows:
        print(f"{name:<22s} max rel err {worst:.3g}  (tol {tol:g})  "
              f"{'ok' if passed else 'FAIL'}")
    if not ok:
        raise NumericError("gradient self-check failed")
    print("all gradient checks passed")
    return 0


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON config file (flat keys)")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key; repeatable; wins over "
                          "the file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="forgeflow",
        description="tri-branch video forgery detection pipeline")
    cmds = p.add_subparsers(dest="command", required=True)

    s = cmds.add_parser("synth", help="generate a synthetic dataset")
    _add_config_flags(s)
    s.add_argument("--out", help="dataset output directory")
    s.set_defaults(func=cmd_synth)

    s = cmds.add_parser("train", help="train the detector")
    _add_config_flags(s)
    s.add_argument("--data", help="dataset directory (with manifest.jsonl)")
    s.add_argument("--out", help="run output directory")
    s.set_defaults(func=cmd_train)

    s = cmds.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--mask", help="comma list of branches to keep on")
    s.add_argument("--ci", action="store_true",
                   help="add bootstrap confidence intervals")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", help="also write per-segment predictions here")
    s.set_defaults(func=cmd_eval)

    s = cmds.add_parser("ablate", help="branch-subset comparison")
    _add_config_flags(s)
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--out", help="report output directory")
    s.add_argument("--mode", choices=("mask", "retrain"), default="mask")
    s.add_argument("--checkpoint", help="trained model (mask mode)")
    s.add_argument("--variants",
                   help="semicolon-separated branch lists, e.g. "
                        "'rgb;rgb,freq;rgb,tex,freq'")
    s.set_defaults(func=cmd_ablate)

    s = cmds.add_parser("gradcam", help="write class-activation overlays")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ids", help="comma list of segment ids")
    s.add_argument("--split", default="val")
    s.add_argument("--family", help="restrict to one artifact family")
    s.add_argument("--limit", type=int, default=8)
    s.add_argument("--alpha", type=float, default=0.5)
    s.set_defaults(func=cmd_gradcam)

    s = cmds.add_parser("ci", help="bootstrap CI over a predictions file")
    s.add_argument("--predictions", required=True)
    s.add_argument("--metric", default="auc",
                   choices=("auc", "f1", "accuracy"))
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_ci)

    s = cmds.add_parser("gradcheck", help="autodiff self-test")
    s.set_defaults(func=cmd_gradcheck)
    return p


# exception class -> exit code; first match wins, so subclasses go first
_EXIT_CODES = (
    (ConfigError, 2),
    (GeometryError, 2),
    (NumericError, 4),
    (FormatError, 5),
    (ShapeError, 5),
    (DataError, 5),
    (MetricError, 5),
    (UsageError, 2),
    (OSError, 3),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(c for c, _ in _EXIT_CODES) as exc:
        for cls, code in _EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise  # unreachable


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
