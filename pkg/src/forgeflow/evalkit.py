"""Metrics, bootstrap confidence intervals and the branch-ablation harness.

Conventions: label 1 ("fake") is the positive class; hard predictions use
prob >= threshold with threshold 0.5 by default. AUC is the Mann-Whitney
rank statistic with half credit for ties. Bootstrap resampling draws indices
from the portable SplitMix64 stream (see prng) so seed 42 reproduces the
same intervals on any implementation of that recurrence; percentiles use
linear interpolation. Resamples that contain a single class are redrawn, up
to 100 retries each, keeping exactly n effective samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateDataError, FormatError, MetricError
from .model import BranchMask
from .prng import SplitMix64
from .tensor import Tensor


@dataclass(frozen=True)
class PredictionRecord:
    segment_id: str
    label: int
    prob: float


def _split(records):
    if not records:
        raise MetricError("no prediction records")
    ids = [r.segment_id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate segment ids in prediction set")
    labels = np.array([r.label for r in records])
    probs = np.array([r.prob for r in records], dtype=np.float64)
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 (real) or 1 (fake)")
    if ((probs < 0) | (probs > 1)).any():
        raise DataError("probabilities must lie in [0, 1]")
    return labels, probs


def _accuracy_arrays(labels, probs, threshold):
    return float(((probs >= threshold).astype(int) == labels).mean())


def _auc_arrays(labels, probs, threshold=None):
    pos = probs[labels == 1]
    neg = probs[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("auc undefined: prediction set has a single class")
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (len(pos) * len(neg)))


def _f1_arrays(labels, probs, threshold):
    pred = (probs >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    if tp == 0:
        return 0.0  # covers "no predicted positives" and "no true positives"
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return float(2 * precision * recall / (precision + recall))


def accuracy(records, threshold: float = 0.5) -> float:
    labels, probs = _split(records)
    return _accuracy_arrays(labels, probs, threshold)


def auc(records) -> float:
    """Mann-Whitney statistic: P(score_fake > score_real) + 0.5 ties."""
    labels, probs = _split(records)
    return _auc_arrays(labels, probs)


def f1(records, threshold: float = 0.5) -> float:
    labels, probs = _split(records)
    return _f1_arrays(labels, probs, threshold)


_METRICS = {"auc": _auc_arrays, "f1": _f1_arrays,
            "accuracy": _accuracy_arrays}


def bootstrap_ci(records, metric: str = "auc", n: int = 1000, seed: int = 42,
                 lo: float = 2.5, hi: float = 97.5, threshold: float = 0.5):
    """Percentile bootstrap interval for one metric over the record set."""
    if metric not in _METRICS:
        raise MetricError(f"unknown metric {metric!r}; choose from "
                          f"{sorted(_METRICS)}")
    fn = _METRICS[metric]
    labels, probs = _split(records)
    if len(set(labels.tolist())) < 2:
        raise MetricError("bootstrap undefined: single-class prediction set")
    size = len(records)
    stream = SplitMix64(seed)
    values = []
    for _ in range(n):
        for attempt in range(101):
            if attempt == 100:
                raise DegenerateDataError(
                    "bootstrap: 100 successive single-class resamples; "
                    "dataset too small or too imbalanced")
            idx = np.array([stream.next_below(size) for _ in range(size)])
            picked = labels[idx]
            if picked.min() != picked.max():
                break
        values.append(fn(picked, probs[idx], threshold))
    lower, upper = np.percentile(values, [lo, hi], method="linear")
    return float(lower), float(upper)


@dataclass
class MetricReport:
    accuracy: float
    auc: float
    f1: float
    threshold: float
    n_real: int
    n_fake: int
    ci: dict = field(default_factory=dict)  # metric -> (lower, upper)

    def as_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "auc": self.auc, "f1": self.f1,
               "threshold": self.threshold, "n_real": self.n_real,
               "n_fake": self.n_fake}
        if self.ci:
            out["ci"] = {k: list(v) for k, v in self.ci.items()}
        return out

    def as_text(self) -> str:
        lines = [f"{'metric':<10} {'value':>8}" + ("  [2.5%, 97.5%]" if self.ci else ""),
                 "-" * (32 if self.ci else 19)]
        for name in ("auc", "f1", "accuracy"):
            row = f"{name:<10} {getattr(self, name):>8.4f}"
            if name in self.ci:
                lower, upper = self.ci[name]
                row += f"  [{lower:.4f}, {upper:.4f}]"
            lines.append(row)
        lines.append(f"{'n':<10} {self.n_real + self.n_fake:>8d}  "
                     f"({self.n_fake} fake / {self.n_real} real)")
        return "\n".join(lines)


def evaluate(records, threshold: float = 0.5, with_ci: bool = False,
             ci_n: int = 1000, ci_seed: int = 42) -> MetricReport:
    labels, _ = _split(records)
    report = MetricReport(accuracy=accuracy(records, threshold),
                          auc=auc(records), f1=f1(records, threshold),
                          threshold=threshold,
                          n_real=int((labels == 0).sum()),
                          n_fake=int((labels == 1).sum()))
    if with_ci:
        for m in ("auc", "f1"):
            report.ci[m] = bootstrap_ci(records, m, n=ci_n, seed=ci_seed)
    return report


def predict(model, data, mask: BranchMask | None = None,
            batch_size: int = 8) -> list:
    """Run the detector over (id, frames, freq_maps, label) segments."""
    model.eval()
    data = list(data)
    out = []
    for start in range(0, len(data), batch_size):
        chunk = data[start:start + batch_size]
        frames = Tensor(np.stack([c[1] for c in chunk]))
        maps = Tensor(np.stack([c[2] for c in chunk]))
        res = model.forward_segment(frames, maps, mask)
        for c, p in zip(chunk, res.prob.data):
            out.append(PredictionRecord(c[0], int(c[3]), float(p)))
    return out


def write_predictions(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.segment_id, "label": r.label,
                                 "prob": r.prob}) + "\n")


def read_predictions(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out.append(PredictionRecord(str(obj["id"]), int(obj["label"]),
                                            float(obj["prob"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: malformed prediction "
                                  f"line") from None
    _split(out)
    return out


DEFAULT_VARIANTS = ("rgb", "rgb,freq", "rgb,tex", "rgb,tex,freq")


@dataclass
class AblationRow:
    variant: str
    mask: BranchMask
    epoch: int
    report: MetricReport


def ablation_table(rows) -> str:
    lines = [f"{'variant':<14} {'epoch':>5} {'f1':>8} {'auc':>8}",
             "-" * 38]
    for r in rows:
        lines.append(f"{r.variant:<14} {r.epoch:>5d} {r.report.f1:>8.4f} "
                     f"{r.report.auc:>8.4f}")
    return "\n".join(lines)


def ablate(model_cfg, train_data, val_data, variants=DEFAULT_VARIANTS,
           mode: str = "mask", seed: int = 0, train_cfg=None,
           state: dict | None = None, threshold: float = 0.5) -> list:
    """Evaluate branch subsets, either by masking one trained model (`state`
    required) or by retraining each variant from scratch with identical
    seeds and schedule."""
    from .model import Detector  # deferred: avoids import cycle via training
    from .training import TrainConfig, train_loop

    if not variants:
        raise DataError("ablate: empty variant list")
    if mode not in ("mask", "retrain"):
        raise DataError(f"ablate: unknown mode {mode!r}")
    rows = []
    if mode == "mask":
        if state is None:
            raise DataError("ablate mask mode needs trained model state")
        model = Detector(model_cfg, seed=seed)
        model.load_state_dict(state)
        for names in variants:
            mask = BranchMask.from_names(names)
            records = predict(model, val_data, mask)
            rows.append(AblationRow(mask.short(), mask, 0,
                                    evaluate(records, threshold)))
        return rows
    train_cfg = train_cfg or TrainConfig()
    for names in variants:
        mask = BranchMask.from_names(names)
        model = Detector(model_cfg, seed=seed)
        result = train_loop(model, train_data, val_data, train_cfg, mask=mask)
        model.load_state_dict(result.best_state)
        records = predict(model, val_data, mask)
        rows.append(AblationRow(mask.short(), mask, result.best_epoch,
                                evaluate(records, threshold)))
    return rows
