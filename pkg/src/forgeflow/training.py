"""Focal loss, decoupled-decay Adam, the progressive unfreezing schedule and
the epoch loop.

Schedule semantics: epochs 1-3 train only the projections, fusion head and
classifier; the final backbone stages join at `stage2_epoch` (default 4),
where the learning rate is halved once; middle stages join at `stage1_epoch`
(7); everything is trainable from `full_epoch` (9). The trainable set is a
pure function of the epoch index, so applying it twice is harmless and
resuming mid-run reproduces the same phase.

Everything random in an epoch (batch order, dropout masks) derives from the
master seed plus the epoch index, so two runs with the same seed produce
bitwise-identical records.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, NumericError, UsageError
from .evalkit import evaluate, predict
from .model import BranchMask, build_registry, reseed_dropout
from .prng import derive_seed
from .tensor import GradientTape, Tensor


@dataclass
class FocalLossConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigError(f"clamp_eps must be in (0, 0.5), got "
                              f"{self.clamp_eps}")


def focal_loss(prob: Tensor, labels, cfg: FocalLossConfig | None = None) -> Tensor:
    """Mean of -alpha * (1 - p_t)^gamma * log(p_t) over the batch."""
    cfg = cfg or FocalLossConfig()
    y = np.asarray(labels, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError(f"labels must be 0 or 1, got {sorted(set(y.ravel()))}")
    y_t = Tensor(y)
    p = T.clip(prob, cfg.clamp_eps, 1.0 - cfg.clamp_eps)
    # p_t = p for fakes, 1-p for reals
    pt = p * y_t + (T.add_scalar(T.neg(p), 1.0)) * Tensor(1.0 - y)
    focus = T.pow_const(T.add_scalar(T.neg(pt), 1.0), cfg.gamma)
    losses = T.neg(focus * T.log(pt))
    return T.scale(T.tmean(losses), cfg.alpha)


class AdamW:
    """Bias-corrected Adam with decoupled weight decay over a ParamRegistry.

    Decay multiplies the parameter by (1 - lr*wd) before the moment update
    and skips entries flagged no_decay (norm scales/shifts and biases).
    Stepping a trainable parameter that has no gradient is treated as a bug
    in the caller's freeze bookkeeping and raises.
    """

    def __init__(self, registry, lr: float = 2e-5, weight_decay: float = 1e-4,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.registry = registry
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._moments: dict = {}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for e in self.registry.trainable_entries():
            g = e.tensor.grad
            if g is None:
                raise UsageError(f"optimizer integrity: trainable parameter "
                                 f"{e.name!r} has no gradient")
            if e.name not in self._moments:
                self._moments[e.name] = (np.zeros_like(e.tensor.data),
                                         np.zeros_like(e.tensor.data))
            m, v = self._moments[e.name]
            g = g.astype(e.tensor.data.dtype, copy=False)
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            if not e.no_decay and self.weight_decay:
                e.tensor.data *= 1.0 - self.lr * self.weight_decay
            e.tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def zero_grad(self) -> None:
        for e in self.registry:
            e.tensor.grad = None


@dataclass
class UnfreezeSchedule:
    stage2_epoch: int = 4
    stage1_epoch: int = 7
    full_epoch: int = 9
    lr_decay_on_first_unfreeze: float = 0.5

    def __post_init__(self):
        if not 1 <= self.stage2_epoch < self.stage1_epoch < self.full_epoch:
            raise ConfigError(f"unfreeze epochs must satisfy 1 <= stage2 < "
                              f"stage1 < full, got {self.stage2_epoch}/"
                              f"{self.stage1_epoch}/{self.full_epoch}")

    def groups_for_epoch(self, epoch: int) -> set:
        if epoch < 1:
            raise ConfigError(f"epoch index starts at 1, got {epoch}")
        groups = {"projection", "classifier", "head"}
        if epoch >= self.stage2_epoch:
            groups.add("backbone_last")
        if epoch >= self.stage1_epoch:
            groups.add("backbone_mid")
        if epoch >= self.full_epoch:
            groups.add("backbone_early")
        return groups

    def lr_for_epoch(self, base_lr: float, epoch: int) -> float:
        # halved once when the first backbone stage unfreezes, never again
        if epoch >= self.stage2_epoch:
            return base_lr * self.lr_decay_on_first_unfreeze
        return base_lr


def apply_unfreeze(schedule: UnfreezeSchedule, registry, epoch: int,
                   base_lr: float):
    """Set per-parameter trainability for this epoch; returns the active
    group set and the learning rate."""
    groups = schedule.groups_for_epoch(epoch)
    registry.set_trainable(groups)
    return groups, schedule.lr_for_epoch(base_lr, epoch)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    lr: float = 2e-5
    weight_decay: float = 1e-4
    seed: int = 0
    focal: FocalLossConfig = field(default_factory=FocalLossConfig)
    schedule: UnfreezeSchedule = field(default_factory=UnfreezeSchedule)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float
    val_f1: float
    val_accuracy: float
    active_groups: list
    lr: float

    def as_dict(self) -> dict:
        return {"epoch": self.epoch, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "val_auc": self.val_auc,
                "val_f1": self.val_f1, "val_accuracy": self.val_accuracy,
                "active_groups": self.active_groups, "lr": self.lr}


@dataclass
class TrainResult:
    records: list
    best_epoch: int
    best_auc: float
    best_state: dict
    final_predictions: list
    wall_seconds: float


def _batches(data, order, batch_size):
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        chunk = [data[i] for i in idx]
        frames = np.stack([c[1] for c in chunk])
        maps = np.stack([c[2] for c in chunk])
        labels = np.array([c[3] for c in chunk], dtype=np.float64)
        yield chunk, frames, maps, labels


def train_loop(model, train_data, val_data, cfg: TrainConfig | None = None,
               mask: BranchMask | None = None, out_dir=None,
               registry=None) -> TrainResult:
    """Run the full schedule; returns per-epoch records plus the best-AUC
    snapshot. With `out_dir` set, writes one checkpoint per epoch and links
    best.ffck to the best-AUC epoch."""
    cfg = cfg or TrainConfig()
    train_data = list(train_data)
    val_data = list(val_data)
    if not train_data or not val_data:
        raise DataError("train and validation sets must both be nonempty")
    registry = registry or build_registry(model)
    if mask is not None:
        registry.lock_branches(mask)
    opt = AdamW(registry, lr=cfg.lr, weight_decay=cfg.weight_decay)
    records = []
    best_auc = -1.0
    best_epoch = 0
    best_state: dict = {}
    t0 = time.monotonic()
    for epoch in range(1, cfg.epochs + 1):
        groups, lr = apply_unfreeze(cfg.schedule, registry, epoch, cfg.lr)
        opt.lr = lr
        reseed_dropout(model, derive_seed(cfg.seed, f"dropout-epoch-{epoch}"))
        order = np.random.default_rng(
            derive_seed(cfg.seed, f"batch-order-{epoch}")
        ).permutation(len(train_data))
        model.train()
        loss_sum = 0.0
        for chunk, frames, maps, labels in _batches(train_data, order,
                                                    cfg.batch_size):
            with GradientTape() as tape:
                out = model.forward_segment(frames, maps, mask)
                if not np.isfinite(out.prob.data).all():
                    ids = ", ".join(c[0] for c in chunk)
                    raise NumericError(f"non-finite probabilities at epoch "
                                       f"{epoch} on batch [{ids}]")
                loss = focal_loss(out.prob, labels, cfg.focal)
            lval = loss.item()
            if not np.isfinite(lval):
                ids = ", ".join(c[0] for c in chunk)
                raise NumericError(f"non-finite loss {lval} at epoch {epoch} "
                                   f"on batch [{ids}]")
            tape.backward(loss)
            opt.step()
            loss_sum += lval * len(chunk)
        train_loss = loss_sum / len(train_data)

        model.eval()
        val_records, val_loss = _validate(model, val_data, cfg, mask)
        report = evaluate(val_records)
        records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            val_auc=report.auc, val_f1=report.f1,
            val_accuracy=report.accuracy,
            active_groups=sorted(groups), lr=lr))
        if report.auc > best_auc:
            best_auc = report.auc
            best_epoch = epoch
            best_state = model.state_dict()
        if out_dir is not None:
            _write_epoch_checkpoint(model, cfg, out_dir, epoch, lr, groups,
                                    mask)
    wall = time.monotonic() - t0
    if out_dir is not None:
        link = os.path.join(out_dir, "best.ffck")
        if os.path.lexists(link):
            os.remove(link)
        os.symlink(f"epoch_{best_epoch:03d}.ffck", link)
    model.eval()
    final_predictions, _ = _validate(model, val_data, cfg, mask)
    return TrainResult(records=records, best_epoch=best_epoch,
                       best_auc=best_auc, best_state=best_state,
                       final_predictions=final_predictions,
                       wall_seconds=wall)


def _validate(model, val_data, cfg, mask):
    preds = predict(model, val_data, mask, batch_size=max(cfg.batch_size, 8))
    labels = np.array([r.label for r in preds], dtype=np.float64)
    probs = Tensor(np.array([r.prob for r in preds]))
    loss = focal_loss(probs, labels, cfg.focal).item()
    return preds, loss


def _write_epoch_checkpoint(model, cfg, out_dir, epoch, lr, groups, mask):
    meta = {
        "epoch": epoch,
        "lr": lr,
        "base_lr": cfg.lr,
        "schedule": {"stage2_epoch": cfg.schedule.stage2_epoch,
                     "stage1_epoch": cfg.schedule.stage1_epoch,
                     "full_epoch": cfg.schedule.full_epoch,
                     "active_groups": sorted(groups)},
        "rng": {"master_seed": cfg.seed, "epoch": epoch},
        "mask": list(mask.flags) if mask is not None else [True, True, True],
        "model": model.cfg.as_meta(),
    }
    path = os.path.join(out_dir, f"epoch_{epoch:03d}.ffck")
    save_checkpoint(path, model.state_dict(), meta)
