"""Baseline SGD training and the taboo-instrumented retraining loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import BatchPlan, Dataset, batches
from .model import Model
from .taboo import combined_loss, tighten, violation_counts

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    alarm_rate: float = 1e-2
    alarm_growth: float = 2.0
    lr_decay: float = 0.5
    plateau_window: int = 3
    min_improvement: float = 1e-3
    plateau_metric: str = "loss"
    margin: float = 0.0
    max_retrain_epochs: int = 60
    target_fpr: float = 0.01
    max_accuracy_drop: float = 0.005
    from_scratch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.alarm_growth <= 1:
            raise ValueError("alarm_growth must exceed 1")
        if not 0 < self.lr_decay < 1:
            raise ValueError("lr_decay must lie in (0, 1)")
        if self.plateau_window < 1:
            raise ValueError("plateau_window must be at least 1")
        if self.batch_size < 1 or self.epochs < 0 or self.max_retrain_epochs < 0:
            raise ValueError("batch_size, epochs and max_retrain_epochs must be non-negative")
        if self.plateau_metric not in ("loss", "fpr"):
            raise ValueError("plateau_metric must be 'loss' or 'fpr'")
        if not 0 <= self.margin < 0.5:
            raise ValueError("margin must lie in [0, 0.5)")
        if self.alarm_rate < 0 or self.lr < 0 or self.momentum < 0:
            raise ValueError("alarm_rate, lr and momentum must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc: float
    fpr: float | None
    alarm_rate: float
    lr: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "acc", "fpr", "lambda", "lr"])
        for r in self.records:
            fpr = "" if r.fpr is None else f"{r.fpr:.6f}"
            w.writerow([r.epoch, f"{r.loss:.6f}", f"{r.acc:.6f}", fpr, repr(r.alarm_rate), repr(r.lr)])
        return buf.getvalue()


def evaluate_clean(model: Model, ds: Dataset, key=None, batch_size: int = 1000):
    """(accuracy, detection rate) on clean data; the rate is None without a key."""
    hits, flagged = 0, 0
    for start in range(0, len(ds), batch_size):
        logits, acts = model.run(ds.images[start : start + batch_size], batch_size)
        hits += int((logits.argmax(axis=1) == ds.labels[start : start + batch_size]).sum())
        if key is not None:
            flagged += int((violation_counts(acts, key).sum(axis=1) > 0).sum())
    acc = hits / len(ds)
    return acc, (flagged / len(ds) if key is not None else None)


def train_epoch(model, ds, plan, epoch, lr, momentum, velocity, key=None, alarm_rate=0.0):
    """One pass of SGD.  Returns ``(model, velocity, mean loss)``."""
    total, count = 0.0, 0
    for images, labels in batches(ds, plan, epoch):
        g = T.Graph()
        x = g.input(images, requires_grad=False)
        logits, acts, _ = model.forward(g, x)
        if key is None or alarm_rate == 0:
            loss = T.softmax_cross_entropy(logits, labels)
        else:
            loss, _, _ = combined_loss(acts, logits, labels, key, alarm_rate)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} in epoch {epoch}")
        grads = T.backward(g, loss).by_name()
        params, velocity = T.sgd_step(model.params, grads, lr, momentum, velocity)
        model = model.with_params(params)
        total += value * len(labels)
        count += len(labels)
    return model, velocity, total / count


def train_baseline(model: Model, train: Dataset, val: Dataset, cfg: TrainConfig):
    """Plain cross-entropy SGD for ``cfg.epochs`` epochs."""
    plan = BatchPlan(cfg.batch_size, cfg.seed)
    tlog = TrainLog(config=asdict(cfg))
    velocity = None
    for epoch in range(1, cfg.epochs + 1):
        model, velocity, loss = train_epoch(model, train, plan, epoch, cfg.lr, cfg.momentum, velocity)
        acc, _ = evaluate_clean(model, val)
        tlog.append(EpochRecord(epoch, loss, acc, None, 0.0, cfg.lr))
        log.info("baseline epoch %d loss %.4f acc %.4f", epoch, loss, acc)
    return model, tlog


class AlarmSchedule:
    """Raise the alarm rate and cut the learning rate whenever the loss plateaus.

    Epoch losses are grouped into consecutive windows of ``window`` epochs.
    At the end of each window, if the best loss inside it does not beat the
    best loss before it by ``min_improvement`` (relative), the alarm rate is
    multiplied by ``growth`` and the learning rate by ``decay``.  The first
    window is compared against its own opening epoch.
    """

    def __init__(self, alarm_rate, lr, growth=2.0, decay=0.5, window=3, min_improvement=1e-3):
        self.alarm_rate = alarm_rate
        self.lr = lr
        self.growth = growth
        self.decay = decay
        self.window = window
        self.min_improvement = min_improvement
        self.history: list[float] = []
        self._best_before = math.inf

    def observe(self, loss: float) -> bool:
        self.history.append(loss)
        if len(self.history) % self.window:
            return False
        recent = self.history[-self.window :]
        ref = self._best_before
        if math.isinf(ref) and self.window > 1:
            ref, recent = recent[0], recent[1:]
        best = min(recent)
        self._best_before = min(self._best_before, *self.history[-self.window :])
        if best < ref * (1 - self.min_improvement):
            return False
        self.alarm_rate *= self.growth
        self.lr *= self.decay
        return True


@dataclass
class RetrainResult:
    model: Model
    log: TrainLog
    converged: bool
    best_epoch: int
    accuracy: float
    fpr: float
    updates: int = 0


def taboo_retrain(
    model: Model,
    train: Dataset,
    val: Dataset,
    key,
    cfg: TrainConfig,
    baseline_accuracy: float | None = None,
    init_seed: int | None = None,
) -> RetrainResult:
    """Retrain under the taboo penalty until the clean detection rate meets the target.

    ``val`` supplies the clean accuracy and detection rate monitored after
    every epoch.  An epoch is accuracy-acceptable when its accuracy is no
    more than ``cfg.max_accuracy_drop`` below ``baseline_accuracy``; the
    returned model is the acceptable one with the lowest detection rate.
    """
    if not key.bound:
        raise ValueError("retraining needs a bound key")
    base_acc, base_fpr = evaluate_clean(model, val, key)
    if baseline_accuracy is None:
        baseline_accuracy = base_acc
    floor = baseline_accuracy - cfg.max_accuracy_drop
    tlog = TrainLog(config={**asdict(cfg), "baseline_accuracy": baseline_accuracy})
    log.info("retrain start acc %.4f fpr %.4f", base_acc, base_fpr)

    if base_fpr <= cfg.target_fpr and base_acc >= floor:
        return RetrainResult(model, tlog, True, 0, base_acc, base_fpr)

    if cfg.from_scratch:
        seed = cfg.seed if init_seed is None else init_seed
        model = Model.initialize(model.layers, model.input_shape, seed)

    best = (model, 0, base_acc, base_fpr, base_acc >= floor)
    train_key = tighten(key, cfg.margin)
    schedule = AlarmSchedule(
        cfg.alarm_rate, cfg.lr, cfg.alarm_growth, cfg.lr_decay, cfg.plateau_window, cfg.min_improvement
    )
    plan = BatchPlan(cfg.batch_size, cfg.seed + 1)
    velocity = None
    updates = 0
    for epoch in range(1, cfg.max_retrain_epochs + 1):
        lam, lr = schedule.alarm_rate, schedule.lr
        model, velocity, loss = train_epoch(
            model, train, plan, epoch, lr, cfg.momentum, velocity, train_key, lam
        )
        updates += math.ceil(len(train) / cfg.batch_size)
        acc, fpr = evaluate_clean(model, val, key)
        tlog.append(EpochRecord(epoch, loss, acc, fpr, lam, lr))
        log.info("retrain epoch %d loss %.4f acc %.4f fpr %.4f lambda %g lr %g", epoch, loss, acc, fpr, lam, lr)

        ok = acc >= floor
        _, _, best_acc, best_fpr, best_ok = best
        if (ok, -fpr, acc) > (best_ok, -best_fpr, best_acc):
            best = (model, epoch, acc, fpr, ok)
        if ok and fpr <= cfg.target_fpr:
            break
        schedule.observe(loss if cfg.plateau_metric == "loss" else fpr)

    best_model, best_epoch, best_acc, best_fpr, _ = best
    converged = best_fpr <= cfg.target_fpr
    return RetrainResult(best_model, tlog, converged, best_epoch, best_acc, best_fpr, updates)
