"""Adam, reduce-on-plateau, early stopping, best-checkpoint tracking and the fit loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import ContractError, NumericalError
from .metrics import pixel_accuracy
from .network import NestedUNet, backward, forward, predict

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_acc", "lr")


# -- Adam -----------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update.

    Returns ``(new_params, new_state)``; inputs are not modified. Parameters
    without a gradient entry (inactive sub-network) are carried over as-is.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise ContractError(f"gradients for unknown parameters: {sorted(unknown)[:3]}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, m, v = dict(params), dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m_prev = m.get(name)
        v_prev = v.get(name)
        m_new = (1 - b1) * g if m_prev is None else b1 * m_prev + (1 - b1) * g
        v_new = (1 - b2) * g * g if v_prev is None else b2 * v_prev + (1 - b2) * g * g
        m[name], v[name] = m_new.astype(p.dtype, copy=False), v_new.astype(p.dtype, copy=False)
        update = state.lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + state.eps)
        new_params[name] = (p - update).astype(p.dtype, copy=False)
    return new_params, replace(state, t=t, m=m, v=v)


# -- learning-rate schedule ----------------------------------------------------------

@dataclass(frozen=True)
class PlateauScheduler:
    """Multiply ``lr`` by ``factor`` after ``patience`` epochs without improvement.

    "Improvement" means the monitored metric exceeds the best so far by more
    than ``min_delta``. The rate never drops below ``min_lr``.
    """

    lr: float = 1e-3
    patience: int = 3
    factor: float = 0.1
    min_lr: float = 1e-5
    min_delta: float = 1e-4
    best: float = -math.inf
    stale: int = 0


def scheduler_step(sched: PlateauScheduler, metric: float):
    if not math.isfinite(metric):
        raise ContractError(f"scheduler metric must be finite, got {metric}")
    if metric > sched.best + sched.min_delta:
        new = replace(sched, best=metric, stale=0)
    else:
        stale = sched.stale + 1
        if stale >= sched.patience:
            new = replace(sched, lr=max(sched.lr * sched.factor, sched.min_lr), stale=0)
        else:
            new = replace(sched, stale=stale)
    return new, new.lr


# -- early stopping and checkpoints ---------------------------------------------------

@dataclass(frozen=True)
class EarlyStop:
    threshold: float = 0.05
    last_metric: float | None = None


def early_stop_check(es: EarlyStop, accuracy: float):
    """Stop when this epoch improved on the previous one by less than ``threshold``."""
    stop = es.last_metric is not None and (accuracy - es.last_metric) < es.threshold
    return replace(es, last_metric=accuracy), stop


@dataclass(frozen=True)
class CheckpointRecord:
    best_metric: float = -math.inf
    epoch: int = 0
    params: dict | None = None
    buffers: dict | None = None


def checkpoint_update(rec: CheckpointRecord, epoch: int, val_metric: float,
                      params: dict, buffers: dict | None = None) -> CheckpointRecord:
    """Keep a copy of ``params`` if ``val_metric`` strictly beats the best so far."""
    if val_metric > rec.best_metric:
        return CheckpointRecord(
            val_metric, epoch,
            {k: v.copy() for k, v in params.items()},
            None if buffers is None else {k: v.copy() for k, v in buffers.items()},
        )
    return rec


# -- the training loop -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 400
    patience: int = 3
    factor: float = 0.1
    min_lr: float = 1e-5
    min_delta: float = 1e-4
    early_stop_threshold: float | None = 0.05  # None disables early stopping
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ContractError("max_epochs must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float


def supervision_loss(fp, target: np.ndarray):
    """Unweighted mean BCE over the active heads, with per-head gradients."""
    losses, grads = [], []
    for out in fp.outputs:
        loss, g = T.bce_loss(out, target)
        losses.append(loss)
        grads.append(g / len(fp.outputs))
    return float(np.mean(losses)), grads


def fit(model: NestedUNet, train_ds: Dataset, val_ds: Dataset,
        hp: TrainConfig | None = None, seed: int = 0):
    """Train ``model`` and return ``(best_model, history)``.

    Each epoch shuffles the training set, runs minibatch Adam on the
    deep-supervision loss, then measures validation pixel accuracy (final
    head, inference mode). That accuracy drives the plateau scheduler, early
    stopping and the best-parameter snapshot, which is what gets returned.
    """
    hp = hp or TrainConfig()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ContractError("training and validation sets must be non-empty")
    dtype = model.dtype
    x_train, y_train = train_ds.images(dtype), train_ds.masks(dtype)
    x_val, y_val = val_ds.images(dtype), val_ds.masks(dtype)
    rng = np.random.default_rng(seed)

    adam = AdamState(lr=hp.lr, beta1=hp.beta1, beta2=hp.beta2, eps=hp.adam_eps)
    sched = PlateauScheduler(lr=hp.lr, patience=hp.patience, factor=hp.factor,
                             min_lr=hp.min_lr, min_delta=hp.min_delta)
    stopper = EarlyStop(threshold=hp.early_stop_threshold or 0.0)
    record = CheckpointRecord()
    history: list[EpochRecord] = []

    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(len(x_train))
        loss_sum, correct, seen = 0.0, 0, 0
        for b, start in enumerate(range(0, len(order), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            x, y = x_train[idx], y_train[idx]
            fp = forward(model, x, "train")
            loss, head_grads = supervision_loss(fp, y)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch {b}, lr {adam.lr:g}")
            grads = backward(model, fp, head_grads)
            params, adam = adam_step(model.params, grads, adam)
            model = model.with_state(params, fp.buffers)
            loss_sum += loss * len(idx)
            correct += int(((fp.final >= 0.5) == (y > 0.5)).sum())
            seen += len(idx)
        train_loss = loss_sum / seen
        train_acc = correct / (seen * x_train[0].size)
        val_acc = pixel_accuracy(predict(model, x_val, hp.batch_size), y_val)
        history.append(EpochRecord(epoch, train_loss, train_acc, val_acc, adam.lr))
        log.debug("epoch %d loss %.5f train_acc %.4f val_acc %.4f lr %g",
                  epoch, train_loss, train_acc, val_acc, adam.lr)

        record = checkpoint_update(record, epoch, val_acc, model.params, model.buffers)
        sched, lr = scheduler_step(sched, val_acc)
        adam = replace(adam, lr=lr)
        if hp.early_stop_threshold is not None:
            stopper, stop = early_stop_check(stopper, val_acc)
            if stop:
                log.info("early stop at epoch %d (val_acc %.4f)", epoch, val_acc)
                break

    best = model.with_state(record.params, record.buffers)
    return best, history


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_acc:.6f}", f"{r.lr:.6f}"])
    return buf.getvalue()


def write_history_csv(history, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        f.write(history_csv(history))
