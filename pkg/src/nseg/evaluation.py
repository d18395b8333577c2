"""K-fold cross-validation harness and metric reports."""
from __future__ import annotations

import json
import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence, Union

import numpy as np

from .data import DEFAULT_ROTATION, Dataset, augment_dataset
from .errors import ConfigurationError, LeakageError
from .metrics import dice_coefficient, pixel_accuracy
from .network import GraphConfig, build_graph, predict
from .training import TrainConfig, fit

AFTER_SPLIT = "augment-after-split"
PAPER_ORDER = "paper-order"


@dataclass(frozen=True)
class FoldPlan:
    K: int
    seed: int
    assignment: tuple[int, ...]

    @property
    def n(self) -> int:
        return len(self.assignment)

    def fold_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f == fold]

    def train_indices(self, fold: int) -> list[int]:
        return [i for i, f in enumerate(self.assignment) if f != fold]

    def sizes(self) -> list[int]:
        return [self.assignment.count(f) for f in range(self.K)]

    def to_json(self) -> str:
        return json.dumps({"K": self.K, "seed": self.seed, "assignment": list(self.assignment)})

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        obj = json.loads(text)
        return cls(int(obj["K"]), int(obj["seed"]), tuple(int(a) for a in obj["assignment"]))


def kfold_split(n: int, K: int, seed: int = 0) -> FoldPlan:
    """Seeded shuffle of ``0..n-1`` dealt round-robin into ``K`` folds."""
    if K < 2 or K > n:
        raise ConfigurationError(f"fold count must satisfy 2 <= K <= n, got K={K}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % K
    return FoldPlan(K, seed, tuple(int(a) for a in assignment))


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


class FoldSplit(NamedTuple):
    train: Dataset
    val: Dataset
    train_sources: list[int]  # original-dataset index behind every training sample
    val_indices: list[int]


def split_fold(dataset: Dataset, plan: FoldPlan, fold: int, order: str = AFTER_SPLIT,
               rotation: float = DEFAULT_ROTATION, seed: int = 0) -> FoldSplit:
    """Training/validation sets for one fold.

    With ``augment-after-split`` only the training part is augmented and the
    result is checked for leakage; ``paper-order`` expects ``dataset`` to be
    augmented already (plan built over the mixed set) and performs no check.
    """
    train_idx, val_idx = plan.train_indices(fold), plan.fold_indices(fold)
    if order == PAPER_ORDER:
        train = dataset.subset(train_idx, f"fold{fold}-train")
        sources = [train_idx[k] if s.origin is None else s.origin.source_index for k, s in enumerate(train)]
        return FoldSplit(train, dataset.subset(val_idx, f"fold{fold}-val"), sources, val_idx)
    if order != AFTER_SPLIT:
        raise ConfigurationError(f"unknown augmentation order {order!r}")
    train = augment_dataset(dataset.subset(train_idx), rotation, seed)
    sources = [train_idx[s.origin.source_index] if s.origin else train_idx[k] for k, s in enumerate(train)]
    leaked = set(sources) & set(val_idx)
    if leaked:
        raise LeakageError(f"fold {fold}: held-out samples {sorted(leaked)[:5]} reached the training set")
    return FoldSplit(train, dataset.subset(val_idx, f"fold{fold}-val"), sources, val_idx)


# -- training hooks ---------------------------------------------------------------

Predictor = Callable[[Dataset], np.ndarray]


@dataclass(frozen=True)
class NetworkTrainer:
    """Builds a fresh network per fold, fits it and returns its predictor."""

    config: GraphConfig = field(default_factory=GraphConfig)
    hyperparams: TrainConfig = field(default_factory=TrainConfig)

    def __call__(self, train: Dataset, val: Dataset, seed: int) -> Predictor:
        model = build_graph(self.config, seed)
        best, _ = fit(model, train, val, self.hyperparams, seed)
        return lambda ds: predict(best, ds.images(best.dtype), self.hyperparams.batch_size)


def oracle_trainer(train: Dataset, val: Dataset, seed: int) -> Predictor:
    """Predicts the ground-truth mask; checks the harness plumbing."""
    return lambda ds: ds.masks()


# -- reports ----------------------------------------------------------------------

class FoldResult(NamedTuple):
    fold: int
    accuracy: float
    dice: float


@dataclass
class MetricsReport:
    K: Union[int, str]
    rows: list[FoldResult]

    def _stats(self, values):
        mean = statistics.fmean(values)
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        return mean, std

    @property
    def accuracy(self) -> tuple[float, float]:
        """Mean and sample standard deviation of fold accuracies."""
        return self._stats([r.accuracy for r in self.rows])

    @property
    def dice(self) -> tuple[float, float]:
        return self._stats([r.dice for r in self.rows])

    def csv_rows(self, with_folds: bool = True) -> list[str]:
        lines = [f"{self.K},{r.fold},{r.accuracy:.6f},{r.dice:.6f}" for r in self.rows] if with_folds else []
        (am, asd), (dm, dsd) = self.accuracy, self.dice
        lines.append(f"{self.K},mean±std,{am:.6f}±{asd:.6f},{dm:.6f}±{dsd:.6f}")
        return lines


CSV_HEADER = "K,fold,accuracy,dice"


def report_csv(reports: Sequence[MetricsReport], with_folds: bool = True) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.extend(r.csv_rows(with_folds))
    return "\n".join(lines) + "\n"


def write_report_csv(reports, path: str | os.PathLike, with_folds: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(report_csv(reports, with_folds))


def score(predictor: Predictor, ds: Dataset) -> tuple[float, float]:
    prob = predictor(ds)
    mask = ds.masks()
    return pixel_accuracy(prob, mask), dice_coefficient(prob, mask)


def _run_fold(trainer, dataset, plan, fold, order, rotation, seed) -> FoldResult:
    fs = fold_seed(seed, fold)
    split = split_fold(dataset, plan, fold, order, rotation, fs)
    predictor = trainer(split.train, split.val, fs)
    acc, dice = score(predictor, split.val)
    return FoldResult(fold, acc, dice)


def cross_validate(config: GraphConfig, dataset: Dataset, K: int, seed: int = 0,
                   hyperparams: TrainConfig | None = None, *, order: str = AFTER_SPLIT,
                   rotation: float = DEFAULT_ROTATION, workers: int = 1,
                   trainer: Callable | None = None) -> MetricsReport:
    """Train on K-1 folds and score the held-out fold, for every fold.

    Each fold uses its own seed derived from ``(seed, fold)``, so running
    folds in parallel (``workers > 1``) gives the same rows as a serial run.
    """
    trainer = trainer or NetworkTrainer(config, hyperparams or TrainConfig())
    if order == PAPER_ORDER:
        dataset = augment_dataset(dataset, rotation, seed)
    if len(dataset) < K:
        raise ConfigurationError(f"dataset of {len(dataset)} samples cannot be split into {K} folds")
    plan = kfold_split(len(dataset), K, seed)
    args = [(trainer, dataset, plan, f, order, rotation, seed) for f in range(K)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_fold, *zip(*args)))
    else:
        rows = [_run_fold(*a) for a in args]
    return MetricsReport(K, rows)


def k_sweep(config: GraphConfig, dataset: Dataset, ks: Sequence[int], seed: int = 0,
            hyperparams: TrainConfig | None = None, **kwargs) -> list[MetricsReport]:
    """Repeat :func:`cross_validate` for each fold count."""
    return [cross_validate(config, dataset, k, seed, hyperparams, **kwargs) for k in ks]


def holdout_evaluate(config: GraphConfig, dataset: Dataset, seed: int = 0,
                     hyperparams: TrainConfig | None = None, *, fraction: float = 0.1,
                     rotation: float = DEFAULT_ROTATION, trainer: Callable | None = None) -> MetricsReport:
    """Single 90/10 split baseline (no fold rotation), reported under K="holdout"."""
    trainer = trainer or NetworkTrainer(config, hyperparams or TrainConfig())
    n = len(dataset)
    n_val = max(1, int(math.floor(n * fraction + 0.5)))
    if n_val >= n:
        raise ConfigurationError(f"dataset of {n} samples is too small for a holdout split")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.ones(n, dtype=int)
    assignment[perm[:n_val]] = 0
    plan = FoldPlan(2, seed, tuple(int(a) for a in assignment))
    row = _run_fold(trainer, dataset, plan, 0, AFTER_SPLIT, rotation, seed)
    return MetricsReport("holdout", [row])
