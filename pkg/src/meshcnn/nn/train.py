"""Cross-validated mini-batch training with GMean-based model selection."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..data import compute_metrics, summarize
from .model import init_params, loss_and_grad, predict
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "fold", "train_loss", "val_acc", "val_sen", "val_spe", "val_gmean")


class EmptyFold(ValueError):
    pass


class SingleClassFold(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.05
    fc_l2: float = 5e-4
    epochs: int = 30
    seed: int = 0
    precision: str = "double"

    def __post_init__(self):
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be 'single' or 'double', got {self.precision!r}")
        for name in ("batch_size", "learning_rate", "adam_epsilon"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.weight_decay < 0 or self.fc_l2 < 0:
            raise ValueError("epochs, weight_decay and fc_l2 must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass
class FoldResult:
    fold: int
    params: object  # ModelParams at the selected epoch
    final_params: object
    selected_epoch: int
    selected_metrics: object
    final_metrics: object
    history: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)


def evaluate(spec, params, ops, signals, labels, positive_class=1):
    probs = predict(spec, params, ops, signals)
    return compute_metrics(probs.argmax(axis=1), labels, positive_class)


def train_fold(spec, config, ops, hier, dataset, fold, fold_index=0, positive_class=1):
    if fold.train.size == 0 or fold.test.size == 0:
        raise EmptyFold(f"fold {fold_index} has an empty train or test split")
    val_labels = dataset.labels[fold.test]
    if np.unique(val_labels).size < 2:
        raise SingleClassFold(f"fold {fold_index} validation split holds a single class")
    if np.unique(dataset.labels[fold.train]).size < 2:
        raise SingleClassFold(f"fold {fold_index} training split holds a single class")

    dtype = config.dtype
    x_train = dataset.signals[fold.train].astype(dtype)
    y_train = dataset.labels[fold.train]
    x_val = dataset.signals[fold.test].astype(dtype)

    params = init_params(spec, hier, seed=[config.seed, fold_index], dtype=dtype)
    state = AdamState()
    rng = np.random.default_rng([config.seed, fold_index, 1])

    init_metrics = evaluate(spec, params, ops, x_val, val_labels, positive_class)
    best = (-1.0, 0, params.copy(), init_metrics)
    history, seconds = [], []
    metrics = init_metrics
    n = x_train.shape[0]
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            loss, _, grads = loss_and_grad(spec, params, ops, x_train[idx], y_train[idx], fc_l2=config.fc_l2)
            adam_step(
                params.named(), grads, state,
                lr=config.learning_rate, beta1=config.adam_beta1, beta2=config.adam_beta2,
                eps=config.adam_epsilon, weight_decay=config.weight_decay,
            )
            total += loss * idx.size
        seconds.append(time.perf_counter() - t0)
        metrics = evaluate(spec, params, ops, x_val, val_labels, positive_class)
        history.append({
            "epoch": epoch,
            "fold": fold_index,
            "train_loss": total / n,
            "val_acc": metrics.acc,
            "val_sen": metrics.sen,
            "val_spe": metrics.spe,
            "val_gmean": metrics.gmean,
        })
        logger.debug("fold %d epoch %d loss %.5f gmean %.4f", fold_index, epoch, total / n, metrics.gmean)
        if metrics.gmean > best[0]:
            best = (metrics.gmean, epoch, params.copy(), metrics)
    return FoldResult(
        fold=fold_index,
        params=best[2],
        final_params=params,
        selected_epoch=best[1],
        selected_metrics=best[3],
        final_metrics=metrics,
        history=history,
        epoch_seconds=seconds,
    )


def train(spec, config, ops, hier, dataset, folds, positive_class=1):
    """Train one model per fold; returns ``(results, summary)``.

    ``summary`` holds the mean and sample SD of the selected-epoch
    validation metrics across folds.
    """
    if np.unique(dataset.labels).size < 2:
        raise SingleClassFold("dataset holds a single class")
    results = [
        train_fold(spec, config, ops, hier, dataset, fold, k, positive_class) for k, fold in enumerate(folds)
    ]
    return results, summarize([r.selected_metrics for r in results])


def history_rows(results):
    return [row for r in results for row in r.history]


def write_history(path, results):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for row in history_rows(results):
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in HISTORY_COLUMNS))
            fh.write("\n")
