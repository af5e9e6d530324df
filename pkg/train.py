"""
Training loop: cross-entropy loss, SGD with momentum and per-epoch metrics.

Forward passes in training mode see the quantized weights gamma * W_q; the
optimizer updates the 32-bit masters those are derived from.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import astuple, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from data import AugmentConfig, Dataset, batches, num_batches
from errors import NonFiniteError, ShapeError, TrainingDiverged
from models import Model
from tensor import Prng, Tensor, add, backward, log, mean, mul, no_grad, scale
from tensor import sum as tensor_sum

logger = logging.getLogger(__name__)

CROSS_ENTROPY_EPS = 1e-9
METRICS_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "epoch_time_s")

# Epoch budgets of the full-scale runs, keyed by (model family, augmentation on).
REFERENCE_EPOCHS = {
    ("FCNN", False): 200,
    ("CVNN", False): 200,
    ("FCNN", True): 1000,
    ("CVNN", True): 1000,
    ("VIT", False): 300,
    ("VIT", True): 2000,
}


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(0.001, gt=0)
    momentum: float = Field(0.92, ge=0, lt=1)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(1, ge=1)
    augment: bool = False
    seed: int = 0
    record_epoch_time: bool = False


@dataclass
class OptState:
    velocities: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptState":
        return cls([np.zeros_like(p.data) for p in params])


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    epoch_time_s: float = 0.0

    def csv_fields(self) -> List[str]:
        epoch, *values = astuple(self)
        return [str(epoch)] + [f"{v:.8f}" for v in values]


def cross_entropy(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of -sum(y * log(p + eps))."""
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction shape {pred.shape} != target shape {target.shape}")
    log_probs = log(add(pred, CROSS_ENTROPY_EPS))
    return scale(mean(tensor_sum(mul(target, log_probs), axis=-1)), -1.0)


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptState,
                      lr: float, mu: float = 0.92) -> None:
    """Heavy-ball update in place: v = mu * v + g, w = w - lr * v."""
    if not state.velocities:
        state.velocities = [np.zeros_like(p.data) for p in params]
    if not len(params) == len(grads) == len(state.velocities):
        raise ShapeError(f"{len(params)} parameters, {len(grads)} gradients, {len(state.velocities)} velocities")
    for p, g, v in zip(params, grads, state.velocities):
        if not p.shape == np.shape(g) == v.shape:
            raise ShapeError(f"Parameter {p.shape}, gradient {np.shape(g)} and velocity {v.shape} disagree")
        v *= mu
        v += g
        p.data -= (lr * v).astype(p.dtype)
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError("sgd_momentum_step")


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.92):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.state = OptState.for_params(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        sgd_momentum_step(self.params, grads, self.state, self.lr, self.momentum)


def _correct(pred: Tensor, target: Tensor) -> int:
    return int(np.count_nonzero(pred.data.argmax(axis=-1) == target.data.argmax(axis=-1)))


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> Tuple[float, float]:
    """Inference-mode (loss, accuracy) over a whole dataset; no graph is recorded."""
    if len(ds) == 0:
        raise ValueError(f"Cannot evaluate on an empty {ds.split} dataset")
    total_loss, correct = 0.0, 0
    with no_grad():
        for x, y in batches(ds, batch_size, shuffle=False):
            pred = model(x, training=False)
            total_loss += cross_entropy(pred, y).item() * len(x)
            correct += _correct(pred, y)
    return total_loss / len(ds), correct / len(ds)


def train_epoch(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
                optimizer: SGD, epoch: int) -> MetricsRow:
    """One pass over the shuffled training set followed by validation."""
    rng = Prng(cfg.seed)
    augment_cfg = AugmentConfig(enabled=True) if cfg.augment else None
    started = time.perf_counter()
    total_loss, correct = 0.0, 0
    for index, (x, y) in enumerate(batches(train_ds, cfg.batch_size, rng.substream("data"),
                                           shuffle=True, epoch=epoch, augment_cfg=augment_cfg)):
        try:
            optimizer.zero_grad()
            pred = model(x, training=True, rng=rng.substream("dropout", epoch, index))
            loss = cross_entropy(pred, y)
            backward(loss)
            optimizer.step()
        except NonFiniteError as e:
            raise TrainingDiverged(epoch, index, str(e)) from e
        total_loss += loss.item() * len(x)
        correct += _correct(pred, y)

    try:
        val_loss, val_acc = evaluate(model, val_ds, cfg.batch_size)
    except NonFiniteError as e:
        raise TrainingDiverged(epoch, index, f"validation after the last batch: {e}") from e
    elapsed = time.perf_counter() - started
    row = MetricsRow(
        epoch=epoch,
        train_loss=total_loss / len(train_ds),
        train_acc=correct / len(train_ds),
        val_loss=val_loss,
        val_acc=val_acc,
        epoch_time_s=elapsed if cfg.record_epoch_time else 0.0,
    )
    logger.info(
        f"epoch {epoch}: train_loss={row.train_loss:.4f} train_acc={row.train_acc:.4f} "
        f"val_loss={row.val_loss:.4f} val_acc={row.val_acc:.4f} ({elapsed:.1f}s)"
    )
    return row


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(row.csv_fields())
    return path


def read_metrics_csv(path) -> List[MetricsRow]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(r["epoch"]), *(float(r[name]) for name in METRICS_HEADER[1:])) for r in reader]


def fit(model: Model, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
        metrics_path: Optional[Path] = None) -> List[MetricsRow]:
    """Run ``cfg.epochs`` epochs; rewrites the metrics file after every epoch when a path is given."""
    reference = REFERENCE_EPOCHS.get((model.kind.family, cfg.augment))
    logger.info(f"Training {model} for {cfg.epochs} epochs (full-scale budget {reference}) on "
                f"{len(train_ds):,} images, {num_batches(len(train_ds), cfg.batch_size)} batches per epoch "
                f"(lr={cfg.lr}, momentum={cfg.momentum}, batch_size={cfg.batch_size}, augment={cfg.augment})")
    optimizer = SGD(model.parameters(), cfg.lr, cfg.momentum)
    rows: List[MetricsRow] = []
    for epoch in range(1, cfg.epochs + 1):
        rows.append(train_epoch(model, train_ds, val_ds, cfg, optimizer, epoch))
        if metrics_path is not None:
            write_metrics_csv(rows, metrics_path)
    return rows
