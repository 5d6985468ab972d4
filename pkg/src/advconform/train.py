"""Minibatch gradient training, clean or adversarial.

Each step recomputes the single-step attack against the current parameters,
then descends the mean cross-entropy over the perturbed batch. With attack
strength 0 this is plain clean training. Plain gradient descent with a fixed
step size; no momentum or weight decay, so theory checks see the update rule
with no confounders.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .attack import AttackSpec, perturb_batch
from .dataio import LabeledDataset
from .model import Classifier, forward_batch, grad_params_batch, loss_batch
from .seeding import derive_rng

__all__ = ["TrainConfig", "TrainingDivergedError", "train", "accuracy"]

DIVERGENCE_LOSS_CAP = 1e6


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite or exceeded the divergence cap."""

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch}: loss {value!r}"
        )
        self.epoch = epoch
        self.batch = batch
        self.value = value


@dataclass(frozen=True)
class TrainConfig:
    """Epoch count, step size, batch size, training attack, and seed.

    ``attack.epsilon == 0`` gives clean training. ``batch_size >= n`` runs
    full-batch descent, the literal form of the training recipe.
    """

    epochs: int = 120
    lr: float = 0.5
    batch_size: int = 64
    attack: AttackSpec = AttackSpec("linf", 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train(
    model_init: Classifier,
    ds: LabeledDataset,
    train_idx,
    cfg: TrainConfig,
    log_path=None,
    batch_hook=None,
) -> Classifier:
    """Run adversarial (or clean) minibatch training and return the final model.

    Per epoch the sample order is reshuffled from a stream derived from
    (cfg.seed, epoch), so runs are reproducible and insensitive to other
    grid points. ``batch_hook(epoch, batch_indices, X_perturbed)`` is an
    instrumentation callback used by tests.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ValueError("empty training index list")
    X_all = ds.features[train_idx]
    y_all = ds.labels[train_idx]
    n = train_idx.size
    model = model_init
    log_rows = []
    for epoch in range(cfg.epochs):
        perm = derive_rng(cfg.seed, "epoch-shuffle", epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            Xb = perturb_batch(model, X_all[batch], y_all[batch], cfg.attack)
            if batch_hook is not None:
                batch_hook(epoch, train_idx[batch], Xb)
            losses = loss_batch(model, Xb, y_all[batch])
            batch_loss = float(losses.mean())
            if not np.isfinite(batch_loss) or batch_loss > DIVERGENCE_LOSS_CAP:
                raise TrainingDivergedError(epoch, start // cfg.batch_size, batch_loss)
            loss_sum += float(losses.sum())
            grads = grad_params_batch(model, Xb, y_all[batch])
            model = Classifier(
                weights=tuple(w - cfg.lr * dw for w, (dw, _) in zip(model.weights, grads)),
                biases=tuple(b - cfg.lr * db for b, (_, db) in zip(model.biases, grads)),
            )
        if log_path is not None:
            clean_acc = accuracy(model, ds, train_idx, AttackSpec(cfg.attack.norm, 0.0))
            log_rows.append((epoch, loss_sum / n, clean_acc))
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "loss", "clean_acc"])
            for epoch, mean_loss, clean_acc in log_rows:
                writer.writerow([epoch, repr(mean_loss), repr(clean_acc)])
    return model


def accuracy(
    model: Classifier, ds: LabeledDataset, idx, attack: AttackSpec
) -> float:
    """Top-1 accuracy under the given attack; argmax ties go to the lowest class."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index list")
    X = perturb_batch(model, ds.features[idx], ds.labels[idx], attack)
    probs = forward_batch(model, X)
    return float(np.mean(np.argmax(probs, axis=1) == ds.labels[idx]))
