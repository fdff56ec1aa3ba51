"""Adam minibatch training for CNN sensors with validation-based early stopping."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.algorithm.cnn import backward_batch, predict
from src.config import LR_SWEEP_GRID, TRAINING_DEFAULTS
from src.core.numeric import make_rng
from src.errors import NumericalAbort, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    lr: float = TRAINING_DEFAULTS['lr']
    batch: int = TRAINING_DEFAULTS['batch']
    max_epochs: int = TRAINING_DEFAULTS['max_epochs']
    patience: int = TRAINING_DEFAULTS['patience']
    min_delta: float = TRAINING_DEFAULTS['min_delta']


class Adam:
    """Adam update rule over a list of parameter arrays"""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """Update params in place"""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mean_sse(model, images, labels, batch_size=64):
    """Per-sample mean of ||y_hat - y||^2"""
    y_hat = predict(model, images, batch_size)
    diff = y_hat - np.asarray(labels, dtype=np.float64).reshape(y_hat.shape)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def _run_epoch(model, params, optimizer, images, labels, order, batch):
    total = 0.0
    for start in range(0, len(order), batch):
        idx = order[start:start + batch]
        loss, grads = backward_batch(model, images[idx], labels[idx])
        if not np.isfinite(loss):
            raise NumericalAbort(f"training loss became non-finite at Adam step {optimizer.t + 1}")
        scale = 1.0 / len(idx)
        optimizer.step(params, [g * scale for g in grads])
        total += loss
    return total / len(order)


def train(model, images, labels, split, hyper, rng):
    """Train a copy of `model` with Adam and return (best_model, history DataFrame).

    `split` maps 'train' and 'val' to index arrays. The returned model carries
    the parameters of the epoch with the lowest validation SSE; training stops
    once validation SSE fails to improve by `min_delta` for `patience` epochs.
    """
    train_idx = np.asarray(split.get('train', []), dtype=np.int64)
    val_idx = np.asarray(split.get('val', []), dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValidationError("training needs non-empty train and validation splits")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(len(images), -1)

    model = model.with_parameters(model.parameters())
    params = model.parameters()
    optimizer = Adam(params, hyper.lr)

    best_val = np.inf
    best_params = [p.copy() for p in params]
    stale = 0
    rows = []
    for epoch in range(1, hyper.max_epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        train_sse = _run_epoch(model, params, optimizer, images, labels, order, hyper.batch)
        val_sse = mean_sse(model, images[val_idx], labels[val_idx])
        if not np.isfinite(val_sse):
            raise NumericalAbort(f"validation loss became non-finite at epoch {epoch}")
        rows.append({'epoch': epoch, 'train_sse': train_sse, 'val_sse': val_sse, 'lr': hyper.lr})
        logger.info(f"Epoch {epoch}: train SSE {train_sse:.6f}, val SSE {val_sse:.6f}")

        if val_sse < best_val - hyper.min_delta:
            best_val = val_sse
            best_params = [p.copy() for p in params]
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                logger.info(f"Early stop at epoch {epoch}; best val SSE {best_val:.6f}")
                break

    history = pd.DataFrame(rows, columns=['epoch', 'train_sse', 'val_sse', 'lr'])
    return model.with_parameters(best_params), history


def sweep_learning_rate(model, images, labels, split, hyper, seed, grid=None):
    """One epoch per candidate rate from identical initial parameters.

    Returns (best_lr, DataFrame[lr, train_sse]).
    """
    grid = list(grid or LR_SWEEP_GRID)
    train_idx = np.asarray(split['train'], dtype=np.int64)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).reshape(len(images), -1)
    rows = []
    for lr in grid:
        trial = model.with_parameters(model.parameters())
        params = trial.parameters()
        rng = make_rng(seed, 1)
        order = train_idx[rng.permutation(train_idx.size)]
        try:
            _run_epoch(trial, params, Adam(params, lr), images, labels, order, hyper.batch)
            sse = mean_sse(trial, images[train_idx], labels[train_idx])
        except NumericalAbort:
            logger.warning(f"Learning-rate sweep: lr={lr:g} diverged")
            sse = float('inf')
        rows.append({'lr': lr, 'train_sse': sse})
        logger.info(f"Learning-rate sweep: lr={lr:g} -> train SSE {sse:.6f}")
    table = pd.DataFrame(rows, columns=['lr', 'train_sse'])
    finite = table[np.isfinite(table['train_sse'])]
    if finite.empty:
        raise NumericalAbort("every learning rate in the sweep diverged")
    best_lr = float(finite.loc[finite['train_sse'].idxmin(), 'lr'])
    return best_lr, table
