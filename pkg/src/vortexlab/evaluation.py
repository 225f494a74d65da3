"""Localization and forecasting metrics, and the linear probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import AdamState, adam_step
from .tensor import Tape, backward


def matched_sq_errors(preds, labels) -> np.ndarray:
    """(F, 2) squared center distances under the per-frame best pairing."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 2, 2)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 2, 2)
    if preds.shape != labels.shape:
        raise ValueError(f"prediction/label count mismatch: {preds.shape} vs {labels.shape}")
    same = ((preds - labels) ** 2).sum(axis=2)
    swap = ((preds - labels[:, ::-1]) ** 2).sum(axis=2)
    use_swap = swap.sum(axis=1) < same.sum(axis=1)
    return np.where(use_swap[:, None], swap, same)


def rmse_centers(preds, labels) -> float:
    """RMSE in meters over all matched centers of all frames."""
    return float(np.sqrt(matched_sq_errors(preds, labels).mean()))


def forecast_rmse(preds, futures) -> tuple[float, float]:
    """RMSE at t+1 and t+2 for (S, 2, 2, 2) predictions and targets."""
    preds = np.asarray(preds, dtype=np.float64)
    futures = np.asarray(futures, dtype=np.float64)
    if preds.shape != futures.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {futures.shape}")
    return rmse_centers(preds[:, 0], futures[:, 0]), rmse_centers(preds[:, 1], futures[:, 1])


@dataclass
class ProbeConfig:
    epochs: int = 300
    lr: float = 1e-2
    seed: int = 0


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
    cfg: ProbeConfig = ProbeConfig(),
) -> float:
    """Top-1 test accuracy (%) of a softmax classifier on frozen features.

    Features are standardized with training statistics; the single affine
    layer is trained full-batch with Adam from a zero start.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if len(np.unique(train_y)) < 2:
        raise ValueError("linear probe needs at least two classes in training data")
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-6
    xtr = ((train_x - mu) / sd).astype(np.float32)
    xte = ((test_x - mu) / sd).astype(np.float32)
    params = {
        "w": np.zeros((xtr.shape[1], n_classes), np.float32),
        "b": np.zeros(n_classes, np.float32),
    }
    state = AdamState()
    for _ in range(cfg.epochs):
        with Tape() as tape:
            w = tape.watch("w", params["w"])
            b = tape.watch("b", params["b"])
            loss = T.softmax_cross_entropy(T.affine(xtr, w, b), train_y)
        adam_step(params, backward(tape, loss), state, cfg.lr)
    logits = xte @ params["w"] + params["b"]
    return float(100.0 * np.mean(np.argmax(logits, axis=1) == test_y))
