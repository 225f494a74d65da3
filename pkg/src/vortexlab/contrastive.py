"""InfoNCE over two-view batches, embedding diagnostics, pre-training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp as np_logsumexp

from . import model as M
from . import tensor as T
from .augment import AugmentConfig, make_view_pair, sample_rng
from .data import Checkpoint, ScanSequence
from .optim import AdamState, adam_step, cosine_lr
from .tensor import Tape, backward

log = logging.getLogger(__name__)

UNIT_TOL = 1e-4
_MASKED = -1e9
_VAL_KEY = 2**31 - 1


def info_nce(z, temperature: float = 0.07):
    """Symmetric InfoNCE for 2B unit rows where row i pairs with row i+B.

    Each anchor's denominator holds its positive and the 2B-2 other rows,
    never itself. Returns the mean over all 2B anchors.
    """
    z = T.as_tensor(z)
    n = z.shape[0]
    if n == 0 or n % 2:
        raise ValueError(f"need an even, non-zero number of rows, got {n}")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("embeddings must be unit-norm")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    B = n // 2
    dtype = T.default_dtype()
    sim = T.matmul(z, T.transpose(z)) * (1.0 / temperature)
    self_mask = np.eye(n, dtype=dtype) * _MASKED
    pos = np.zeros((n, n), dtype=dtype)
    idx = np.arange(n)
    pos[idx, (idx + B) % n] = 1.0
    denom = T.logsumexp(sim + self_mask, axis=1)
    numer = (sim * pos).sum(axis=1)
    return T.mean(denom - numer)


def alignment(z1: np.ndarray, z2: np.ndarray, alpha: float = 2.0) -> float:
    """Mean ||z1_i - z2_i||^alpha over positive pairs."""
    z1, z2 = np.atleast_2d(z1), np.atleast_2d(z2)
    if len(z1) == 0 or z1.shape != z2.shape:
        raise ValueError("need at least one pair of equal-shape embeddings")
    return float(np.mean(np.linalg.norm(z1 - z2, axis=1) ** alpha))


def uniformity(z: np.ndarray, t: float = 2.0) -> float:
    """log mean_{i<j} exp(-t ||z_i - z_j||^2)."""
    z = np.atleast_2d(z)
    if len(z) < 2:
        raise ValueError("need at least two embeddings")
    d2 = pdist(z, "sqeuclidean")
    return float(np_logsumexp(-t * d2) - math.log(len(d2)))


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 16
    temperature: float = 0.07
    lr: float = 1e-3
    patience: int = 10
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PretrainResult:
    model: M.Model
    metrics: list[dict]
    step: int
    best_epoch: int
    # wall-clock time, kept out of the metrics so logs stay reproducible
    seconds: float = 0.0

    def checkpoint(self, seed: int, extra: dict | None = None) -> Checkpoint:
        hyper = {"encoder": self.model.cfg.to_dict(), "best_epoch": self.best_epoch, **(extra or {})}
        return Checkpoint(tensors=dict(self.model.params), hyper=hyper, step=self.step, seed=seed)


PRETRAIN_GROUPS = ("enc", "lstm", "proj")


def _view_embeddings(pairs, P, cfg):
    seqs = [p.view_weak for p in pairs] + [p.view_strong for p in pairs]
    return M.project(M.embed(seqs, P, cfg), P, cfg)


def _batch_stats(z: np.ndarray) -> tuple[float, float]:
    B = len(z) // 2
    return alignment(z[:B], z[B:]), uniformity(z)


def evaluate_views(model: M.Model, seqs: Sequence[ScanSequence], cfg: PretrainConfig) -> dict:
    """Loss, alignment and uniformity on fixed augmentations, batched like training."""
    P = model.tensors()
    losses, aligns, unifs, weights = [], [], [], []
    for start in range(0, len(seqs), cfg.batch_size):
        chunk = seqs[start:start + cfg.batch_size]
        if len(chunk) < 2:
            continue
        pairs = [make_view_pair(s, sample_rng(cfg.seed, _VAL_KEY, start + i), cfg.augment) for i, s in enumerate(chunk)]
        z = _view_embeddings(pairs, P, model.cfg)
        losses.append(float(info_nce(z, cfg.temperature).data))
        a, u = _batch_stats(z.data.astype(np.float64))
        aligns.append(a)
        unifs.append(u)
        weights.append(len(chunk))
    w = np.asarray(weights, dtype=np.float64)
    return {
        "loss": float(np.average(losses, weights=w)),
        "alignment": float(np.average(aligns, weights=w)),
        "uniformity": float(np.average(unifs, weights=w)),
    }


def pretrain(
    train: Sequence[ScanSequence],
    val: Sequence[ScanSequence],
    cfg: PretrainConfig,
    model_cfg: M.EncoderConfig,
    init: M.Model | None = None,
) -> PretrainResult:
    """Contrastive pre-training with Adam, cosine decay and early stopping.

    Logs one train and one val row per epoch (plus a val row at epoch 0 for
    the initialization). The returned model holds the best-val-loss weights.
    """
    if not train:
        raise ValueError("training set is empty")
    started = time.perf_counter()
    model = init if init is not None else M.Model.create(model_cfg, cfg.seed)
    params = {k: v.copy() for k, v in model.params.items()}
    trainable = M.group(params, *PRETRAIN_GROUPS)
    state = AdamState()
    n = len(train)
    batches_per_epoch = max(1, n // cfg.batch_size) if n >= cfg.batch_size else 1
    total = cfg.epochs * batches_per_epoch
    rows: list[dict] = []

    if val:
        stats = evaluate_views(M.Model(model_cfg, params), val, cfg)
        rows.append({"epoch": 0, "split": "val", "lr": cosine_lr(0, total, cfg.lr), **stats})

    best = (math.inf, 0, {k: v.copy() for k, v in params.items()})
    stale = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses, aligns, unifs = [], [], []
        lr = cfg.lr
        for b in range(batches_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            pairs = [make_view_pair(train[i], sample_rng(cfg.seed, epoch, int(i)), cfg.augment) for i in idx]
            lr = cosine_lr(step, total, cfg.lr)
            with Tape() as tape:
                P = M.bind(tape, params, trainable)
                z = _view_embeddings(pairs, P, model_cfg)
                loss = info_nce(z, cfg.temperature)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite InfoNCE at epoch {epoch}, batch {b}: {value}")
            grads = backward(tape, loss)
            adam_step(params, grads, state, lr)
            step += 1
            losses.append(value)
            a, u = _batch_stats(z.data.astype(np.float64))
            aligns.append(a)
            unifs.append(u)
        rows.append({
            "epoch": epoch, "split": "train", "loss": float(np.mean(losses)),
            "alignment": float(np.mean(aligns)), "uniformity": float(np.mean(unifs)), "lr": lr,
        })
        monitor = rows[-1]["loss"]
        if val:
            stats = evaluate_views(M.Model(model_cfg, params), val, cfg)
            rows.append({"epoch": epoch, "split": "val", "lr": lr, **stats})
            monitor = stats["loss"]
        log.info("epoch %d train %.4f monitor %.4f", epoch, rows[-1 if not val else -2]["loss"], monitor)
        if monitor < best[0]:
            best = (monitor, epoch, {k: v.copy() for k, v in params.items()})
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    return PretrainResult(
        model=M.Model(model_cfg, best[2]), metrics=rows, step=step, best_epoch=best[1], seconds=time.perf_counter() - started
    )
