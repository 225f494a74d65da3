"""Downstream training: soft-center localization and two-step forecasting.

Both tasks can start from a pre-trained model (encoder frozen) or from a
random initialization with everything trainable, which is the supervised
from-scratch comparator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .data import ScanSequence, center_sequence
from .optim import AdamState, adam_step, cosine_lr
from .tensor import Tape, Tensor, backward

HISTORY = 3


@dataclass
class FinetuneConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    # floor on optimizer steps, so tiny label fractions still converge
    min_steps: int = 0
    train_encoder: bool = False
    train_temporal: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def pair_sq_error(pred, target):
    """Per-sample summed squared error under the better of the two pairings."""
    pred = T.as_tensor(pred)
    target = np.asarray(target)
    same = T.tsum((pred - target) ** 2, axis=(1, 2))
    swapped = T.tsum((pred - target[:, ::-1]) ** 2, axis=(1, 2))
    return T.minimum(same, swapped)


def center_loss(pred, target):
    """MSE over the four center coordinates, assignment-invariant."""
    return T.mean(pair_sq_error(pred, target)) * 0.25


def forecast_loss(pred, target):
    """MSE over both horizons; each horizon uses its own best pairing."""
    target = np.asarray(target)
    total = T.mean(pair_sq_error(pred[:, 0], target[:, 0])) + T.mean(pair_sq_error(pred[:, 1], target[:, 1]))
    return total * 0.125


class _Features:
    """Frame features for a fixed set of sequences, cached when the encoder is frozen."""

    def __init__(self, seqs: Sequence[ScanSequence], model: M.Model, frozen: bool):
        self.seqs = list(seqs)
        self.cfg = model.cfg
        self.frozen = frozen
        self.lengths = np.array([len(s) for s in self.seqs])
        self.last_xy = np.stack([s.frames[-1].points[:, :2] for s in self.seqs])
        if frozen:
            P = model.tensors()
            v, feats = [], []
            for start in range(0, len(self.seqs), 32):
                chunk = self.seqs[start:start + 32]
                pts, lengths = M.batch_points(chunk)
                vv, ff = M.encode_frames(pts, P, self.cfg, with_point_features=True)
                v.append(vv.data)
                last = M.last_frame_index(lengths)
                feats.append(ff.data[last])
            self.v = np.concatenate(v)
            self.point_feats = np.concatenate(feats)
            self.offsets = np.concatenate([[0], np.cumsum(self.lengths)])

    def batch(self, idx: np.ndarray, P):
        """(frame features, lengths, last-frame point features, last-frame xy)."""
        lengths = self.lengths[idx]
        if self.frozen:
            rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in idx])
            return Tensor(self.v[rows]), lengths, Tensor(self.point_feats[idx]), self.last_xy[idx]
        pts, lengths = M.batch_points([self.seqs[i] for i in idx])
        v, feats = M.encode_frames(pts, P, self.cfg, with_point_features=True)
        return v, lengths, feats[M.last_frame_index(lengths)], self.last_xy[idx]


def _localize(features: _Features, idx, P, cfg: M.EncoderConfig):
    v, lengths, feats, xy = features.batch(idx, P)
    h = M.aggregate(v, lengths, P, cfg)
    _, centers = M.soft_center(feats, xy, h, P)
    return centers


def _trainable(model: M.Model, cfg: FinetuneConfig, head: str) -> list[str]:
    groups = [head]
    if cfg.train_temporal:
        groups.append("lstm")
    if cfg.train_encoder:
        groups.append("enc")
    return M.group(model.params, *groups)


def _fit(model, n, cfg, trainable, loss_fn, val_fn=None):
    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState()
    bs = min(cfg.batch_size, n)
    per_epoch = math.ceil(n / bs)
    epochs = max(cfg.epochs, math.ceil(cfg.min_steps / per_epoch))
    # validate about cfg.epochs times however many epochs the floor adds
    val_every = max(1, epochs // cfg.epochs)
    total = epochs * per_epoch
    step = 0
    history = []
    best = (math.inf, {k: v.copy() for k, v in params.items()})
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, 7919, epoch]).permutation(n)
        losses = []
        for b in range(per_epoch):
            idx = np.sort(order[b * bs:(b + 1) * bs])
            with Tape() as tape:
                P = M.bind(tape, params, trainable)
                loss = loss_fn(idx, P)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite fine-tuning loss at epoch {epoch}")
            adam_step(params, backward(tape, loss), state, cosine_lr(step, total, cfg.lr))
            step += 1
            losses.append(value)
        history.append(float(np.mean(losses)))
        if val_fn is not None and ((epoch + 1) % val_every == 0 or epoch == epochs - 1):
            score = val_fn(M.Model(model.cfg, params))
            if score < best[0]:
                best = (score, {k: v.copy() for k, v in params.items()})
    final = best[1] if val_fn is not None else params
    return M.Model(model.cfg, final), history


def finetune_localization(
    model: M.Model,
    train: Sequence[ScanSequence],
    cfg: FinetuneConfig,
    val: Sequence[ScanSequence] | None = None,
):
    """Train the soft-center head (and temporal module) on last-frame centers.

    Returns the tuned model and the per-epoch training loss. With ``val`` the
    epoch with the lowest validation RMSE is kept.
    """
    if not train:
        raise ValueError("no labeled training sequences")
    feats = _Features(train, model, frozen=not cfg.train_encoder)
    targets = np.stack([s.centers[-1] for s in train])

    def loss_fn(idx, P):
        return center_loss(_localize(feats, idx, P, model.cfg), targets[idx])

    val_fn = None
    if val:
        val_targets = np.stack([s.centers[-1] for s in val])
        # a frozen encoder lets validation reuse one feature pass
        val_feats = None if cfg.train_encoder else _Features(val, model, frozen=True)

        def val_fn(m):
            feats = val_feats or _Features(val, m, frozen=True)
            return float(np.mean(pair_sq_error(_centers_from(feats, m), val_targets).data))

    return _fit(model, len(train), cfg, _trainable(model, cfg, "center"), loss_fn, val_fn)


def predict_centers(model: M.Model, seqs: Sequence[ScanSequence]) -> np.ndarray:
    """Last-frame centers (B, 2, 2) in each sequence's own coordinates."""
    return _centers_from(_Features(seqs, model, frozen=True), model)


def _centers_from(feats: _Features, model: M.Model) -> np.ndarray:
    P = model.tensors()
    n = len(feats.seqs)
    out = [_localize(feats, np.arange(i, min(i + 64, n)), P, model.cfg).data for i in range(0, n, 64)]
    return np.concatenate(out).astype(np.float64)


# -- forecasting -------------------------------------------------------------


def forecast_split(seq: ScanSequence, history: int = HISTORY, center: bool = True):
    """History sub-sequence (re-centered on its own points) and future centers.

    Returns ``(history_seq, targets)`` with targets (2, 2, 2) for t+1, t+2 in
    the history's coordinates; ``history_seq.offset`` maps back to absolute.
    """
    if len(seq) < history + 2:
        raise ValueError(f"need {history + 2} frames, got {len(seq)}")
    if seq.centers is None:
        raise ValueError("sequence has no center labels")
    hist = seq.subsequence(range(history))
    # undo any earlier centering so the offset is absolute
    hist = replace(
        hist,
        frames=[replace(f, points=np.column_stack([f.points[:, :2] + seq.offset, f.points[:, 2]])) for f in hist.frames],
        centers=hist.centers + seq.offset,
        offset=np.zeros(2),
    )
    future = seq.centers[history:history + 2] + seq.offset
    if center:
        hist, mu = center_sequence(hist)
        future = future - mu
    return hist, future


def finetune_forecast(
    model: M.Model,
    train: Sequence[ScanSequence],
    cfg: FinetuneConfig,
    val: Sequence[ScanSequence] | None = None,
    center: bool = True,
):
    """Train the forecast MLP on 3-frame histories (5-frame labeled sequences).

    ``center=False`` keeps histories in raw coordinates (the no-centering ablation).
    """
    if not train:
        raise ValueError("no labeled training sequences")
    split = [forecast_split(s, center=center) for s in train]
    hists = [h for h, _ in split]
    targets = np.stack([t for _, t in split])
    feats = _Features(hists, model, frozen=not cfg.train_encoder)

    def loss_fn(idx, P):
        v, lengths, _, _ = feats.batch(idx, P)
        h = M.aggregate(v, lengths, P, model.cfg)
        return forecast_loss(M.forecast(h, P, model.cfg), targets[idx])

    val_fn = None
    if val:
        vsplit = [forecast_split(s, center=center) for s in val]
        vh = [h for h, _ in vsplit]
        vt = np.stack([t for _, t in vsplit])
        val_feats = None if cfg.train_encoder else _Features(vh, model, frozen=True)

        def val_fn(m):
            pred = _forecast_from(val_feats, m) if val_feats else _forecast_centered(m, vh)
            return float(sum(np.mean(pair_sq_error(pred[:, k], vt[:, k]).data) for k in range(2)))

    return _fit(model, len(train), cfg, _trainable(model, cfg, "fcst"), loss_fn, val_fn)


def _forecast_centered(model: M.Model, hists: Sequence[ScanSequence]) -> np.ndarray:
    P = model.tensors()
    out = []
    for i in range(0, len(hists), 64):
        h = M.embed(hists[i:i + 64], P, model.cfg)
        out.append(M.forecast(h, P, model.cfg).data)
    return np.concatenate(out).astype(np.float64)


def _forecast_from(feats: _Features, model: M.Model) -> np.ndarray:
    P = model.tensors()
    n = len(feats.seqs)
    out = []
    for i in range(0, n, 64):
        v, lengths, _, _ = feats.batch(np.arange(i, min(i + 64, n)), P)
        out.append(M.forecast(M.aggregate(v, lengths, P, model.cfg), P, model.cfg).data)
    return np.concatenate(out).astype(np.float64)


def predict_forecast(model: M.Model, seqs: Sequence[ScanSequence], center: bool = True) -> np.ndarray:
    """Absolute centers (B, 2, 2, 2) at t+1 and t+2 from the first three frames."""
    hists = [forecast_split(s, center=center)[0] for s in seqs]
    pred = _forecast_centered(model, hists)
    return pred + np.stack([h.offset for h in hists])[:, None, None, :]
