"""Comparison methods: clustering heuristics, kinematic forecasters, and
learned models trained without contrastive pre-training.

Every localization baseline returns centers as a (2, 2) array ordered
[port, starboard], where port is the center with the larger ``y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import model as M
from . import tensor as T
from .data import PointCloudFrame, ScanSequence
from .finetune import FinetuneConfig, finetune_localization
from .optim import AdamState, adam_step, cosine_lr
from .tensor import Tape, Tensor, backward


def order_port_first(centers: np.ndarray) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.float64)
    return centers[np.argsort(-centers[:, 0], kind="stable")]


# -- DBSCAN ------------------------------------------------------------------


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 8.0
    min_pts: int = 10
    vr_threshold: float = 1.5

    def __post_init__(self):
        if self.eps <= 0 or self.min_pts < 1:
            raise ValueError("eps must be positive and min_pts >= 1")


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels (-1 for noise) for (M, 2) points.

    Core points are those with at least ``min_pts`` points (itself included)
    within ``eps``; clusters are connected components of core points. A border
    point joins the cluster of its nearest core point, ties broken by the
    core point's coordinates, so membership does not depend on input order.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    counts = np.ones(n, dtype=np.int64)
    np.add.at(counts, pairs.ravel(), 1)
    core = counts >= min_pts
    if not core.any():
        return labels
    core_idx = np.flatnonzero(core)
    both = core[pairs[:, 0]] & core[pairs[:, 1]] if len(pairs) else np.zeros(0, bool)
    remap = np.full(n, -1)
    remap[core_idx] = np.arange(len(core_idx))
    cp = pairs[both]
    graph = coo_matrix(
        (np.ones(len(cp)), (remap[cp[:, 0]], remap[cp[:, 1]])), shape=(len(core_idx), len(core_idx))
    )
    _, comp = connected_components(graph, directed=False)
    # relabel components by their lexicographically smallest core point
    keys = {}
    for c in np.unique(comp):
        members = points[core_idx[comp == c]]
        keys[c] = tuple(members[np.lexsort(members.T[::-1])][0])
    order = sorted(keys, key=lambda c: keys[c])
    relabel = {c: i for i, c in enumerate(order)}
    labels[core_idx] = [relabel[c] for c in comp]

    border = np.flatnonzero(~core)
    if len(border):
        core_tree = cKDTree(points[core_idx])
        near = core_tree.query_ball_point(points[border], eps)
        for b, cand in zip(border, near):
            if not cand:
                continue
            cand = np.asarray(cand)
            d = np.linalg.norm(points[core_idx[cand]] - points[b], axis=1)
            best = cand[d == d.min()]
            if len(best) > 1:
                pts = points[core_idx[best]]
                best = best[np.lexsort(pts.T[::-1])]
            labels[b] = labels[core_idx[best[0]]]
    return labels


def dbscan_centers(frame: PointCloudFrame, cfg: DbscanConfig = DbscanConfig()) -> np.ndarray:
    """Centroids of the two largest clusters of strong-|v_r| returns."""
    pts = frame.points
    if len(pts) == 0:
        raise ValueError("empty frame")
    fallback = np.repeat(pts[:, :2].mean(axis=0)[None], 2, axis=0)
    strong = pts[np.abs(pts[:, 2]) >= cfg.vr_threshold, :2]
    if len(strong) == 0:
        return fallback
    labels = dbscan(strong, cfg.eps, cfg.min_pts)
    ids = [c for c in np.unique(labels) if c >= 0]
    if not ids:
        return fallback
    sizes = {c: int(np.sum(labels == c)) for c in ids}
    top = sorted(ids, key=lambda c: (-sizes[c], c))[:2]
    cents = np.array([strong[labels == c].mean(axis=0) for c in top])
    if len(cents) == 1:
        cents = np.repeat(cents, 2, axis=0)
    return order_port_first(cents)


def intensity_centroid(frame: PointCloudFrame) -> np.ndarray:
    """|v_r|-weighted centroids of the two halves split at the weighted median y."""
    pts = frame.points
    if len(pts) == 0:
        raise ValueError("empty frame")
    w = np.abs(pts[:, 2])
    if w.sum() == 0:
        w = np.ones(len(pts))
    order = np.argsort(pts[:, 0], kind="stable")
    cum = np.cumsum(w[order])
    split_at = order[np.searchsorted(cum, 0.5 * cum[-1])]
    y_med = pts[split_at, 0]
    lower = pts[:, 0] <= y_med
    halves = [~lower, lower]
    cents = []
    for mask in halves:
        if not mask.any() or w[mask].sum() == 0:
            mask = np.ones(len(pts), bool)
        cents.append(np.average(pts[mask, :2], axis=0, weights=w[mask]))
    return order_port_first(np.array(cents))


# -- kinematic forecasters ---------------------------------------------------


def constant_velocity_forecast(history: np.ndarray, dt: float = 1.0) -> np.ndarray:
    """Linear extrapolation of (K, 2, 2) center history to (2, 2, 2) at t+1, t+2."""
    history = np.asarray(history, dtype=np.float64)
    if len(history) < 2:
        raise ValueError("constant velocity needs at least two observations")
    vel = (history[-1] - history[-2]) / dt
    return np.stack([history[-1] + vel * dt, history[-1] + 2 * vel * dt])


@dataclass(frozen=True)
class KalmanConfig:
    q: float = 0.5  # white-acceleration spectral density
    r: float = 4.0  # measurement variance per coordinate
    velocity_prior: float = 1e8  # initial velocity variance (diffuse)

    def __post_init__(self):
        if self.q <= 0 or self.r <= 0:
            raise ValueError("q and r must be positive")


@dataclass
class KalmanFilter:
    """Constant-velocity filter for one vortex center, state (y, z, v_y, v_z)."""

    cfg: KalmanConfig
    dt: float = 1.0
    x: np.ndarray = field(default_factory=lambda: np.zeros(4))
    P: np.ndarray = field(default_factory=lambda: np.eye(4))
    resets: int = 0
    initialized: bool = False

    def _matrices(self):
        dt, q = self.dt, self.cfg.q
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        Q = np.zeros((4, 4))
        for i in (0, 1):
            Q[i, i] = q * dt**3 / 3
            Q[i, i + 2] = Q[i + 2, i] = q * dt**2 / 2
            Q[i + 2, i + 2] = q * dt
        return F, Q

    def _prior(self, z):
        self.x = np.array([z[0], z[1], 0.0, 0.0])
        self.P = np.diag([self.cfg.r, self.cfg.r, self.cfg.velocity_prior, self.cfg.velocity_prior])

    def predict(self):
        F, Q = self._matrices()
        self.x = F @ self.x
        self.P = F @ self.P @ F.T + Q
        self._symmetrize()

    def update(self, z):
        z = np.asarray(z, dtype=np.float64)
        if not self.initialized:
            self._prior(z)
            self.initialized = True
            return
        H = np.zeros((2, 4))
        H[0, 0] = H[1, 1] = 1.0
        S = H @ self.P @ H.T + self.cfg.r * np.eye(2)
        K = np.linalg.solve(S, H @ self.P).T
        self.x = self.x + K @ (z - H @ self.x)
        A = np.eye(4) - K @ H
        # Joseph form keeps P symmetric positive-definite
        self.P = A @ self.P @ A.T + self.cfg.r * K @ K.T
        self._symmetrize()
        if not np.all(np.isfinite(self.P)) or np.linalg.eigvalsh(self.P).min() <= 0:
            self._prior(z)
            self.resets += 1

    def _symmetrize(self):
        self.P = 0.5 * (self.P + self.P.T)


def kalman_forecast(
    history: np.ndarray,
    cfg: KalmanConfig = KalmanConfig(),
    dt: float = 1.0,
    return_filters: bool = False,
):
    """Filter a (K, 2, 2) center history, then predict two steps ahead."""
    history = np.asarray(history, dtype=np.float64)
    if len(history) < 1:
        raise ValueError("Kalman forecast needs at least one observation")
    out = np.zeros((2, 2, 2))
    filters = []
    for v in range(2):
        kf = KalmanFilter(cfg, dt)
        for k, obs in enumerate(history[:, v]):
            if k > 0:
                kf.predict()
            kf.update(obs)
        for h in range(2):
            kf.predict()
            out[h, v] = kf.x[:2]
        filters.append(kf)
    return (out, filters) if return_filters else out


# -- trajectory-only recurrent forecaster -------------------------------------


@dataclass
class TrajectoryForecaster:
    """LSTM over past center coordinates only (input: both centers, 4 values)."""

    hidden: int = 32
    epochs: int = 200
    lr: float = 3e-3
    batch_size: int = 32
    seed: int = 0
    scale: float = 100.0
    params: dict = field(default_factory=dict)

    def _init(self):
        rng = np.random.default_rng(self.seed)
        H = self.hidden
        u = M._uniform
        bias = np.zeros(4 * H, np.float32)
        bias[H:2 * H] = 1.0
        self.params = {
            "lstm.wx": u(rng, 4, 4 * H), "lstm.wh": u(rng, H, 4 * H), "lstm.b": bias,
            "fcst.w0": u(rng, H, 64), "fcst.b0": np.zeros(64, np.float32),
            "fcst.w1": u(rng, 64, 8), "fcst.b1": np.zeros(8, np.float32),
        }

    @staticmethod
    def _normalize(history: np.ndarray):
        ref = history[:, -1]  # (S, 2, 2): last observed position of each vortex
        return history - ref[:, None], ref

    def _forward(self, history: np.ndarray, P):
        x, _ = self._normalize(history)
        S, K = x.shape[:2]
        feats = Tensor(x.reshape(S, K, 4) / self.scale)
        h = M.lstm_aggregate(feats, np.full(S, K), P, self.hidden)
        hid = T.relu(T.affine(h, P["fcst.w0"], P["fcst.b0"]))
        out = T.affine(hid, P["fcst.w1"], P["fcst.b1"]) * self.scale
        return T.reshape(out, (S, 2, 2, 2))

    def fit(self, histories: np.ndarray, futures: np.ndarray) -> list[float]:
        """Train on (S, K, 2, 2) histories and (S, 2, 2, 2) future centers."""
        from .finetune import forecast_loss

        histories = np.asarray(histories, dtype=np.float64)
        futures = np.asarray(futures, dtype=np.float64)
        if len(histories) == 0:
            raise ValueError("empty training set")
        self._init()
        _, ref = self._normalize(histories)
        targets = futures - ref[:, None]
        n = len(histories)
        bs = min(self.batch_size, n)
        per_epoch = math.ceil(n / bs)
        total = self.epochs * per_epoch
        state = AdamState()
        losses, step = [], 0
        for epoch in range(self.epochs):
            order = np.random.default_rng([self.seed, epoch]).permutation(n)
            epoch_loss = []
            for b in range(per_epoch):
                idx = np.sort(order[b * bs:(b + 1) * bs])
                with Tape() as tape:
                    P = M.bind(tape, self.params, list(self.params))
                    loss = forecast_loss(self._forward(histories[idx], P), targets[idx])
                adam_step(self.params, backward(tape, loss), state, cosine_lr(step, total, self.lr))
                step += 1
                epoch_loss.append(float(loss.data))
            losses.append(float(np.mean(epoch_loss)))
        return losses

    def predict(self, histories: np.ndarray) -> np.ndarray:
        histories = np.asarray(histories, dtype=np.float64)
        _, ref = self._normalize(histories)
        out = self._forward(histories, M.bind(None, self.params)).data.astype(np.float64)
        return out + ref[:, None]


# -- supervised from scratch --------------------------------------------------


def select_fraction(seqs: Sequence[ScanSequence], fraction: float, seed: int) -> list[ScanSequence]:
    """Deterministic subset of ``round(fraction * n)`` sequences."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = int(round(fraction * len(seqs)))
    if k == 0:
        raise ValueError(f"fraction {fraction} of {len(seqs)} sequences selects nothing")
    if k == len(seqs):
        return list(seqs)
    idx = np.sort(np.random.default_rng([seed, 104729]).choice(len(seqs), size=k, replace=False))
    return [seqs[i] for i in idx]


def supervised_from_scratch(
    train: Sequence[ScanSequence],
    fraction: float,
    model_cfg: M.EncoderConfig,
    cfg: FinetuneConfig,
    val: Sequence[ScanSequence] | None = None,
):
    """Same architecture and heads, random init, everything trained on the subset."""
    subset = select_fraction(train, fraction, cfg.seed)
    model = M.Model.create(model_cfg, cfg.seed)
    cfg = FinetuneConfig(**{**cfg.to_dict(), "train_encoder": True, "train_temporal": True})
    return finetune_localization(model, subset, cfg, val)
