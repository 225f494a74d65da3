"""Spatio-temporal encoder and task heads.

A shared per-point MLP with max-pooling encodes every frame; an LSTM (or the
parameter-free mean-pooling ablation) aggregates the frame features into one
sequence vector ``h``. Heads on top of ``h``:

* projection to the unit-norm contrastive embedding,
* soft-center localization on the last frame (two score maps, port/starboard),
* two-step forecast of both vortex centers.

Parameters live in a flat ``dict[str, np.ndarray]`` (float32 storage). Every
forward function takes a mapping ``P`` of name -> Tensor/array, so the same code
runs under a tape for training and without one for inference.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import ScanSequence
from .tensor import Tape, Tensor

CENTER_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig:
    point_widths: tuple = (64, 128, 256)
    hidden: int = 256
    proj_widths: tuple = (128, 64)
    center_hidden: int = 64
    forecast_hidden: int = 128
    aggregator: str = "lstm"  # or "mean"
    # fixed channel scales (y, z in m; v_r in m/s) applied before the point MLP
    input_scale: tuple = (100.0, 100.0, 5.0)

    def __post_init__(self):
        widths = (*self.point_widths, self.hidden, *self.proj_widths, self.center_hidden, self.forecast_hidden)
        if min(widths) < 1:
            raise ValueError("all widths must be >= 1")
        if self.aggregator not in ("lstm", "mean"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.aggregator == "mean" and self.hidden != self.point_widths[-1]:
            raise ValueError("mean pooling needs hidden == spatial feature width")

    @property
    def spatial_dim(self) -> int:
        return self.point_widths[-1]

    @property
    def point_feature_dim(self) -> int:
        return self.point_widths[-2] if len(self.point_widths) > 1 else 3

    @property
    def embed_dim(self) -> int:
        return self.proj_widths[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, values: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})


# -- parameters --------------------------------------------------------------


def _uniform(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out)).astype(np.float32)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    p: dict[str, np.ndarray] = {}
    dims = (3, *cfg.point_widths)
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"enc.w{i}"] = _uniform(rng, a, b)
        p[f"enc.b{i}"] = np.zeros(b, np.float32)
    H, D = cfg.hidden, cfg.spatial_dim
    if cfg.aggregator == "lstm":
        p["lstm.wx"] = _uniform(rng, D, 4 * H)
        p["lstm.wh"] = _uniform(rng, H, 4 * H)
        bias = np.zeros(4 * H, np.float32)
        bias[H:2 * H] = 1.0
        p["lstm.b"] = bias
    dims = (H, *cfg.proj_widths)
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"proj.w{i}"] = _uniform(rng, a, b)
        p[f"proj.b{i}"] = np.zeros(b, np.float32)
    F, C = cfg.point_feature_dim, cfg.center_hidden
    p["center.wp"] = _uniform(rng, F + H, C, (F, C))
    p["center.wh"] = _uniform(rng, F + H, C, (H, C))
    p["center.b0"] = np.zeros(C, np.float32)
    p["center.w1"] = _uniform(rng, C, 2)
    p["center.b1"] = np.zeros(2, np.float32)
    p["fcst.w0"] = _uniform(rng, H, cfg.forecast_hidden)
    p["fcst.b0"] = np.zeros(cfg.forecast_hidden, np.float32)
    p["fcst.w1"] = _uniform(rng, cfg.forecast_hidden, 8)
    p["fcst.b1"] = np.zeros(8, np.float32)
    return p


def group(params: Mapping[str, np.ndarray], *prefixes: str) -> list[str]:
    return sorted(n for n in params if n.split(".")[0] in prefixes)


def params_checksum(params: Mapping[str, np.ndarray], names: Sequence[str] | None = None) -> str:
    h = hashlib.sha256()
    for name in sorted(names if names is not None else params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


def bind(tape: Tape | None, params: Mapping[str, np.ndarray], trainable: Sequence[str] = ()) -> dict[str, Tensor]:
    """Wrap parameters as tensors; only ``trainable`` names are watched."""
    out = {}
    trainable = set(trainable)
    for name, value in params.items():
        if tape is not None and name in trainable:
            out[name] = tape.watch(name, value)
        else:
            out[name] = Tensor(value)
    return out


# -- spatial encoder ---------------------------------------------------------


def point_mlp(points, P, cfg: EncoderConfig):
    """Per-point activations of every layer for points of shape (..., N, 3)."""
    x = T.as_tensor(points) * (1.0 / np.asarray(cfg.input_scale))
    acts = []
    for i in range(len(cfg.point_widths)):
        x = T.relu(T.affine(x, P[f"enc.w{i}"], P[f"enc.b{i}"]))
        acts.append(x)
    return acts


def encode_frames(points, P, cfg: EncoderConfig, with_point_features: bool = False):
    """Frame features ``v`` of shape (F, D_s) for points (F, N, 3).

    With ``with_point_features`` also returns the penultimate per-point
    activations (F, N, point_feature_dim) used by the soft-center head.
    """
    acts = point_mlp(points, P, cfg)
    pooled = acts[-1].max(axis=-2)
    if with_point_features:
        feats = acts[-2] if len(acts) > 1 else T.as_tensor(points)
        return pooled, feats
    return pooled


def encode_frame(frame_points: np.ndarray, P, cfg: EncoderConfig) -> np.ndarray:
    if not np.all(np.isfinite(frame_points)):
        raise ValueError("frame contains non-finite values")
    return encode_frames(np.asarray(frame_points)[None], P, cfg).data[0]


# -- temporal aggregation ----------------------------------------------------


def pad_features(frame_feats, lengths: Sequence[int]):
    """Scatter (F, D) frame features into (B, T_max, D) with zero padding."""
    lengths = np.asarray(lengths)
    n_frames = int(lengths.sum())
    t_max = int(lengths.max())
    index = np.full((len(lengths), t_max), n_frames, dtype=np.int64)
    start = 0
    for b, k in enumerate(lengths):
        index[b, :k] = np.arange(start, start + k)
        start += k
    zero = Tensor(np.zeros((1, frame_feats.shape[-1])))
    return T.concat([frame_feats, zero], axis=0)[index]


def lstm_aggregate(padded, lengths: Sequence[int], P, hidden: int):
    """Final hidden state of a single-layer LSTM over padded features (B, T, D).

    Steps past a sequence's length leave its state untouched, so padding never
    influences the result.
    """
    lengths = np.asarray(lengths)
    if lengths.min() < 1:
        raise ValueError("every sequence needs at least one frame")
    B = len(lengths)
    H = hidden
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    xw = T.matmul(padded, P["lstm.wx"]) + P["lstm.b"]
    dtype = T.default_dtype()
    for t in range(int(lengths.max())):
        gates = xw[:, t, :] + T.matmul(h, P["lstm.wh"])
        i = T.sigmoid(gates[:, :H])
        f = T.sigmoid(gates[:, H:2 * H])
        g = T.tanh(gates[:, 2 * H:3 * H])
        o = T.sigmoid(gates[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if np.all(lengths > t):
            h, c = h_new, c_new
        else:
            m = (lengths > t).astype(dtype)[:, None]
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
    return h


def mean_pool_aggregate(padded, lengths: Sequence[int]):
    lengths = np.asarray(lengths)
    if lengths.min() < 1:
        raise ValueError("every sequence needs at least one frame")
    # padded rows are zero, so the sum covers real frames only
    return padded.sum(axis=1) * (1.0 / lengths.astype(T.default_dtype()))[:, None]


def aggregate(frame_feats, lengths, P, cfg: EncoderConfig):
    padded = pad_features(frame_feats, lengths)
    if cfg.aggregator == "mean":
        return mean_pool_aggregate(padded, lengths)
    return lstm_aggregate(padded, lengths, P, cfg.hidden)


def aggregate_sequence(features: Sequence[np.ndarray], P, cfg: EncoderConfig) -> np.ndarray:
    """h_T for one list of frame features."""
    if len(features) == 0:
        raise ValueError("empty feature list")
    return aggregate(Tensor(np.stack(features)), [len(features)], P, cfg).data[0]


# -- heads -------------------------------------------------------------------


def project(h, P, cfg: EncoderConfig, eps: float = 1e-12):
    x = h
    n = len(cfg.proj_widths)
    for i in range(n):
        x = T.affine(x, P[f"proj.w{i}"], P[f"proj.b{i}"])
        if i < n - 1:
            x = T.relu(x)
    return T.l2_normalize(x, axis=-1, eps=eps)


def soft_center(point_feats, xy, h, P):
    """Score maps (B, N, 2) and score-weighted centers (B, 2, 2).

    ``point_feats`` (B, N, F) and ``xy`` (B, N, 2) describe the last frame of
    each sequence; channel 0 of the scores is the port vortex.
    """
    hidden = T.matmul(point_feats, P["center.wp"]) + T.reshape(
        T.matmul(h, P["center.wh"]) + P["center.b0"], (h.shape[0], 1, -1)
    )
    scores = T.sigmoid(T.affine(T.relu(hidden), P["center.w1"], P["center.b1"]))
    return scores, weighted_centers(scores, xy)


def weighted_centers(scores, xy):
    """sum_i M_i p_i / (sum_i M_i + eps) per score channel."""
    xy = T.as_tensor(xy)
    num = T.matmul(T.transpose(scores, (0, 2, 1)), xy)  # (B, 2, 2)
    den = T.reshape(scores.sum(axis=1), (scores.shape[0], 2, 1)) + CENTER_EPS
    return num / den


def forecast(h, P, cfg: EncoderConfig):
    """Centers (B, horizon, vortex, yz) at t+1 and t+2 in centered meters."""
    x = T.relu(T.affine(h, P["fcst.w0"], P["fcst.b0"]))
    out = T.affine(x, P["fcst.w1"], P["fcst.b1"]) * cfg.input_scale[0]
    return T.reshape(out, (h.shape[0], 2, 2, 2))


# -- batching helpers --------------------------------------------------------


def batch_points(seqs: Sequence[ScanSequence]):
    """Stacked frames (F, N, 3) of several sequences and their lengths."""
    frames = [f.points for s in seqs for f in s.frames]
    return np.stack(frames), np.array([len(s) for s in seqs])


def last_frame_index(lengths: np.ndarray) -> np.ndarray:
    return np.cumsum(lengths) - 1


def embed(seqs: Sequence[ScanSequence], P, cfg: EncoderConfig):
    """Sequence vectors h (B, D_t) for a list of sequences."""
    pts, lengths = batch_points(seqs)
    v = encode_frames(pts, P, cfg)
    return aggregate(v, lengths, P, cfg)


@dataclass
class Model:
    cfg: EncoderConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: EncoderConfig, seed: int) -> "Model":
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)))

    def tensors(self) -> dict[str, Tensor]:
        return bind(None, self.params)

    def embed(self, seqs: Sequence[ScanSequence], batch_size: int = 64) -> np.ndarray:
        P = self.tensors()
        out = [embed(seqs[i:i + batch_size], P, self.cfg).data for i in range(0, len(seqs), batch_size)]
        return np.concatenate(out)
