"""Weak and strong views of a scan sequence for contrastive pre-training."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import PointCloudFrame, ScanSequence, normalize_point_count


@dataclass(frozen=True)
class AugmentConfig:
    jitter_sigma: float = 0.05  # m, weak view
    dropout_p: float = 0.3
    rotation_range: float = math.pi / 6
    min_frames_kept: int = 3

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.rotation_range < 0:
            raise ValueError("rotation_range must be non-negative")
        if self.min_frames_kept < 1:
            raise ValueError("min_frames_kept must be >= 1")


@dataclass
class ViewPair:
    view_weak: ScanSequence
    view_strong: ScanSequence

    @property
    def event_id(self) -> str:
        return self.view_weak.event_id


def weak_view(seq: ScanSequence, rng: np.random.Generator, cfg: AugmentConfig) -> ScanSequence:
    """Gaussian jitter on (y, z) of every point; structure unchanged."""
    if cfg.jitter_sigma == 0:
        return seq
    frames = []
    for f in seq.frames:
        pts = f.points.copy()
        pts[:, :2] += rng.normal(0.0, cfg.jitter_sigma, size=(len(pts), 2))
        frames.append(PointCloudFrame(pts, f.timestamp, f.meta))
    return replace(seq, frames=frames)


def rotate(points: np.ndarray, angle: float, pivot: np.ndarray) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = points.copy()
    d = points[:, :2] - pivot
    out[:, 0] = pivot[0] + c * d[:, 0] - s * d[:, 1]
    out[:, 1] = pivot[1] + s * d[:, 0] + c * d[:, 1]
    return out


def strong_view(
    seq: ScanSequence,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    angle: float | None = None,
) -> ScanSequence:
    """Frame skipping, point dropout with re-padding, and one in-plane rotation.

    The rotation acts on (y, z) about the sequence centroid (the origin for
    centered sequences) with a single angle for all kept frames; v_r is left
    alone. ``angle`` overrides the random draw.
    """
    n_frames = len(seq)
    if n_frames < cfg.min_frames_kept:
        raise ValueError(f"sequence has {n_frames} frames, need {cfg.min_frames_kept}")
    k = int(rng.integers(cfg.min_frames_kept, n_frames + 1))
    kept = np.sort(rng.choice(n_frames, size=k, replace=False))
    if angle is None:
        angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range) if cfg.rotation_range > 0 else 0.0
    pivot = np.concatenate([f.points[:, :2] for f in seq.frames]).mean(axis=0)
    frames = []
    for i in kept:
        f = seq.frames[i]
        n = len(f)
        pts = f.points
        if cfg.dropout_p > 0:
            keep = rng.random(n) >= cfg.dropout_p
            if not keep.any():
                keep[rng.integers(n)] = True
            pts = pts[keep]
        frame = normalize_point_count(PointCloudFrame(pts, f.timestamp, f.meta), n, rng)
        pts = frame.points
        if angle != 0.0:
            pts = rotate(pts, angle, pivot)
        frames.append(PointCloudFrame(pts, f.timestamp, f.meta))
    centers = None
    if seq.centers is not None:
        flat = np.column_stack([seq.centers[kept].reshape(-1, 2), np.zeros(2 * k)])
        centers = rotate(flat, angle, pivot)[:, :2].reshape(k, 2, 2)
    return replace(seq, frames=frames, centers=centers)


def make_view_pair(seq: ScanSequence, rng: np.random.Generator, cfg: AugmentConfig) -> ViewPair:
    weak_rng, strong_rng = rng.spawn(2)
    return ViewPair(weak_view(seq, weak_rng, cfg), strong_view(seq, strong_rng, cfg))


def sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Augmentation stream for one sample, independent of batch composition."""
    return np.random.default_rng([seed, epoch, index])
