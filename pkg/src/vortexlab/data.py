"""Scan sequences: construction, normalization, splits and serialization.

Datasets on disk use one directory per recording::

    <root>/dataset.json
    <root>/seq_00000/manifest.json
    <root>/seq_00000/frame_0.csv      # header y,z,vr
    <root>/_oracle/labels.json        # exact labels, evaluation only

Checkpoints (``*.vxck``) are a JSON header followed by little-endian float32
blobs; metric logs are plain CSV.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAX_FRAME_GAP = 8.0
SEQUENCE_LENGTH = 5

METRIC_COLUMNS = ("epoch", "split", "loss", "alignment", "uniformity", "lr")


class CheckpointError(ValueError):
    pass


@dataclass
class PointCloudFrame:
    points: np.ndarray  # (N, 3): y [m], z [m], v_r [m/s]
    timestamp: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ScanSequence:
    frames: list[PointCloudFrame]
    event_id: str
    class_id: int | None = None
    centers: np.ndarray | None = None  # (T, 2, 2): frame, [port, starboard], (y, z)
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if self.centers is not None:
            self.centers = np.asarray(self.centers, dtype=np.float64).reshape(len(self.frames), 2, 2)
        self.offset = np.asarray(self.offset, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def stacked(self) -> np.ndarray:
        """(T, N, 3) array; requires equal point counts."""
        return np.stack([f.points for f in self.frames])

    def subsequence(self, index: Sequence[int], suffix: str = "") -> "ScanSequence":
        index = list(index)
        return replace(
            self,
            frames=[self.frames[i] for i in index],
            centers=None if self.centers is None else self.centers[index],
            event_id=self.event_id + suffix,
        )


@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]
    ratios: tuple[float, float, float]
    seed: int


# -- sequence construction -------------------------------------------------


def check_timing(frames: Sequence[PointCloudFrame]) -> None:
    times = np.array([f.timestamp for f in frames])
    gaps = np.diff(times)
    if np.any(gaps <= 0):
        raise ValueError("frame timestamps must be strictly increasing")
    if np.any(gaps >= MAX_FRAME_GAP):
        raise ValueError(f"frame gap of {gaps.max():.2f} s exceeds {MAX_FRAME_GAP} s")


def chunk_sequences(recording: ScanSequence, length: int = SEQUENCE_LENGTH) -> list[ScanSequence]:
    """Split a recording into non-overlapping chunks; the remainder is dropped."""
    n = len(recording) // length
    return [
        recording.subsequence(range(k * length, (k + 1) * length), suffix=f"/{k}")
        for k in range(n)
    ]


def center_sequence(seq: ScanSequence) -> tuple[ScanSequence, np.ndarray]:
    """Subtract the (y, z) centroid of all points in all frames.

    Velocity is untouched; labels move with the points. The removed offset is
    accumulated on the returned sequence.
    """
    if not seq.frames or sum(len(f) for f in seq.frames) == 0:
        raise ValueError("cannot center an empty sequence")
    allpts = np.concatenate([f.points[:, :2] for f in seq.frames])
    mu = allpts.mean(axis=0)
    frames = []
    for f in seq.frames:
        pts = f.points.copy()
        pts[:, :2] -= mu
        frames.append(PointCloudFrame(pts, f.timestamp, dict(f.meta)))
    centers = None if seq.centers is None else seq.centers - mu
    return replace(seq, frames=frames, centers=centers, offset=seq.offset + mu), mu


def normalize_point_count(frame: PointCloudFrame, n: int, rng: np.random.Generator) -> PointCloudFrame:
    """Subsample without replacement or pad by resampling to exactly ``n`` points."""
    count = len(frame)
    if count == 0:
        raise ValueError("cannot normalize an empty frame")
    if count == n:
        return frame
    if count > n:
        idx = np.sort(rng.choice(count, size=n, replace=False))
    else:
        extra = rng.choice(count, size=n - count, replace=True)
        idx = np.concatenate([np.arange(count), extra])
    return PointCloudFrame(frame.points[idx], frame.timestamp, dict(frame.meta))


def split_dataset(
    ids: Sequence[str], ratios: tuple[float, float, float] = (0.7, 0.2, 0.1), seed: int = 0
) -> SplitSpec:
    """Deterministic shuffled partition of sequence ids into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    ids = sorted(ids)
    nonzero = sum(r > 0 for r in ratios)
    if len(ids) < nonzero:
        raise ValueError(f"need at least {nonzero} sequences to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train = int(round(ratios[0] * len(ids)))
    n_val = int(round(ratios[1] * len(ids)))
    n_train = min(n_train, len(ids))
    n_val = min(n_val, len(ids) - n_train)
    return SplitSpec(
        train=shuffled[:n_train],
        val=shuffled[n_train:n_train + n_val],
        test=shuffled[n_train + n_val:],
        ratios=tuple(ratios),
        seed=seed,
    )


def event_root(event_id: str) -> str:
    """Recording id an event (chunk) came from; splits never separate these."""
    return event_id.split("/")[0]


# -- dataset files ---------------------------------------------------------


def write_frame_csv(path: Path, points: np.ndarray) -> None:
    buf = io.StringIO()
    buf.write("y,z,vr\n")
    for y, z, vr in points:
        buf.write(f"{y:.9g},{z:.9g},{vr:.9g}\n")
    Path(path).write_text(buf.getvalue())


def read_frame_csv(path: Path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "y,z,vr":
            raise ValueError(f"{path}: unexpected header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    return data.reshape(-1, 3)


def dump_json(path: Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_recording(seq_dir: Path) -> ScanSequence:
    seq_dir = Path(seq_dir)
    manifest = json.loads((seq_dir / "manifest.json").read_text())
    frames = [
        PointCloudFrame(read_frame_csv(seq_dir / f"frame_{k}.csv"), t)
        for k, t in enumerate(manifest["timestamps"])
    ]
    return ScanSequence(
        frames=frames,
        event_id=manifest["sequence_id"],
        class_id=manifest.get("class_id"),
        centers=manifest.get("centers"),
    )


def load_dataset(root: Path) -> list[ScanSequence]:
    """All recordings under ``root`` in sorted order."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no sequences under {root}")
    return [load_recording(d) for d in dirs]


def load_oracle(root: Path) -> dict:
    return json.loads((Path(root) / "_oracle" / "labels.json").read_text())


def prepare_sequences(
    recordings: Iterable[ScanSequence],
    n_points: int,
    seed: int,
    center: bool = True,
    length: int = SEQUENCE_LENGTH,
) -> list[ScanSequence]:
    """Chunk recordings to ``length`` frames, fix the point count and center."""
    out = []
    for rec in recordings:
        if len(rec) < length:
            continue
        check_timing(rec.frames)
        for chunk in chunk_sequences(rec, length):
            # point selection is keyed by the event id, not by list position
            digest = hashlib.sha256(chunk.event_id.encode()).digest()
            rng = np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])
            frames = [normalize_point_count(f, n_points, rng) for f in chunk.frames]
            chunk = replace(chunk, frames=frames)
            if center:
                chunk, _ = center_sequence(chunk)
            out.append(chunk)
    return out


# -- checkpoints -----------------------------------------------------------

_MAGIC = b"VXCK"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    hyper: dict
    step: int
    seed: int


def save_checkpoint(path: Path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": "vxck", "version": 1, "hyper": ckpt.hyper, "step": ckpt.step,
         "seed": ckpt.seed, "tensors": entries},
        sort_keys=True,
    ).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path: Path, expected_names: Iterable[str] | None = None) -> Checkpoint:
    """Read a checkpoint, verifying every tensor before returning any of them."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 12:
        raise CheckpointError(f"{path}: not a vxck checkpoint")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"] or hashlib.sha256(chunk).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    if expected_names is not None:
        missing = set(expected_names) - set(tensors)
        extra = set(tensors) - set(expected_names)
        if missing or extra:
            raise CheckpointError(
                f"{path}: tensor names do not match architecture "
                f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
            )
    return Checkpoint(tensors=tensors, hyper=header["hyper"], step=header["step"], seed=header["seed"])


# -- metric logs -----------------------------------------------------------


def format_metric(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_metrics(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([format_metric(row[c]) for c in METRIC_COLUMNS])


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({
            "epoch": int(row["epoch"]),
            "split": row["split"],
            **{k: float(row[k]) for k in ("loss", "alignment", "uniformity", "lr")},
        })
    return out


def write_table(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_metric(v) for v in row])


def with_exact_centers(seqs: Sequence[ScanSequence], oracle: dict, length: int = SEQUENCE_LENGTH) -> list[ScanSequence]:
    """Replace (possibly noisy) manifest labels by the sealed exact centers.

    The sealed labels are absolute; each sequence's accumulated ``offset`` is
    subtracted so they live in the same coordinates as its points.
    """
    out = []
    for seq in seqs:
        root, _, chunk = seq.event_id.partition("/")
        truth = np.asarray(oracle[root]["centers"], dtype=np.float64)
        if chunk:
            k = int(chunk)
            truth = truth[k * length:(k + 1) * length]
        out.append(replace(seq, centers=truth - seq.offset, class_id=oracle[root]["class_id"]))
    return out
