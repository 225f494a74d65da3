"""Benchmark construction and the four experiment harnesses.

Each harness returns an ``ExperimentReport`` whose rows carry the seeds and
the hash of the resolved configuration, and can be written as a CSV table.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import baselines as B
from . import contrastive as C
from . import data
from . import finetune as F
from . import model as M
from . import sim
from .augment import AugmentConfig
from .data import ScanSequence
from .evaluation import ProbeConfig, forecast_rmse, linear_probe, rmse_centers

ABLATIONS = (
    "w/o temporal subsampling",
    "w/o spatial masking",
    "w/o altitude centering",
    "w/o LSTM (mean pooling)",
)
FULL = "full model"


def config_hash(obj) -> str:
    """Short sha256 of the canonical JSON form of a config dict."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if hasattr(x, "__dataclass_fields__"):
        return asdict(x)
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not serializable: {type(x)}")


# -- configuration -----------------------------------------------------------


@dataclass
class BenchmarkConfig:
    n_unlabeled: int = 2000
    n_labeled: int = 400
    n_points: int = 1024
    # noise on the manifest labels; evaluation always uses the exact centers
    label_noise: float = 8.0
    sim_seed: int = 0
    split_seed: int = 0
    seeds: tuple = (0, 1, 2)
    fractions: tuple = (0.01, 0.1, 1.0)
    encoder: M.EncoderConfig = field(default_factory=M.EncoderConfig)
    pretrain: C.PretrainConfig = field(default_factory=C.PretrainConfig)
    # head-only localization; lr picked on validation for both X-VORTEX and the from-scratch model
    localize: F.FinetuneConfig = field(
        default_factory=lambda: F.FinetuneConfig(epochs=100, lr=1e-2, min_steps=1000, train_temporal=False)
    )
    forecast: F.FinetuneConfig = field(default_factory=lambda: F.FinetuneConfig(epochs=100, lr=3e-3, min_steps=1000))
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    dbscan: B.DbscanConfig = field(default_factory=B.DbscanConfig)
    kalman_grid: tuple = ((0.1, 0.5, 2.0, 8.0), (1.0, 4.0, 16.0, 64.0))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=_jsonable))

    @classmethod
    def from_dict(cls, values: dict) -> "BenchmarkConfig":
        values = dict(values)
        nested = {
            "encoder": M.EncoderConfig.from_dict,
            "pretrain": _pretrain_from_dict,
            "localize": lambda v: F.FinetuneConfig(**v),
            "forecast": lambda v: F.FinetuneConfig(**v),
            "probe": lambda v: ProbeConfig(**v),
            "dbscan": lambda v: B.DbscanConfig(**v),
        }
        for key, build in nested.items():
            if isinstance(values.get(key), dict):
                values[key] = build(values[key])
        for key in ("seeds", "fractions"):
            if key in values:
                values[key] = tuple(values[key])
        if "kalman_grid" in values:
            values["kalman_grid"] = tuple(tuple(g) for g in values["kalman_grid"])
        return cls(**values)


def _pretrain_from_dict(values: dict) -> C.PretrainConfig:
    values = dict(values)
    if isinstance(values.get("augment"), dict):
        values["augment"] = AugmentConfig(**values["augment"])
    return C.PretrainConfig(**values)


# -- benchmark data ----------------------------------------------------------


@dataclass
class Benchmark:
    """Prepared splits. Labeled train/val carry manifest labels, test carries exact ones."""

    unlabeled_train: list[ScanSequence]
    unlabeled_val: list[ScanSequence]
    train: list[ScanSequence]
    val: list[ScanSequence]
    test: list[ScanSequence]
    test_observed: list[ScanSequence]
    centered: bool = True


def simulate_recordings(n: int, seed: int, label_noise: float = 0.0, sim_config: sim.SimConfig | None = None):
    """In-memory recordings plus the sealed-label mapping used by ``with_exact_centers``."""
    cfg = replace(sim_config or sim.SimConfig(), n_sequences=n, seed=seed, label_noise_sigma=label_noise)
    recs, oracle = [], {}
    for i in range(n):
        scenario, frames, truth, observed = sim.simulate_sequence(cfg, i)
        seq_id = f"seq_{i:05d}"
        recs.append(ScanSequence(frames, seq_id, scenario.class_id, observed))
        oracle[seq_id] = {"class_id": scenario.class_id, "centers": truth.tolist()}
    return recs, oracle


def _pick(seqs, ids):
    ids = set(ids)
    return [s for s in seqs if data.event_root(s.event_id) in ids]


def unlabeled_splits(recordings: Sequence[ScanSequence], n_points: int, split_seed: int = 0, center: bool = True):
    """(train, val) for pre-training; the 10% test share is left unused."""
    seqs = data.prepare_sequences(recordings, n_points, split_seed, center=center)
    spec = data.split_dataset(sorted({data.event_root(s.event_id) for s in seqs}), seed=split_seed)
    return _pick(seqs, spec.train), _pick(seqs, spec.val)


def labeled_splits(
    recordings: Sequence[ScanSequence],
    oracle: dict | None,
    n_points: int,
    split_seed: int = 0,
    center: bool = True,
):
    """(train, val, test, test_observed); test gets sealed labels when available."""
    seqs = data.prepare_sequences(recordings, n_points, split_seed, center=center)
    spec = data.split_dataset(sorted({data.event_root(s.event_id) for s in seqs}), seed=split_seed + 1)
    test_obs = _pick(seqs, spec.test)
    test = data.with_exact_centers(test_obs, oracle) if oracle else test_obs
    return _pick(seqs, spec.train), _pick(seqs, spec.val), test, test_obs


def build_benchmark(
    unlabeled: Sequence[ScanSequence],
    labeled: Sequence[ScanSequence],
    oracle: dict,
    n_points: int,
    split_seed: int = 0,
    center: bool = True,
) -> Benchmark:
    """Chunk, normalize and split; splits are by recording, never by frame."""
    utrain, uval = unlabeled_splits(unlabeled, n_points, split_seed, center)
    train, val, test, test_obs = labeled_splits(labeled, oracle, n_points, split_seed, center)
    return Benchmark(utrain, uval, train, val, test, test_obs, centered=center)


def simulate_benchmark(cfg: BenchmarkConfig, center: bool = True, sim_config: sim.SimConfig | None = None) -> Benchmark:
    unl, _ = simulate_recordings(cfg.n_unlabeled, cfg.sim_seed, sim_config=sim_config)
    lab, oracle = simulate_recordings(cfg.n_labeled, cfg.sim_seed + 1, cfg.label_noise, sim_config)
    return build_benchmark(unl, lab, oracle, cfg.n_points, cfg.split_seed, center)


# -- reports -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    experiment: str
    config: dict
    rows: list[dict]
    csv_path: str | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def write(self, path: Path) -> Path:
        path = Path(path)
        if not self.rows:
            raise ValueError("report has no rows")
        header = list(self.rows[0])
        data.write_table(path, header, [[r[k] for k in header] for r in self.rows])
        self.csv_path = str(path)
        return path


def _joined(values) -> str:
    return ";".join(data.format_metric(float(v)) for v in values)


def _median(values) -> float:
    return float(np.median(np.asarray(values, dtype=np.float64)))


# -- single-seed pipeline pieces ---------------------------------------------


def pretrain_model(bench: Benchmark, cfg: BenchmarkConfig, seed: int, encoder=None, augment=None) -> C.PretrainResult:
    pcfg = replace(cfg.pretrain, seed=seed, augment=augment or cfg.pretrain.augment)
    return C.pretrain(bench.unlabeled_train, bench.unlabeled_val, pcfg, encoder or cfg.encoder)


def localization_rmse(model: M.Model, bench: Benchmark, cfg: BenchmarkConfig, seed: int, fraction: float = 1.0) -> float:
    """Fine-tune the localization head (and the LSTM if configured) on a label fraction; test RMSE in meters."""
    fcfg = replace(cfg.localize, seed=seed)
    tuned, _ = F.finetune_localization(model, B.select_fraction(bench.train, fraction, seed), fcfg, bench.val)
    return rmse_centers(F.predict_centers(tuned, bench.test), last_centers(bench.test))


def supervised_rmse(bench: Benchmark, cfg: BenchmarkConfig, seed: int, fraction: float) -> float:
    model, _ = B.supervised_from_scratch(bench.train, fraction, cfg.encoder, replace(cfg.localize, seed=seed), bench.val)
    return rmse_centers(F.predict_centers(model, bench.test), last_centers(bench.test))


def forecast_model_rmse(model: M.Model, bench: Benchmark, cfg: BenchmarkConfig, seed: int) -> tuple[float, float]:
    fcfg = replace(cfg.forecast, seed=seed)
    tuned, _ = F.finetune_forecast(model, bench.train, fcfg, bench.val, center=bench.centered)
    return forecast_rmse(F.predict_forecast(tuned, bench.test, center=bench.centered), future_centers(bench.test))


def last_centers(seqs: Sequence[ScanSequence]) -> np.ndarray:
    return np.stack([s.centers[-1] for s in seqs])


def future_centers(seqs: Sequence[ScanSequence]) -> np.ndarray:
    """Absolute t+1, t+2 centers (S, 2, 2, 2) after a 3-frame history."""
    return np.stack([s.centers[F.HISTORY:F.HISTORY + 2] + s.offset for s in seqs])


def center_histories(seqs: Sequence[ScanSequence]) -> np.ndarray:
    """Absolute label histories (S, 3, 2, 2) for trajectory-only forecasters."""
    return np.stack([s.centers[:F.HISTORY] + s.offset for s in seqs])


def heuristic_rmse(bench: Benchmark, cfg: BenchmarkConfig) -> dict[str, float]:
    gt = last_centers(bench.test)
    db = np.stack([B.dbscan_centers(s.frames[-1], cfg.dbscan) for s in bench.test])
    ic = np.stack([B.intensity_centroid(s.frames[-1]) for s in bench.test])
    return {"DBSCAN": rmse_centers(db, gt), "Intensity centroid": rmse_centers(ic, gt)}


def tune_kalman(histories: np.ndarray, futures: np.ndarray, grid) -> B.KalmanConfig:
    """Grid search of (q, r) on validation tracks by summed t+1, t+2 RMSE."""
    best = None
    for q in grid[0]:
        for r in grid[1]:
            kcfg = B.KalmanConfig(q=q, r=r)
            pred = np.stack([B.kalman_forecast(h, kcfg) for h in histories])
            score = sum(forecast_rmse(pred, futures))
            if best is None or score < best[0]:
                best = (score, kcfg)
    return best[1]


def ground_effect_fraction(seqs: Sequence[ScanSequence], catalog=sim.DEFAULT_CATALOG) -> float:
    """Share of sequences whose last true centers sit in ground effect (nominal wingspan)."""
    flags = [
        (s.centers[-1] + s.offset)[:, 1].min() < sim.GROUND_EFFECT_HEIGHT * catalog[s.class_id].wingspan
        for s in seqs
    ]
    return float(np.mean(flags))


def embed_frames(model: M.Model, seqs: Sequence[ScanSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame spatial features and the frame's sequence index."""
    P = model.tensors()
    feats, owner = [], []
    for i in range(0, len(seqs), 32):
        pts, lengths = M.batch_points(seqs[i:i + 32])
        feats.append(M.encode_frames(pts, P, model.cfg).data)
        owner.append(np.repeat(np.arange(i, i + len(lengths)), lengths))
    return np.concatenate(feats), np.concatenate(owner)


# -- harnesses -------------------------------------------------------------------


def probe_experiment(
    bench: Benchmark,
    cfg: BenchmarkConfig,
    pretrained: dict[int, M.Model],
    n_classes: int = 4,
) -> ExperimentReport:
    """Linear probes on frozen features: pretrained vs random-init vs frame-level spatial."""
    ytr = np.array([s.class_id for s in bench.train])
    yte = np.array([s.class_id for s in bench.test])
    acc = {"X-VORTEX (sequence)": [], "Random init (sequence)": [], "Spatial only (frame)": []}
    checks = {}
    for seed, model in pretrained.items():
        before = M.params_checksum(model.params)
        pcfg = replace(cfg.probe, seed=seed)
        acc["X-VORTEX (sequence)"].append(linear_probe(model.embed(bench.train), ytr, model.embed(bench.test), yte, n_classes, pcfg))
        rand = M.Model.create(model.cfg, seed)
        acc["Random init (sequence)"].append(linear_probe(rand.embed(bench.train), ytr, rand.embed(bench.test), yte, n_classes, pcfg))
        ftr, otr = embed_frames(model, bench.train)
        fte, ote = embed_frames(model, bench.test)
        acc["Spatial only (frame)"].append(linear_probe(ftr, ytr[otr], fte, yte[ote], n_classes, pcfg))
        if M.params_checksum(model.params) != before:
            raise RuntimeError("linear probe modified encoder parameters")
        checks[seed] = before[:16]
    seeds = list(pretrained)
    h = config_hash(cfg.to_dict())
    rows = [
        {"method": name, "input_view": name.split("(")[1].rstrip(")"), "accuracy_median": _median(v),
         "accuracy_per_seed": _joined(v), "seeds": ";".join(map(str, seeds)), "config_hash": h}
        for name, v in acc.items()
    ]
    return ExperimentReport("table1_probe", {**cfg.to_dict(), "checkpoints": checks}, rows)


def label_fraction_experiment(
    bench: Benchmark,
    cfg: BenchmarkConfig,
    pretrained: dict[int, M.Model],
    fractions: Sequence[float] | None = None,
) -> ExperimentReport:
    """Center RMSE per (method, label fraction); heuristics need no labels."""
    if not pretrained:
        raise ValueError("label-fraction experiment needs a pretrained checkpoint")
    fractions = tuple(fractions or cfg.fractions)
    heur = heuristic_rmse(bench, cfg)
    seeds = list(pretrained)
    h = config_hash(cfg.to_dict())
    rows = []
    for frac in fractions:
        n_lab = len(B.select_fraction(bench.train, frac, seeds[0]))
        sup = [supervised_rmse(bench, cfg, s, frac) for s in seeds]
        xv = [localization_rmse(pretrained[s], bench, cfg, s, frac) for s in seeds]
        cells = [(name, [v] * len(seeds)) for name, v in heur.items()]
        cells += [("Supervised from scratch", sup), ("X-VORTEX", xv)]
        best_baseline = min(_median(v) for name, v in cells if name != "X-VORTEX")
        for name, vals in cells:
            rows.append({
                "method": name, "fraction": frac, "n_labeled": n_lab, "rmse_median": _median(vals),
                "rmse_per_seed": _joined(vals),
                "delta_vs_best_baseline": _median(vals) - best_baseline if name == "X-VORTEX" else "",
                "seeds": ";".join(map(str, seeds)), "config_hash": h,
            })
    return ExperimentReport("table2_label_efficiency", cfg.to_dict(), rows)


def forecast_eval(method: Callable[[Sequence[ScanSequence]], np.ndarray], seqs: Sequence[ScanSequence]) -> tuple[float, float]:
    """RMSE at t+1 and t+2 in absolute coordinates for any forecaster."""
    short = [s.event_id for s in seqs if len(s) < F.HISTORY + 2]
    if short:
        raise ValueError(f"sequences shorter than history + horizon: {short[:3]}")
    return forecast_rmse(method(seqs), future_centers(seqs))


def forecast_experiment(
    bench: Benchmark,
    cfg: BenchmarkConfig,
    pretrained: dict[int, M.Model],
) -> ExperimentReport:
    """Two-step forecasts: CV and Kalman on label tracks, trajectory LSTM, X-VORTEX on scans."""
    observed = {s.event_id: s for s in bench.test_observed}

    def track(seqs):
        return center_histories([observed.get(s.event_id, s) for s in seqs])

    kcfg = tune_kalman(center_histories(bench.val), future_centers(bench.val), cfg.kalman_grid)
    seeds = list(pretrained)
    res = {
        "Constant velocity": [forecast_eval(lambda q: np.stack([B.constant_velocity_forecast(h) for h in track(q)]), bench.test)] * len(seeds),
        "Kalman": [forecast_eval(lambda q: np.stack([B.kalman_forecast(h, kcfg) for h in track(q)]), bench.test)] * len(seeds),
        "Trajectory LSTM": [],
        "X-VORTEX": [],
    }
    for s in seeds:
        traj = B.TrajectoryForecaster(seed=s)
        traj.fit(center_histories(bench.train), future_centers(bench.train))
        res["Trajectory LSTM"].append(forecast_eval(lambda q: traj.predict(track(q)), bench.test))
        res["X-VORTEX"].append(forecast_model_rmse(pretrained[s], bench, cfg, s))
    ground = ground_effect_fraction(bench.test)
    h = config_hash(cfg.to_dict())
    best = {k: min(_median([v[k] for v in vals]) for name, vals in res.items() if name != "X-VORTEX") for k in (0, 1)}
    rows = []
    for name, vals in res.items():
        t1, t2 = _median([v[0] for v in vals]), _median([v[1] for v in vals])
        rows.append({
            "method": name, "rmse_t1": t1, "rmse_t2": t2,
            "rmse_t1_per_seed": _joined(v[0] for v in vals), "rmse_t2_per_seed": _joined(v[1] for v in vals),
            "delta_t1_vs_best_baseline": t1 - best[0] if name == "X-VORTEX" else "",
            "delta_t2_vs_best_baseline": t2 - best[1] if name == "X-VORTEX" else "",
            "seeds": ";".join(map(str, seeds)), "config_hash": h,
        })
    config = {**cfg.to_dict(), "kalman_tuned": asdict(kcfg), "test_ground_effect_fraction": float(ground)}
    return ExperimentReport("table3_forecast", config, rows)


def ablation_configs(cfg: BenchmarkConfig) -> dict[str, tuple[M.EncoderConfig, AugmentConfig, bool]]:
    """(encoder config, augmentation, centering) for the full model and each ablation."""
    aug = cfg.pretrain.augment
    mean_enc = replace(cfg.encoder, aggregator="mean", hidden=cfg.encoder.spatial_dim)
    return {
        FULL: (cfg.encoder, aug, True),
        ABLATIONS[0]: (cfg.encoder, replace(aug, min_frames_kept=data.SEQUENCE_LENGTH), True),
        ABLATIONS[1]: (cfg.encoder, replace(aug, dropout_p=0.0), True),
        ABLATIONS[2]: (cfg.encoder, aug, False),
        ABLATIONS[3]: (mean_enc, aug, True),
    }


@dataclass
class PipelineResult:
    pretrain: C.PretrainResult
    center_rmse: float
    forecast_rmse: tuple[float, float]


def run_pipeline(bench: Benchmark, cfg: BenchmarkConfig, seed: int, encoder=None, augment=None) -> PipelineResult:
    """Pre-train, then fine-tune localization (all labels) and forecasting."""
    res = pretrain_model(bench, cfg, seed, encoder, augment)
    return PipelineResult(
        res, localization_rmse(res.model, bench, cfg, seed), forecast_model_rmse(res.model, bench, cfg, seed)
    )


def ablation_suite(
    benches: dict[bool, Benchmark],
    cfg: BenchmarkConfig,
    full: dict[int, PipelineResult] | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[ExperimentReport, dict[str, dict[int, PipelineResult]]]:
    """Full model plus the four ablations with shared seeds.

    ``benches`` maps the centering flag to prepared data. Already computed
    full-model results can be passed in and are reused as the full row.
    """
    results: dict[str, dict[int, PipelineResult]] = {}
    for name, (enc, aug, center) in ablation_configs(cfg).items():
        results[name] = {}
        for seed in cfg.seeds:
            if name == FULL and full and seed in full:
                results[name][seed] = full[seed]
                continue
            results[name][seed] = run_pipeline(benches[center], cfg, seed, enc, aug)
            if log:
                r = results[name][seed]
                log(f"{name} seed={seed} center={r.center_rmse:.2f} t1={r.forecast_rmse[0]:.2f}")
    h = config_hash(cfg.to_dict())
    base_c = _median([r.center_rmse for r in results[FULL].values()])
    base_f = _median([r.forecast_rmse[0] for r in results[FULL].values()])
    rows = []
    for name, per_seed in results.items():
        c = [r.center_rmse for r in per_seed.values()]
        f = [r.forecast_rmse[0] for r in per_seed.values()]
        rows.append({
            "variant": name, "center_rmse": _median(c), "forecast_rmse_t1": _median(f),
            "delta_center": _median(c) - base_c, "delta_forecast_t1": _median(f) - base_f,
            "center_per_seed": _joined(c), "forecast_t1_per_seed": _joined(f),
            "seeds": ";".join(map(str, cfg.seeds)), "config_hash": h,
        })
    return ExperimentReport("table4_ablation", cfg.to_dict(), rows), results
