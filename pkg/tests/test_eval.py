import math
from dataclasses import replace

import numpy as np
import pytest

from vortexlab import baselines as B
from vortexlab import contrastive as C
from vortexlab import experiments as X
from vortexlab import finetune as F
from vortexlab import model as M
from vortexlab import sim
from vortexlab.data import PointCloudFrame, ScanSequence
from vortexlab.evaluation import ProbeConfig, forecast_rmse, linear_probe, matched_sq_errors, rmse_centers


def test_rmse_examples():
    a = np.array([[[10.0, 50.0], [-10.0, 50.0]]])
    assert rmse_centers(a, a) == 0.0
    assert rmse_centers(a + [[3.0, 4.0], [3.0, 4.0]], a) == pytest.approx(5.0, abs=1e-12)
    labels = np.zeros((2, 2, 2))
    preds = np.array([[[0.0, 0.0], [0.0, 0.0]], [[3.0, 4.0], [-4.0, 3.0]]])
    assert rmse_centers(preds, labels) == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_rmse_pair_symmetry():
    rng = np.random.default_rng(0)
    p, g = rng.normal(0, 30, (20, 2, 2)), rng.normal(0, 30, (20, 2, 2))
    assert rmse_centers(p[:, ::-1], g) == rmse_centers(p, g)
    swapped = matched_sq_errors(g[:, ::-1], g)
    assert np.all(swapped == 0.0)
    with pytest.raises(ValueError):
        rmse_centers(p[:3], g)


def linear_seq(rng, event_id="seq_00000/0"):
    start = rng.uniform(-80, 80, size=(2, 2))
    vel = rng.normal(0, 4, size=(2, 2))
    centers = start + np.arange(5)[:, None, None] * vel
    frames = [PointCloudFrame(rng.normal(0, 50, size=(8, 3)), 6.0 * k) for k in range(5)]
    return ScanSequence(frames, event_id, 0, centers)


def cv_method(seqs):
    return np.stack([B.constant_velocity_forecast(X.center_histories([s])[0]) for s in seqs])


def test_forecast_eval_oracle_and_linear_tracks():
    rng = np.random.default_rng(1)
    seqs = [linear_seq(rng, f"seq_{i:05d}/0") for i in range(10)]
    assert X.forecast_eval(lambda q: X.future_centers(q), seqs) == (0.0, 0.0)
    t1, t2 = X.forecast_eval(cv_method, seqs)
    assert t1 < 1e-9 and t2 < 1e-9
    with pytest.raises(ValueError):
        X.forecast_eval(cv_method, [seqs[0].subsequence(range(4))])


def test_cv_degrades_with_horizon_on_simulated_tracks():
    cfg = sim.SimConfig(n_frames=5, seed=11)
    seqs = []
    for i in range(40):
        _, frames, truth, _ = sim.simulate_sequence(cfg, i)
        seqs.append(ScanSequence(frames, f"seq_{i:05d}", 0, truth))
    t1, t2 = X.forecast_eval(cv_method, seqs)
    assert 0 < t1 < t2


def test_forecast_rmse_shape_check():
    with pytest.raises(ValueError):
        forecast_rmse(np.zeros((3, 2, 2, 2)), np.zeros((2, 2, 2, 2)))


def test_probe_separable_is_perfect():
    rng = np.random.default_rng(2)
    y = np.repeat(np.arange(4), 30)
    x = np.eye(4)[y] * 5 + rng.normal(0, 0.1, size=(120, 4))
    assert linear_probe(x[::2], y[::2], x[1::2], y[1::2], 4) == 100.0


def test_probe_shuffled_labels_near_chance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(600, 16))
    y = np.repeat(np.arange(4), 150)
    accs = []
    for k in range(20):
        perm = np.random.default_rng(k).permutation(y)
        accs.append(linear_probe(x[:400], perm[:400], x[400:], perm[400:], 4, ProbeConfig(epochs=100)))
    assert all(15.0 <= a <= 35.0 for a in accs)


def test_probe_single_class_rejected():
    with pytest.raises(ValueError):
        linear_probe(np.ones((5, 2)), np.zeros(5), np.ones((2, 2)), np.zeros(2), 4)


def test_config_hash():
    cfg = X.BenchmarkConfig()
    assert X.config_hash(cfg.to_dict()) == X.config_hash(X.BenchmarkConfig().to_dict())
    assert X.config_hash(cfg.to_dict()) != X.config_hash(replace(cfg, n_points=512).to_dict())
    assert X.BenchmarkConfig.from_dict(cfg.to_dict()) == cfg


def test_ablation_configs_change_one_thing():
    cfg = X.BenchmarkConfig()
    variants = X.ablation_configs(cfg)
    assert list(variants) == [X.FULL, *X.ABLATIONS]
    enc, aug, center = variants[X.FULL]
    assert variants[X.ABLATIONS[0]] == (enc, replace(aug, min_frames_kept=5), True)
    assert variants[X.ABLATIONS[1]] == (enc, replace(aug, dropout_p=0.0), True)
    assert variants[X.ABLATIONS[2]] == (enc, aug, False)
    mean_enc = variants[X.ABLATIONS[3]][0]
    assert mean_enc.aggregator == "mean" and mean_enc.hidden == enc.spatial_dim


def test_tune_kalman_prefers_heavy_smoothing_for_noisy_tracks():
    rng = np.random.default_rng(4)
    hist, fut = [], []
    for _ in range(60):
        start, vel = rng.uniform(-50, 50, (2, 2)), rng.normal(0, 3, (2, 2))
        track = start + np.arange(5)[:, None, None] * vel
        hist.append(track[:3] + rng.normal(0, 8.0, (3, 2, 2)))
        fut.append(track[3:])
    kcfg = X.tune_kalman(np.stack(hist), np.stack(fut), ((0.1, 8.0), (1.0, 64.0)))
    assert kcfg.r == 64.0


TINY_ENC = M.EncoderConfig(point_widths=(8, 16), hidden=16, proj_widths=(8, 4), center_hidden=8, forecast_hidden=8)


@pytest.fixture(scope="module")
def tiny():
    cfg = X.BenchmarkConfig(
        n_unlabeled=30, n_labeled=60, n_points=32, seeds=(0, 1), fractions=(0.1, 1.0), encoder=TINY_ENC,
        pretrain=C.PretrainConfig(epochs=2, batch_size=8),
        localize=F.FinetuneConfig(epochs=2, min_steps=4), forecast=F.FinetuneConfig(epochs=2),
        probe=ProbeConfig(epochs=20),
    )
    benches = {True: X.simulate_benchmark(cfg), False: X.simulate_benchmark(cfg, center=False)}
    return cfg, benches


def test_benchmark_splits(tiny):
    cfg, benches = tiny
    b = benches[True]
    assert (len(b.unlabeled_train), len(b.unlabeled_val)) == (21, 6)
    assert (len(b.train), len(b.val), len(b.test)) == (42, 12, 6)
    roots = [{s.event_id for s in part} for part in (b.train, b.val, b.test)]
    assert not (roots[0] & roots[1] or roots[0] & roots[2] or roots[1] & roots[2])
    # test labels are exact, the manifest copies are noisy
    assert not np.allclose(b.test[0].centers, b.test_observed[0].centers)
    assert np.array_equal(b.test[0].frames[0].points, b.test_observed[0].frames[0].points)
    assert all(np.all(s.offset == 0) for s in benches[False].train)


def test_label_fraction_report(tiny, tmp_path):
    cfg, benches = tiny
    pre = {s: X.pretrain_model(benches[True], cfg, s).model for s in cfg.seeds}
    rep = X.label_fraction_experiment(benches[True], cfg, pre)
    heur = [r for r in rep.rows if r["method"] in ("DBSCAN", "Intensity centroid")]
    by_method = {}
    for r in heur:
        by_method.setdefault(r["method"], set()).add(r["rmse_median"])
    assert all(len(v) == 1 for v in by_method.values())
    assert {r["fraction"] for r in rep.rows} == {0.1, 1.0}
    xv = [r for r in rep.rows if r["method"] == "X-VORTEX"]
    assert all(isinstance(r["delta_vs_best_baseline"], float) for r in xv)
    a = rep.write(tmp_path / "a.csv").read_bytes()
    b = X.label_fraction_experiment(benches[True], cfg, pre).write(tmp_path / "b.csv").read_bytes()
    assert a == b
    with pytest.raises(ValueError):
        X.label_fraction_experiment(benches[True], cfg, {})


def test_probe_report_leaves_encoder_untouched(tiny):
    cfg, benches = tiny
    model = X.pretrain_model(benches[True], cfg, 0).model
    before = M.params_checksum(model.params)
    rep = X.probe_experiment(benches[True], cfg, {0: model})
    assert M.params_checksum(model.params) == before
    assert [r["input_view"] for r in rep.rows] == ["sequence", "sequence", "frame"]
    assert all(0 <= r["accuracy_median"] <= 100 for r in rep.rows)


def test_forecast_report(tiny):
    cfg, benches = tiny
    pre = {0: X.pretrain_model(benches[True], cfg, 0).model}
    rep = X.forecast_experiment(benches[True], replace(cfg, seeds=(0,)), pre)
    assert [r["method"] for r in rep.rows] == ["Constant velocity", "Kalman", "Trajectory LSTM", "X-VORTEX"]
    assert all(r["rmse_t1"] > 0 and r["rmse_t2"] > 0 for r in rep.rows)
    assert 0 <= rep.config["test_ground_effect_fraction"] <= 1


def test_ablation_full_row_matches_standalone(tiny):
    cfg, benches = tiny
    cfg = replace(cfg, seeds=(0,))
    rep, results = X.ablation_suite(benches, cfg)
    alone = X.run_pipeline(benches[True], cfg, 0)
    full = rep.rows[0]
    assert full["variant"] == X.FULL and full["delta_center"] == 0.0
    assert full["center_rmse"] == alone.center_rmse
    assert full["forecast_rmse_t1"] == alone.forecast_rmse[0]
    assert [r["variant"] for r in rep.rows[1:]] == list(X.ABLATIONS)


def test_ground_effect_fraction():
    low = ScanSequence([PointCloudFrame(np.zeros((1, 3)), 0.0)], "a", 0, np.array([[[10.0, 5.0], [-10.0, 5.0]]]))
    high = replace(low, centers=np.array([[[10.0, 500.0], [-10.0, 500.0]]]))
    assert X.ground_effect_fraction([low, high]) == 0.5
