import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexlab import baselines as B
from vortexlab import model as M
from vortexlab.data import PointCloudFrame, ScanSequence
from vortexlab.finetune import FinetuneConfig


def brute_dbscan_partition(points, eps, min_pts):
    """Core clusters as a set of frozensets, via O(n^2) reachability."""
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    core = (d <= eps).sum(axis=1) >= min_pts
    seen, clusters = set(), set()
    for i in np.flatnonzero(core):
        if i in seen:
            continue
        stack, comp = [i], set()
        while stack:
            j = stack.pop()
            if j in comp:
                continue
            comp.add(j)
            stack.extend(k for k in np.flatnonzero((d[j] <= eps) & core) if k not in comp)
        seen |= comp
        clusters.add(frozenset(int(x) for x in comp))
    return core, clusters


def label_partition(labels, idx):
    groups = {}
    for i in idx:
        groups.setdefault(labels[i], set()).add(int(i))
    return {frozenset(g) for g in groups.values()}


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 50), min_pts=st.integers(1, 6))
def test_dbscan_matches_bruteforce_and_is_order_free(seed, n, min_pts):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 30, size=(n, 2))
    eps = 4.0
    labels = B.dbscan(pts, eps, min_pts)
    core, clusters = brute_dbscan_partition(pts, eps, min_pts)
    assert label_partition(labels, np.flatnonzero(core)) == clusters
    perm = rng.permutation(n)
    relabeled = B.dbscan(pts[perm], eps, min_pts)
    back = np.empty_like(relabeled)
    back[perm] = relabeled
    assert np.array_equal(back, labels)


def test_dbscan_two_blobs():
    rng = np.random.default_rng(0)
    a = rng.normal([0, 0], 1.0, size=(25, 2))
    b = rng.normal([60, 10], 1.0, size=(25, 2))
    frame = PointCloudFrame(np.column_stack([np.vstack([a, b]), np.full(50, 3.0)]), 0.0)
    cents = B.dbscan_centers(frame, B.DbscanConfig(eps=4.0, min_pts=5))
    assert np.allclose(cents[0], b.mean(axis=0), atol=1e-9)
    assert np.allclose(cents[1], a.mean(axis=0), atol=1e-9)


def test_dbscan_fallbacks():
    pts = np.random.default_rng(1).uniform(0, 100, size=(40, 3))
    weak = pts.copy()
    weak[:, 2] = 0.5
    cents = B.dbscan_centers(PointCloudFrame(weak, 0.0))
    assert np.allclose(cents, np.repeat(weak[:, :2].mean(axis=0)[None], 2, axis=0))
    strong = pts.copy()
    strong[:, 2] = 5.0
    # uniform noise: no point has min_pts neighbours
    labels = B.dbscan(strong[:, :2], 1.0, 30)
    assert np.all(labels == -1)
    cents = B.dbscan_centers(PointCloudFrame(strong, 0.0), B.DbscanConfig(eps=1.0, min_pts=30))
    assert np.allclose(cents[0], strong[:, :2].mean(axis=0))


def test_dbscan_config_validation():
    with pytest.raises(ValueError):
        B.DbscanConfig(eps=0.0)
    with pytest.raises(ValueError):
        B.DbscanConfig(min_pts=0)


def test_intensity_symmetric_masses():
    pts = np.array([[10.0, 50.0, 2.0], [10.0, 50.0, -2.0], [-10.0, 50.0, 2.0], [-10.0, 50.0, 2.0]])
    cents = B.intensity_centroid(PointCloudFrame(pts, 0.0))
    assert np.allclose(cents, [[10.0, 50.0], [-10.0, 50.0]])


def test_intensity_matches_direct_oracle():
    rng = np.random.default_rng(2)
    pts = np.column_stack([rng.uniform(-100, 100, 60), rng.uniform(0, 150, 60), rng.normal(0, 2, 60)])
    cents = B.intensity_centroid(PointCloudFrame(pts, 0.0))
    w = np.abs(pts[:, 2])
    order = np.argsort(pts[:, 0])
    cum = np.cumsum(w[order])
    y_med = pts[order[np.searchsorted(cum, cum[-1] / 2)], 0]
    lo = pts[:, 0] <= y_med
    oracle_lo = (w[lo, None] * pts[lo, :2]).sum(axis=0) / w[lo].sum()
    oracle_hi = (w[~lo, None] * pts[~lo, :2]).sum(axis=0) / w[~lo].sum()
    assert np.allclose(cents, [oracle_hi, oracle_lo], atol=1e-9)


def test_intensity_equal_weights_are_arithmetic_means():
    pts = np.column_stack([np.arange(8.0), np.arange(8.0) ** 2, np.full(8, 1.0)])
    cents = B.intensity_centroid(PointCloudFrame(pts, 0.0))
    assert np.allclose(cents[1], pts[:4, :2].mean(axis=0))
    assert np.allclose(cents[0], pts[4:, :2].mean(axis=0))


def test_point_cloud_centers_inside_bounding_box():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pts = np.column_stack([rng.uniform(-50, 50, 200), rng.uniform(0, 90, 200), rng.normal(0, 2, 200)])
        frame = PointCloudFrame(pts, 0.0)
        for cents in (B.dbscan_centers(frame, B.DbscanConfig(eps=10.0, min_pts=3)), B.intensity_centroid(frame)):
            assert np.all(np.isfinite(cents))
            assert np.all(cents >= pts[:, :2].min(axis=0)) and np.all(cents <= pts[:, :2].max(axis=0))


def test_constant_velocity_examples():
    hist = np.array([[[0.0, 100.0], [0.0, 100.0]], [[5.0, 95.0], [5.0, 95.0]]])
    out = B.constant_velocity_forecast(hist)
    assert np.allclose(out[0, 0], [10.0, 90.0]) and np.allclose(out[1, 0], [15.0, 85.0])
    still = np.ones((3, 2, 2))
    assert np.array_equal(B.constant_velocity_forecast(still), np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        B.constant_velocity_forecast(hist[:1])


def linear_track(k, rng, noise=0.0):
    start = rng.uniform(-50, 50, size=(2, 2))
    vel = rng.normal(0, 3, size=(2, 2))
    t = np.arange(k + 2)[:, None, None]
    clean = start + t * vel
    return clean[:k] + rng.normal(0, noise, size=(k, 2, 2)), clean[k:]


def test_kalman_matches_cv_on_noiseless_tracks():
    rng = np.random.default_rng(0)
    cfg = B.KalmanConfig(q=0.5, r=1e-6)
    for _ in range(10):
        hist, _ = linear_track(3, rng)
        assert np.allclose(B.kalman_forecast(hist, cfg), B.constant_velocity_forecast(hist), atol=1e-6)


def test_kalman_single_observation_is_static():
    hist = np.array([[[3.0, 40.0], [-3.0, 41.0]]])
    out = B.kalman_forecast(hist)
    assert np.allclose(out, np.repeat(hist, 2, axis=0))


def test_kalman_beats_cv_on_noisy_tracks():
    rng = np.random.default_rng(1)
    kf_err, cv_err = [], []
    for _ in range(100):
        hist, fut = linear_track(3, rng, noise=2.0)
        kf_err.append(np.sum((B.kalman_forecast(hist)[0] - fut[0]) ** 2))
        cv_err.append(np.sum((B.constant_velocity_forecast(hist)[0] - fut[0]) ** 2))
    assert np.sqrt(np.mean(kf_err)) <= np.sqrt(np.mean(cv_err))


def test_kalman_covariance_symmetric():
    rng = np.random.default_rng(2)
    hist, _ = linear_track(6, rng, noise=1.0)
    kf = B.KalmanFilter(B.KalmanConfig())
    for k, obs in enumerate(hist[:, 0]):
        if k:
            kf.predict()
        kf.update(obs)
        assert np.abs(kf.P - kf.P.T).max() < 1e-9
        assert np.linalg.eigvalsh(kf.P).min() > 0
    with pytest.raises(ValueError):
        B.KalmanConfig(q=0.0)
    with pytest.raises(ValueError):
        B.kalman_forecast(np.zeros((0, 2, 2)))


def test_order_port_first():
    c = B.order_port_first(np.array([[-5.0, 1.0], [5.0, 2.0]]))
    assert np.array_equal(c, [[5.0, 2.0], [-5.0, 1.0]])


def test_trajectory_forecaster_on_cv_tracks():
    rng = np.random.default_rng(3)
    train = [linear_track(3, rng, noise=1.0) for _ in range(256)]
    test = [linear_track(3, rng, noise=1.0) for _ in range(64)]
    model = B.TrajectoryForecaster(epochs=60, seed=0)
    losses = model.fit(np.stack([h for h, _ in train]), np.stack([f for _, f in train]))
    assert losses[-1] < losses[0]
    hist = np.stack([h for h, _ in test])
    fut = np.stack([f for _, f in test])
    pred = model.predict(hist)
    assert pred.shape == (64, 2, 2, 2)
    cv = np.stack([B.constant_velocity_forecast(h) for h in hist])
    rmse = np.sqrt(np.mean(np.sum((pred - fut) ** 2, axis=-1)))
    rmse_cv = np.sqrt(np.mean(np.sum((cv - fut) ** 2, axis=-1)))
    assert rmse < 2 * rmse_cv
    again = B.TrajectoryForecaster(epochs=60, seed=0)
    again.fit(np.stack([h for h, _ in train]), np.stack([f for _, f in train]))
    assert np.array_equal(again.predict(hist), pred)
    with pytest.raises(ValueError):
        B.TrajectoryForecaster().fit(np.zeros((0, 3, 2, 2)), np.zeros((0, 2, 2, 2)))


def labeled_seqs(n, n_points=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        c = rng.uniform(-40, 40, size=(5, 2, 2))
        frames = [PointCloudFrame(rng.normal(0, 40, size=(n_points, 3)) * [1, 1, 0.05], 6.0 * k) for k in range(5)]
        out.append(ScanSequence(frames, f"seq_{i:05d}/0", class_id=i % 4, centers=c))
    return out


def test_select_fraction():
    seqs = labeled_seqs(2398, n_points=1)
    a = B.select_fraction(seqs, 0.01, seed=4)
    b = B.select_fraction(seqs, 0.01, seed=4)
    assert len(a) == 24 and [s.event_id for s in a] == [s.event_id for s in b]
    assert B.select_fraction(seqs, 1.0, 0) == seqs
    with pytest.raises(ValueError):
        B.select_fraction(seqs[:10], 0.01, 0)
    with pytest.raises(ValueError):
        B.select_fraction(seqs, 0.0, 0)


def test_supervised_from_scratch_trains_everything():
    cfg = M.EncoderConfig(point_widths=(8, 16), hidden=8, proj_widths=(8, 4), center_hidden=8, forecast_hidden=4)
    seqs = labeled_seqs(100)
    model, history = B.supervised_from_scratch(seqs, 1.0, cfg, FinetuneConfig(epochs=10, batch_size=16, lr=3e-3))
    assert history[-1] < history[0]
    init = M.Model.create(cfg, 0)
    assert not np.array_equal(model.params["enc.w0"], init.params["enc.w0"])
    assert np.array_equal(model.params["proj.w0"], init.params["proj.w0"])
