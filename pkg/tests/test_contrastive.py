import math

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from vortexlab import contrastive as C
from vortexlab import data, sim
from vortexlab import model as M
from vortexlab import tensor as T
from vortexlab.augment import AugmentConfig
from vortexlab.data import PointCloudFrame, ScanSequence
from vortexlab.optim import finite_diff_check

TINY = M.EncoderConfig(point_widths=(8, 16), hidden=8, proj_widths=(8, 6), center_hidden=4, forecast_hidden=4)


def unit_rows(n, d, seed=0):
    z = np.random.default_rng(seed).normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def loss64(z, tau=0.07):
    with T.precision(np.float64):
        return float(C.info_nce(z, tau).data)


def test_single_pair_loss_is_zero():
    z = unit_rows(1, 5)
    assert loss64(np.vstack([z, unit_rows(1, 5, seed=1)])) == pytest.approx(0.0, abs=1e-12)


def test_closed_form_two_pairs():
    e = np.eye(4)
    z = np.vstack([e[0], e[1], e[0], e[1]])
    expected = math.log(1 + 2 * math.exp(-1 / 0.07))
    assert loss64(z) == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(1.25e-6, rel=0.02)


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        C.info_nce(np.ones((4, 3)), 0.07)
    with pytest.raises(ValueError):
        C.info_nce(unit_rows(3, 4), 0.07)
    with pytest.raises(ValueError):
        C.info_nce(np.zeros((0, 3)), 0.07)
    with pytest.raises(ValueError):
        C.info_nce(unit_rows(4, 3), 0.0)


def test_rotation_invariance():
    z = unit_rows(8, 6, seed=2)
    R = special_ortho_group.rvs(6, random_state=3)
    assert loss64(z @ R.T) == pytest.approx(loss64(z), abs=1e-9)


def test_monotone_in_positive_similarity():
    anchor = np.array([1.0, 0.0, 0.0])
    neg = np.array([0.0, 0.0, 1.0])
    losses = []
    for angle in (1.2, 0.8, 0.4, 0.1):
        pos = np.array([math.cos(angle), math.sin(angle), 0.0])
        losses.append(loss64(np.vstack([anchor, neg, pos, neg]), tau=0.5))
    assert np.all(np.diff(losses) < 0)


def test_identical_embeddings_give_log_2b_minus_1():
    z = np.tile(unit_rows(1, 8), (32, 1))
    assert loss64(z) == pytest.approx(math.log(31), rel=1e-12)


def test_info_nce_gradient():
    z = unit_rows(6, 4, seed=5)

    def fn(p):
        return C.info_nce(T.l2_normalize(p["z"], axis=-1), 0.5)

    assert finite_diff_check(fn, {"z": z}) < 1e-5


def test_alignment():
    z = unit_rows(5, 3)
    assert C.alignment(z, z) == 0.0
    a, b = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    assert C.alignment(a, b) == pytest.approx(2.0)
    z2 = unit_rows(5, 3, seed=1)
    brute = np.mean([np.sum((x - y) ** 2) for x, y in zip(z, z2)])
    assert C.alignment(z, z2) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        C.alignment(np.zeros((0, 3)), np.zeros((0, 3)))


def test_uniformity():
    z = np.tile(unit_rows(1, 4), (6, 1))
    assert C.uniformity(z) == 0.0
    assert C.uniformity(np.array([[1.0, 0.0], [-1.0, 0.0]])) == pytest.approx(-8.0, abs=1e-9)
    z = unit_rows(100, 64, seed=4)
    terms = [math.exp(-2 * np.sum((z[i] - z[j]) ** 2)) for i in range(100) for j in range(i + 1, 100)]
    assert C.uniformity(z) == pytest.approx(math.log(np.mean(terms)), abs=1e-9)
    assert C.uniformity(z) <= 0
    with pytest.raises(ValueError):
        C.uniformity(z[:1])


def make_seqs(n, n_points=24, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        base = rng.normal(0, 40, size=(1, 3)) * [1, 1, 0.05]
        frames = [PointCloudFrame(base + rng.normal(0, 20, size=(n_points, 3)) * [1, 1, 0.05], 6.0 * k) for k in range(5)]
        out.append(ScanSequence(frames, f"seq_{i:05d}/0"))
    return out


def test_pretrain_config_validation():
    with pytest.raises(ValueError):
        C.PretrainConfig(temperature=0.0)
    with pytest.raises(ValueError):
        C.PretrainConfig(batch_size=1)


def test_initial_loss_near_chance():
    cfg = sim.SimConfig(n_sequences=16, seed=0)
    recs = [ScanSequence(sim.simulate_sequence(cfg, i)[1], f"seq_{i:05d}") for i in range(16)]
    seqs = data.prepare_sequences(recs, 64, seed=0)
    for seed in range(3):
        stats = C.evaluate_views(M.Model.create(M.EncoderConfig(), seed), seqs, C.PretrainConfig(batch_size=16))
        assert 0.8 * math.log(31) <= stats["loss"] <= 1.2 * math.log(31)


def test_pretrain_deterministic_and_logged():
    seqs = make_seqs(32)
    cfg = C.PretrainConfig(epochs=1, batch_size=8, seed=3)
    a = C.pretrain(seqs[:24], seqs[24:], cfg, TINY)
    b = C.pretrain(seqs[:24], seqs[24:], cfg, TINY)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    assert [(r["epoch"], r["split"]) for r in a.metrics] == [(0, "val"), (1, "train"), (1, "val")]
    assert a.step == 3


def test_pretrain_only_touches_pretraining_groups():
    seqs = make_seqs(16)
    init = M.Model.create(TINY, 0)
    res = C.pretrain(seqs, [], C.PretrainConfig(epochs=1, batch_size=8), TINY, init=init)
    for name in M.group(init.params, "center", "fcst"):
        assert np.array_equal(res.model.params[name], init.params[name])
    assert not np.array_equal(res.model.params["enc.w0"], init.params["enc.w0"])


def test_pretrain_reduces_loss_on_toy_set():
    seqs = make_seqs(32, seed=1)
    cfg = C.PretrainConfig(epochs=8, batch_size=8, lr=3e-3, augment=AugmentConfig(rotation_range=0.2))
    res = C.pretrain(seqs, [], cfg, TINY)
    train = [r["loss"] for r in res.metrics if r["split"] == "train"]
    assert train[-1] < train[0]


def test_pretrain_rejects_empty_and_nonfinite():
    with pytest.raises(ValueError):
        C.pretrain([], [], C.PretrainConfig(), TINY)
    seqs = make_seqs(4)
    bad = M.Model.create(TINY, 0)
    bad.params["enc.w0"][:] = np.nan
    with pytest.raises((FloatingPointError, ValueError)):
        with np.errstate(invalid="ignore"):
            C.pretrain(seqs, [], C.PretrainConfig(epochs=1, batch_size=4), TINY, init=bad)
