import json

import pytest

from vortexlab import cli, data

TINY = {
    "n_points": 32, "encoder.point_widths": [8, 16], "encoder.hidden": 8, "encoder.proj_widths": [8, 4],
    "encoder.center_hidden": 8, "encoder.forecast_hidden": 8, "pretrain.batch_size": 8,
    "localize.epochs": 2, "localize.min_steps": 0, "forecast.epochs": 2, "forecast.min_steps": 0,
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert cli.run(["simulate", "--n-sequences", "10", "--seed", "7", "--out", str(root / "d"), "--threads", "1"]) == 0
    return root


def call(root, *argv):
    return cli.run([*argv, "--config", str(root / "tiny.json"), "--threads", "1"])


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_simulate_writes_ten_sequences(workspace):
    d = workspace / "d"
    assert len([p for p in d.iterdir() if p.name.startswith("seq_")]) == 10
    assert (d / "resolved_config.json").exists() and (d / "versions.txt").exists()
    resolved = json.loads((d / "resolved_config.json").read_text())
    assert resolved["seed"] == 7 and resolved["command"] == "simulate"


def test_pretrain_rerun_is_byte_identical(workspace):
    outs = []
    for name in ("p1", "p2"):
        out = workspace / name
        assert call(workspace, "pretrain", "--data", str(workspace / "d"), "--epochs", "1", "--seed", "7", "--out", str(out)) == 0
        outs.append(out)
    for f in ("metrics.csv", "model.vxck"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    rows = data.read_metrics(outs[0] / "metrics.csv")
    assert {r["split"] for r in rows} == {"train", "val"}


def test_finetune_eval_and_render(workspace, capsys):
    d, ck = workspace / "d", workspace / "p1" / "model.vxck"
    if not ck.exists():
        call(workspace, "pretrain", "--data", str(d), "--epochs", "1", "--seed", "7", "--out", str(workspace / "p1"))
    assert call(workspace, "finetune", "--data", str(d), "--checkpoint", str(ck), "--out", str(workspace / "f")) == 0
    assert last_json(capsys)["test_rmse"] > 0
    loc = str(workspace / "f" / "localize.vxck")
    for method in ("xvortex", "dbscan", "intensity"):
        assert call(workspace, "eval", "--data", str(d), "--method", method, "--checkpoint", loc, "--out", str(workspace / "e")) == 0
        assert last_json(capsys)["rmse"] > 0
    assert call(workspace, "eval", "--data", str(d), "--task", "forecast", "--method", "cv", "--out", str(workspace / "e")) == 0
    res = last_json(capsys)
    assert res["rmse_t1"] > 0 and res["rmse_t2"] > 0
    seq = sorted(p.name for p in d.iterdir() if p.name.startswith("seq_"))[0]
    assert call(workspace, "render", "--data", str(d), "--sequence", seq, "--method", "xvortex", "--checkpoint", loc, "--out", str(workspace / "r")) == 0
    svg = (workspace / "r" / f"render_{seq}_4.svg").read_text()
    assert svg.count("<circle") == 2 and svg.count('class="cross"') == 2


def test_plot_from_metrics(workspace):
    ck_dir = workspace / "p1"
    if not (ck_dir / "metrics.csv").exists():
        call(workspace, "pretrain", "--data", str(workspace / "d"), "--epochs", "1", "--seed", "7", "--out", str(ck_dir))
    assert cli.run(["plot", "--metrics", str(ck_dir / "metrics.csv"), "--out", str(workspace / "pl")]) == 0
    assert (workspace / "pl" / "align-uniform.svg").read_text().count("<polyline") == 2


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def test_usage_errors_exit_2(capsys):
    assert cli.run(["bogus"]) == 2
    assert error_line(capsys)["error"] == "usage"
    assert cli.run([]) == 2
    assert error_line(capsys)["error"] == "usage"
    assert cli.run(["pretrain"]) == 2  # --data is required
    error_line(capsys)


def test_config_errors_exit_3(tmp_path, capsys, monkeypatch):
    out = str(tmp_path / "o")
    assert cli.run(["simulate", "--set", "nope=1", "--out", out]) == 3
    assert error_line(capsys)["error"] == "config"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.run(["simulate", "--config", str(bad), "--out", out]) == 3
    error_line(capsys)
    monkeypatch.setenv("VORTEXLAB_THREADS", "many")
    assert cli.run(["simulate", "--out", out]) == 3
    error_line(capsys)


def test_runtime_failure_exit_1(tmp_path, capsys):
    assert cli.run(["pretrain", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    assert "message" in error_line(capsys)


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_points": 64, "pretrain.epochs": 3}))
    resolved = cli.resolve_config(str(cfg), ["pretrain.epochs=5"], {"n_points": 128, "seed": None})
    assert resolved["n_points"] == 128 and resolved["pretrain.epochs"] == 5 and resolved["seed"] == 0
    _, bench = cli.build_configs(resolved)
    assert bench.n_points == 128 and bench.pretrain.epochs == 5
    # output location does not enter the result hash
    assert cli.result_hash({**resolved, "out": "a"}) == cli.result_hash({**resolved, "out": "b"})
