"""Command-line entry point: ``vortexlab <command> [options]``.

Every command resolves its configuration (defaults, then a JSON file with
flat dotted keys, then ``--set key=value`` overrides, then explicit flags),
writes ``resolved_config.json`` and ``versions.txt`` to the output directory
and only then starts computing.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
Failures print one JSON line ``{"error": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import baselines as B
from . import data
from . import experiments as X
from . import finetune as F
from . import model as M
from . import plots, sim
from .contrastive import pretrain
from .evaluation import forecast_rmse, linear_probe, rmse_centers

log = logging.getLogger("vortexlab")

COMMANDS = ("simulate", "pretrain", "finetune", "forecast-train", "eval", "probe", "ablate", "table", "plot", "render")
LOCALIZE_METHODS = ("xvortex", "dbscan", "intensity", "supervised")
FORECAST_METHODS = ("xvortex", "cv", "kalman", "traj-lstm")
RENDER_METHODS = ("xvortex", "dbscan", "intensity")


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration -------------------------------------------------------------


def flatten(obj: dict, prefix: str = "") -> dict:
    out = {}
    for key, val in obj.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(flatten(val, name + "."))
        else:
            out[name] = val
    return out


def unflatten(flat: dict) -> dict:
    out: dict = {}
    for key, val in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = val
    return out


def default_config() -> dict:
    sim_keys = sim.SimConfig().to_dict()
    # label noise is one setting shared by ``simulate`` and the benchmark
    sim_keys.pop("label_noise_sigma")
    base = {"seed": 0, "threads": None, "out": "vortexlab_out", "sim": sim_keys}
    base.update(X.BenchmarkConfig().to_dict())
    return flatten(base)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path: str | None, overrides: Sequence[str], flags: dict) -> dict:
    """Merge defaults, config file, ``--set`` pairs and explicit flags."""
    resolved = default_config()
    layers = []
    if config_path:
        try:
            layers.append(flatten(json.loads(Path(config_path).read_text())))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    pairs = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        pairs[key] = _parse_value(value)
    layers.append(pairs)
    for layer in layers:
        for key, val in layer.items():
            # the catalog is one list-valued key, not further flattened
            if key not in resolved and not key.startswith("sim.catalog"):
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = val
    resolved.update({k: v for k, v in flags.items() if v is not None})
    return resolved


def build_configs(resolved: dict) -> tuple[sim.SimConfig, X.BenchmarkConfig]:
    tree = unflatten({k: v for k, v in resolved.items() if k not in RUN_KEYS})
    try:
        sim_cfg = sim.SimConfig.from_dict(tree.pop("sim", {}))
        bench = X.BenchmarkConfig.from_dict(tree)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return sim_cfg, bench


RUN_KEYS = ("seed", "threads", "out", "command")


def result_hash(resolved: dict) -> str:
    """Hash of everything that can change results; the output location and
    thread cap are excluded so reruns elsewhere give identical checkpoints."""
    return X.config_hash({k: v for k, v in resolved.items() if k not in ("out", "threads")})


def versions_text() -> str:
    return "\n".join([
        f"vortexlab {__version__}",
        f"python {platform.python_version()}",
        f"numpy {np.__version__}",
        f"scipy {scipy.__version__}",
        f"platform {platform.system()}-{platform.machine()}",
    ]) + "\n"


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vortexlab", description="Contrastive wake-vortex learning on simulated LiDAR scans.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with flat dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="thread cap for numeric libraries (env VORTEXLAB_THREADS)")
        return p

    p = command("simulate", "generate a synthetic scan dataset")
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--n-frames", type=int)
    p.add_argument("--label-noise", type=float)
    p.add_argument("--unlabeled", action="store_true")

    p = command("pretrain", "contrastive pre-training on an unlabeled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-points", type=int)

    for name, what in (("finetune", "localization"), ("forecast-train", "forecasting")):
        p = command(name, f"{what} fine-tuning from a pre-trained checkpoint")
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--epochs", type=int)
        p.add_argument("--n-points", type=int)
        if name == "finetune":
            p.add_argument("--fraction", type=float, default=1.0)

    p = command("eval", "evaluate a method on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--task", choices=("localize", "forecast"), default="localize")
    p.add_argument("--method", choices=sorted(set(LOCALIZE_METHODS + FORECAST_METHODS)), default="xvortex")
    p.add_argument("--checkpoint")
    p.add_argument("--n-points", type=int)
    p.add_argument("--fraction", type=float, default=1.0, help="label fraction for the supervised baseline")

    p = command("probe", "linear probe of frozen sequence embeddings")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-points", type=int)

    command("ablate", "ablation suite on a simulated benchmark")
    p = command("table", "run benchmark experiments and write the report tables")
    p.add_argument("--experiment", choices=("all", "probe", "label-efficiency", "forecast", "ablation"), default="all")

    p = command("plot", "SVG curves from a metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--kind", choices=("align-uniform", "loss"), default="align-uniform")
    p.add_argument("--split", choices=("train", "val"), default="val")

    p = command("render", "SVG of one scan with true and predicted centers")
    p.add_argument("--data", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--frame", type=int, default=-1)
    p.add_argument("--method", choices=RENDER_METHODS, default="intensity")
    p.add_argument("--checkpoint")
    return parser


def _flags(args) -> dict:
    flags = {"seed": args.seed, "out": args.out, "threads": args.threads}
    cmd = args.command
    if cmd == "simulate":
        flags.update({
            "sim.n_sequences": args.n_sequences, "sim.n_frames": args.n_frames,
            "label_noise": args.label_noise, "sim.labeled": False if args.unlabeled else None,
        })
    if getattr(args, "n_points", None) is not None:
        flags["n_points"] = args.n_points
    epochs_key = {"pretrain": "pretrain.epochs", "finetune": "localize.epochs", "forecast-train": "forecast.epochs"}
    if cmd in epochs_key:
        flags[epochs_key[cmd]] = args.epochs
    return flags


# -- helpers ---------------------------------------------------------------------------


def _load_model(path: str) -> M.Model:
    ckpt = data.load_checkpoint(Path(path))
    if "encoder" not in ckpt.hyper:
        raise ConfigError(f"checkpoint {path} has no encoder config")
    return M.Model(M.EncoderConfig.from_dict(ckpt.hyper["encoder"]), dict(ckpt.tensors))


def _save_model(path: Path, model: M.Model, seed: int, step: int, hyper: dict) -> None:
    data.save_checkpoint(path, data.Checkpoint(dict(model.params), {"encoder": model.cfg.to_dict(), **hyper}, step, seed))


def _oracle(root: Path) -> dict | None:
    return data.load_oracle(root) if (Path(root) / "_oracle" / "labels.json").exists() else None


def _labeled(args, bench: X.BenchmarkConfig):
    root = Path(args.data)
    recs = data.load_dataset(root)
    if any(r.centers is None for r in recs):
        raise ConfigError(f"dataset {root} has no center labels")
    return X.labeled_splits(recs, _oracle(root), bench.n_points, bench.split_seed)


def _write_json(out: Path, name: str, obj) -> None:
    data.dump_json(out / name, obj)
    print(json.dumps(obj, sort_keys=True))


# -- commands ----------------------------------------------------------------------------


def cmd_simulate(args, resolved, sim_cfg, bench, out):
    sim_cfg = replace(sim_cfg, seed=resolved["seed"], label_noise_sigma=bench.label_noise)
    top = sim.generate_dataset(sim_cfg, out)
    print(json.dumps({"sequences": len(top["sequences"]), "out": str(out)}))


def cmd_pretrain(args, resolved, sim_cfg, bench, out):
    seed = resolved["seed"]
    train, val = X.unlabeled_splits(data.load_dataset(Path(args.data)), bench.n_points, bench.split_seed)
    res = pretrain(train, val, replace(bench.pretrain, seed=seed), bench.encoder)
    data.write_metrics(out / "metrics.csv", res.metrics)
    data.save_checkpoint(out / "model.vxck", res.checkpoint(seed, {"config_hash": result_hash(resolved)}))
    print(json.dumps({"best_epoch": res.best_epoch, "steps": res.step, "final": res.metrics[-1]}, sort_keys=True))


def cmd_finetune(args, resolved, sim_cfg, bench, out):
    seed = resolved["seed"]
    train, val, test, _ = _labeled(args, bench)
    subset = B.select_fraction(train, args.fraction, seed)
    model, history = F.finetune_localization(_load_model(args.checkpoint), subset, replace(bench.localize, seed=seed), val)
    _save_model(out / "localize.vxck", model, seed, len(history), {"task": "localize", "config_hash": result_hash(resolved)})
    data.write_table(out / "train_loss.csv", ["epoch", "loss"], list(enumerate(history, 1)))
    rmse = rmse_centers(F.predict_centers(model, test), X.last_centers(test))
    _write_json(out, "results.json", {"task": "localize", "fraction": args.fraction, "n_labeled": len(subset), "test_rmse": rmse})


def cmd_forecast_train(args, resolved, sim_cfg, bench, out):
    seed = resolved["seed"]
    train, val, test, _ = _labeled(args, bench)
    model, history = F.finetune_forecast(_load_model(args.checkpoint), train, replace(bench.forecast, seed=seed), val)
    _save_model(out / "forecast.vxck", model, seed, len(history), {"task": "forecast", "config_hash": result_hash(resolved)})
    data.write_table(out / "train_loss.csv", ["epoch", "loss"], list(enumerate(history, 1)))
    t1, t2 = forecast_rmse(F.predict_forecast(model, test), X.future_centers(test))
    _write_json(out, "results.json", {"task": "forecast", "rmse_t1": t1, "rmse_t2": t2})


def cmd_eval(args, resolved, sim_cfg, bench, out):
    train, val, test, test_obs = _labeled(args, bench)
    allowed = LOCALIZE_METHODS if args.task == "localize" else FORECAST_METHODS
    if args.method not in allowed:
        raise ConfigError(f"method {args.method!r} does not apply to task {args.task!r}")
    if args.method == "xvortex" and not args.checkpoint:
        raise ConfigError("method xvortex needs --checkpoint")
    result = {"task": args.task, "method": args.method, "n_test": len(test)}
    if args.task == "localize":
        if args.method == "xvortex":
            pred = F.predict_centers(_load_model(args.checkpoint), test)
        elif args.method == "supervised":
            seed = resolved["seed"]
            model, _ = B.supervised_from_scratch(train, args.fraction, bench.encoder, replace(bench.localize, seed=seed), val)
            pred = F.predict_centers(model, test)
            result["fraction"] = args.fraction
        elif args.method == "dbscan":
            pred = np.stack([B.dbscan_centers(s.frames[-1], bench.dbscan) for s in test])
        else:
            pred = np.stack([B.intensity_centroid(s.frames[-1]) for s in test])
        result["rmse"] = rmse_centers(pred, X.last_centers(test))
    else:
        if args.method == "xvortex":
            pred = F.predict_forecast(_load_model(args.checkpoint), test)
        else:
            hist = X.center_histories(test_obs)
            if args.method == "cv":
                pred = np.stack([B.constant_velocity_forecast(h) for h in hist])
            elif args.method == "traj-lstm":
                traj = B.TrajectoryForecaster(seed=resolved["seed"])
                traj.fit(X.center_histories(train), X.future_centers(train))
                pred = traj.predict(hist)
            else:
                kcfg = X.tune_kalman(X.center_histories(val), X.future_centers(val), bench.kalman_grid)
                pred = np.stack([B.kalman_forecast(h, kcfg) for h in hist])
                result["kalman"] = {"q": kcfg.q, "r": kcfg.r}
        result["rmse_t1"], result["rmse_t2"] = forecast_rmse(pred, X.future_centers(test))
    _write_json(out, "results.json", result)


def cmd_probe(args, resolved, sim_cfg, bench, out):
    seed = resolved["seed"]
    train, _, held, _ = _labeled(args, bench)
    model = _load_model(args.checkpoint)
    ytr = [s.class_id for s in train]
    yte = [s.class_id for s in held]
    n_classes = int(max(ytr + yte)) + 1
    pcfg = replace(bench.probe, seed=seed)
    rand = M.Model.create(model.cfg, seed)
    result = {
        "pretrained": linear_probe(model.embed(train), ytr, model.embed(held), yte, n_classes, pcfg),
        "random_init": linear_probe(rand.embed(train), ytr, rand.embed(held), yte, n_classes, pcfg),
        "n_train": len(train), "n_test": len(held), "n_classes": n_classes,
    }
    _write_json(out, "probe.json", result)


def _benchmark_run(bench: X.BenchmarkConfig, sim_cfg: sim.SimConfig, which: Sequence[str], out: Path) -> dict:
    need_raw = "ablation" in which
    log.info("simulating benchmark")
    benches = {True: X.simulate_benchmark(bench, True, sim_cfg)}
    if need_raw:
        benches[False] = X.simulate_benchmark(bench, False, sim_cfg)
    full = {}
    for seed in bench.seeds:
        log.info("full pipeline, seed %d", seed)
        full[seed] = X.run_pipeline(benches[True], bench, seed)
        data.write_metrics(out / f"pretrain_metrics_seed{seed}.csv", full[seed].pretrain.metrics)
    models = {s: r.pretrain.model for s, r in full.items()}
    reports = {}
    if "probe" in which:
        reports["probe"] = X.probe_experiment(benches[True], bench, models)
    if "label-efficiency" in which:
        reports["label-efficiency"] = X.label_fraction_experiment(benches[True], bench, models)
    if "forecast" in which:
        reports["forecast"] = X.forecast_experiment(benches[True], bench, models)
    if "ablation" in which:
        reports["ablation"], _ = X.ablation_suite(benches, bench, full, log=log.info)
    summary = {}
    for key, rep in reports.items():
        path = rep.write(out / f"{rep.experiment}.csv")
        summary[rep.experiment] = {"csv": path.name, "config_hash": rep.config_hash}
    data.dump_json(out / "reports.json", summary)
    return summary


def cmd_table(args, resolved, sim_cfg, bench, out):
    which = ("probe", "label-efficiency", "forecast", "ablation") if args.experiment == "all" else (args.experiment,)
    print(json.dumps(_benchmark_run(bench, sim_cfg, which, out), sort_keys=True))


def cmd_ablate(args, resolved, sim_cfg, bench, out):
    print(json.dumps(_benchmark_run(bench, sim_cfg, ("ablation",), out), sort_keys=True))


def cmd_plot(args, resolved, sim_cfg, bench, out):
    rows = data.read_metrics(Path(args.metrics))
    svg = plots.metric_curves_svg(rows, args.kind, args.split)
    path = plots.write_svg(out / f"{args.kind}.svg", svg)
    print(json.dumps({"svg": str(path)}))


def cmd_render(args, resolved, sim_cfg, bench, out):
    root = Path(args.data)
    rec = data.load_recording(root / args.sequence)
    oracle = _oracle(root)
    truth = np.asarray(oracle[args.sequence]["centers"]) if oracle else rec.centers
    k = args.frame if args.frame >= 0 else len(rec) + args.frame
    if not 0 <= k < len(rec):
        raise ConfigError(f"frame {args.frame} out of range for {len(rec)} frames")
    frame = rec.frames[k]
    if args.method == "xvortex":
        if not args.checkpoint:
            raise ConfigError("method xvortex needs --checkpoint")
        model = _load_model(args.checkpoint)
        start = max(0, k + 1 - data.SEQUENCE_LENGTH)
        window = rec.subsequence(range(start, k + 1))
        rng = np.random.default_rng(resolved["seed"])
        window = replace(window, frames=[data.normalize_point_count(f, bench.n_points, rng) for f in window.frames])
        seq, mu = data.center_sequence(window)
        pred = F.predict_centers(model, [seq])[0] + mu
    elif args.method == "dbscan":
        pred = B.dbscan_centers(frame, bench.dbscan)
    else:
        pred = B.intensity_centroid(frame)
    true_k = None if truth is None else B.order_port_first(np.asarray(truth)[k])
    svg = plots.render_scan_svg(frame.points, true_k, B.order_port_first(pred), f"{args.sequence} frame {k}")
    path = plots.write_svg(out / f"render_{args.sequence}_{k}.svg", svg)
    print(json.dumps({"svg": str(path)}))


HANDLERS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "forecast-train": cmd_forecast_train, "eval": cmd_eval, "probe": cmd_probe,
    "ablate": cmd_ablate, "table": cmd_table, "plot": cmd_plot, "render": cmd_render,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command; choose one of {', '.join(COMMANDS)}")
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    try:
        threads = args.threads
        if threads is None and os.environ.get("VORTEXLAB_THREADS"):
            try:
                threads = int(os.environ["VORTEXLAB_THREADS"])
            except ValueError as exc:
                raise ConfigError(f"VORTEXLAB_THREADS must be an integer: {exc}") from exc
        if threads is not None and threads < 1:
            raise ConfigError("threads must be >= 1")
        args.threads = threads
        resolved = resolve_config(args.config, args.set, _flags(args))
        resolved["command"] = args.command
        sim_cfg, bench = build_configs(resolved)
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        data.dump_json(out / "resolved_config.json", resolved)
        (out / "versions.txt").write_text(versions_text())
    except ConfigError as exc:
        return _fail("config", str(exc), 3)
    try:
        with threadpool_limits(limits=threads):
            HANDLERS[args.command](args, resolved, sim_cfg, bench, out)
    except ConfigError as exc:
        return _fail("config", str(exc), 3)
    except Exception as exc:  # any failure becomes one machine-readable line
        return _fail(type(exc).__name__, str(exc), 1)
    return 0


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
