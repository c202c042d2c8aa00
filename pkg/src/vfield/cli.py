"""Command-line interface: ``vfield generate|fit|evaluate|predict|run``.

Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
failures. ``VFIELD_OUT`` and ``VFIELD_JOBS`` override the output directory
and worker count when the flags are not given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import io as vio
from .dynamics import TimeGrid
from .errors import ConfigError, VfieldError
from .experiments import (
    build_system,
    evaluate_cell,
    fit_cell,
    resolve_config,
    run_experiment,
    stage_generate,
)
from .metrics import predict_with_reset
from .objective import prediction_error


def _read_config(args):
    try:
        with open(args.config, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}", field="")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field="")
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return resolve_config(raw)


def _out_dir(args, default="."):
    return args.out or os.environ.get("VFIELD_OUT") or default


def _model_index(cfg, name):
    if name is None:
        return 0
    for idx, model_cfg in enumerate(cfg["model"]):
        if model_cfg["name"] == name:
            return idx
    raise ConfigError(f"no model named {name!r} in config", field="model")


def cmd_run(args):
    jobs = args.jobs or int(os.environ.get("VFIELD_JOBS", "1"))
    cfg = _read_config(args)
    run_dir, _ = run_experiment(cfg, out_root=args.out or os.environ.get("VFIELD_OUT"), jobs=jobs)
    print(f"run artifacts in {run_dir}")
    return 0


def cmd_generate(args):
    cfg = _read_config(args)
    paths = stage_generate(cfg, _out_dir(args))
    for path in paths:
        print(path)
    return 0


def cmd_fit(args):
    cfg = _read_config(args)
    dataset = _load_dataset(args.dataset)
    model_idx = _model_index(cfg, args.model)
    count = args.trajectories or dataset.noisy.num_trajectories
    report, subset = fit_cell(cfg, dataset, model_idx, count)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    vio.save_report(os.path.join(out, "fit_report.json"), report)
    vio.save_model(os.path.join(out, "model.json"), report.model)
    filtered = vio.Dataset(
        grid=report.states.grid, noisy=report.states,
        system=dataset.system, noise=dataset.noise,
        meta={"subset": [int(i) for i in subset], "role": "filtered",
              "model_index": model_idx, "trajectory_count": int(count)},
    )
    vio.save_dataset(os.path.join(out, "filtered.npz"), filtered)
    last = report.records[-1] if report.records else None
    print(
        f"fit {cfg['model'][model_idx]['name']}: {len(report.records)} outer iterations, "
        f"termination={report.termination}, "
        f"objective={last.objective if last else float('nan'):.6g}"
    )
    return 0


def cmd_evaluate(args):
    cfg = _read_config(args)
    model = _load_model(args.model_file)
    dataset = _load_dataset(args.dataset)
    system = build_system(cfg["system"])
    filtered = None
    subset = None
    if args.filtered:
        container = _load_dataset(args.filtered)
        filtered = container.noisy
        subset = np.array(container.meta.get("subset", []), dtype=int) if container.meta else None
        if subset is not None and subset.size == 0:
            subset = None
    metrics = evaluate_cell(cfg, system, model, filtered, dataset.clean, subset)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "metrics.json")
    vio.save_json(path, metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_predict(args):
    cfg = _read_config(args)
    model = _load_model(args.model_file)
    container = _load_dataset(args.filtered)
    filtered = container.noisy
    grid = TimeGrid.uniform(cfg["grid"]["t_start"], cfg["grid"]["t_stop"], cfg["grid"]["num_points"])
    predicted = predict_with_reset(model, filtered, grid, args.reset or [])
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    vio.save_dataset(
        os.path.join(out, "predicted.npz"),
        vio.Dataset(grid=grid, noisy=predicted, system=container.system,
                    meta={"role": "predicted", "reset_times": list(args.reset or [])}),
    )
    if args.dataset:
        reference = _load_dataset(args.dataset)
        subset = np.array(container.meta.get("subset", []), dtype=int) if container.meta else None
        clean = reference.clean
        if clean is not None and subset is not None and subset.size:
            clean = clean.select(subset)
        if clean is not None:
            err = prediction_error(predicted, clean)
            vio.save_json(os.path.join(out, "prediction_metrics.json"), {"prediction_error": err})
            print(f"prediction error vs clean states: {err:.6g}")
    print(os.path.join(out, "predicted.npz"))
    return 0


def _load_dataset(path):
    try:
        return vio.load_dataset(path)
    except FileNotFoundError:
        raise VfieldError(f"dataset file not found: {path}")
    except (OSError, ValueError, KeyError) as exc:
        raise VfieldError(f"cannot read dataset {path}: {exc}")


def _load_model(path):
    try:
        return vio.load_model(path)
    except FileNotFoundError:
        raise VfieldError(f"model file not found: {path}")
    except (OSError, ValueError, KeyError) as exc:
        raise VfieldError(f"cannot read model {path}: {exc}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="vfield",
        description="Estimate vector fields and filtered states from noisy trajectories.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="path to a JSON experiment config")
        p.add_argument("--out", default=None, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_run = sub.add_parser("run", help="generate data, fit every sweep cell, and report metrics")
    common(p_run)
    p_run.add_argument("--jobs", type=int, default=None, help="parallel worker processes")
    p_run.set_defaults(func=cmd_run)

    p_gen = sub.add_parser("generate", help="write clean/noisy dataset files")
    common(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_fit = sub.add_parser("fit", help="fit one model to one dataset file")
    common(p_fit)
    p_fit.add_argument("--dataset", required=True, help="dataset .npz from generate")
    p_fit.add_argument("--model", default=None, help="model name from the config (default: first)")
    p_fit.add_argument("--trajectories", type=int, default=None, help="subset size (default: all)")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("evaluate", help="compute metrics for a saved model")
    common(p_eval)
    p_eval.add_argument("--model-file", required=True, help="model.json from fit")
    p_eval.add_argument("--dataset", required=True, help="dataset .npz with clean states")
    p_eval.add_argument("--filtered", default=None, help="filtered.npz from fit")
    p_eval.set_defaults(func=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="integrate a saved model from filtered states")
    common(p_pred)
    p_pred.add_argument("--model-file", required=True)
    p_pred.add_argument("--filtered", required=True, help="filtered.npz from fit")
    p_pred.add_argument("--dataset", default=None, help="dataset .npz for error reporting")
    p_pred.add_argument("--reset", type=float, action="append", default=None,
                        help="reset time (repeatable)")
    p_pred.set_defaults(func=cmd_predict)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VfieldError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
