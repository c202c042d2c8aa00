"""Config-driven experiment pipeline: generate, fit, evaluate, predict, sweep.

A config file describes one study: the system and grid, how data is generated
and corrupted, one or more model families, the fitting algorithm, and which
metrics to report. Sweeps expand the Cartesian product of noise levels,
trajectory counts, and models into cells; every cell is deterministic given
the config seeds, and the staged subcommands reuse exactly the in-memory
functions the monolithic runner calls.
"""

from __future__ import annotations

import copy
import datetime
import json
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import io as vio
from .dynamics import (
    FitzHughNagumo,
    MassSpringRing,
    NoiseSpec,
    TimeGrid,
    generate_dataset,
    grid_initial_conditions,
    uniform_initial_conditions,
)
from .errors import ConfigError, DivergenceError
from .estimation import (
    AdamTrainer,
    FitConfig,
    GradientDescentSolver,
    LbfgsSolver,
    PredictionErrorStopping,
    StlsqTrainer,
    alternate,
    bcd,
)
from .metrics import (
    EvalGrid,
    phase_portrait_samples,
    predict_with_reset,
    state_error,
    support_accuracy,
    true_sindy_coefficients,
    vector_field_error,
)
from .models import PolynomialDictionary, SindyModel
from .networks import DenseNetModel, MultiIndexSet, NeuralShapeModel
from .objective import predicted_states, prediction_error


# ---------------------------------------------------------------------------
# Config resolution


def _require(section, key, field, kind=None):
    if key not in section:
        raise ConfigError("missing required field", field=field)
    value = section[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"expected {kind}, got {type(value).__name__}", field=field)
    return value


def _resolve_system(raw):
    kind = _require(raw, "kind", "system.kind", str)
    if kind == "fitzhugh_nagumo":
        return {
            "kind": kind,
            "a": float(raw.get("a", 0.5)),
            "b": float(raw.get("b", 0.2)),
            "c": float(raw.get("c", 3.0)),
        }
    if kind == "mass_spring_ring":
        return {
            "kind": kind,
            "num_masses": int(raw.get("num_masses", 3)),
            "linear_coef": float(raw.get("linear_coef", 16.0)),
            "cubic_coef": float(raw.get("cubic_coef", -1.0)),
        }
    raise ConfigError(f"unknown system kind {kind!r}", field="system.kind")


def build_system(cfg_system):
    if cfg_system["kind"] == "fitzhugh_nagumo":
        return FitzHughNagumo(cfg_system["a"], cfg_system["b"], cfg_system["c"])
    return MassSpringRing(
        cfg_system["num_masses"], cfg_system["linear_coef"], cfg_system["cubic_coef"]
    )


def _resolve_inits(raw, dim):
    kind = _require(raw, "kind", "data.inits.kind", str)
    bounds = _require(raw, "bounds", "data.inits.bounds", list)
    if len(bounds) != dim:
        raise ConfigError(f"need {dim} bound pairs, got {len(bounds)}", field="data.inits.bounds")
    out = {"kind": kind, "bounds": [[float(lo), float(hi)] for lo, hi in bounds]}
    if kind == "grid":
        counts = _require(raw, "counts", "data.inits.counts", list)
        if len(counts) != dim:
            raise ConfigError("counts must match dimension", field="data.inits.counts")
        out["counts"] = [int(c) for c in counts]
    elif kind == "uniform":
        out["count"] = int(_require(raw, "count", "data.inits.count"))
        out["seed"] = int(raw.get("seed", 0))
    else:
        raise ConfigError(f"unknown inits kind {kind!r}", field="data.inits.kind")
    return out


def _resolve_solver(raw, field):
    kind = _require(raw, "kind", f"{field}.kind", str)
    if kind == "gradient_descent":
        return {
            "kind": kind,
            "steps": int(raw.get("steps", 1000)),
            "learning_rate": float(raw.get("learning_rate", 3e-2)),
        }
    if kind == "lbfgs":
        return {
            "kind": kind,
            "max_iter": int(raw.get("max_iter", 500)),
            "gtol": None if raw.get("gtol") is None else float(raw["gtol"]),
            "ftol": None if raw.get("ftol") is None else float(raw["ftol"]),
        }
    raise ConfigError(f"unknown filter solver {kind!r}", field=f"{field}.kind")


def _resolve_trainer(raw, field):
    kind = _require(raw, "kind", f"{field}.kind", str)
    if kind == "stlsq":
        return {
            "kind": kind,
            "threshold": float(raw.get("threshold", 0.0)),
            "max_iter": int(raw.get("max_iter", 10)),
        }
    if kind == "adam":
        return {
            "kind": kind,
            "epochs": int(raw.get("epochs", 100)),
            "learning_rate": float(raw.get("learning_rate", 2e-3)),
        }
    raise ConfigError(f"unknown train solver {kind!r}", field=f"{field}.kind")


def _resolve_fit(raw, field="fit"):
    if "anchor_weight" not in raw:
        raise ConfigError("anchor_weight is required (no global default)", field=f"{field}.anchor_weight")
    out = {
        "algorithm": raw.get("algorithm", "alternate"),
        "anchor_weight": float(raw["anchor_weight"]),
        "max_outer_iters": int(raw.get("max_outer_iters", 50)),
        "x_change_tol": float(raw.get("x_change_tol", 1e-4)),
        "filter_mode": raw.get("filter_mode", "proximal"),
        "filter_solver": _resolve_solver(
            raw.get("filter_solver", {"kind": "gradient_descent"}), f"{field}.filter_solver"
        ),
        "residual": raw.get("residual", "euler"),
    }
    if out["algorithm"] not in ("alternate", "bcd"):
        raise ConfigError(f"unknown algorithm {out['algorithm']!r}", field=f"{field}.algorithm")
    return out


def _resolve_model(raw, idx, dim):
    field = f"model[{idx}]"
    kind = _require(raw, "kind", f"{field}.kind", str)
    out = {"name": raw.get("name", kind), "kind": kind, "seed": int(raw.get("seed", 0))}
    if kind == "sindy":
        out["max_degree"] = int(raw.get("max_degree", 3))
        out["include_constant"] = bool(raw.get("include_constant", False))
        trainer = raw.get("train_solver", {"kind": "stlsq"})
    elif kind == "neural_shape":
        out["num_shapes"] = int(raw.get("num_shapes", 6))
        out["depth"] = int(raw.get("depth", 2))
        out["units"] = int(raw.get("units", 16))
        out["multi_indices"] = raw.get("multi_indices", "pairwise")
        if out["multi_indices"] not in ("pairwise", "full"):
            raise ConfigError("multi_indices must be pairwise or full", field=f"{field}.multi_indices")
        trainer = raw.get("train_solver", {"kind": "adam"})
    elif kind == "dense_net":
        out["hidden"] = [int(h) for h in raw.get("hidden", [32, 32])]
        trainer = raw.get("train_solver", {"kind": "adam"})
    else:
        raise ConfigError(f"unknown model kind {kind!r}", field=f"{field}.kind")
    out["train_solver"] = _resolve_trainer(trainer, f"{field}.train_solver")
    early = raw.get("early_stopping")
    out["early_stopping"] = None if early is None else {"patience": int(early.get("patience", 5))}
    out["fit"] = raw.get("fit", {})  # per-model overrides, merged at build time
    return out


def resolve_config(raw):
    """Validate a raw config dict and expand every default in place."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", field="")
    cfg = {}
    cfg["name"] = str(_require(raw, "name", "name"))
    cfg["seed"] = int(_require(raw, "seed", "seed"))
    cfg["system"] = _resolve_system(_require(raw, "system", "system", dict))
    system = build_system(cfg["system"])

    grid_raw = _require(raw, "grid", "grid", dict)
    cfg["grid"] = {
        "t_start": float(_require(grid_raw, "t_start", "grid.t_start")),
        "t_stop": float(_require(grid_raw, "t_stop", "grid.t_stop")),
        "num_points": int(_require(grid_raw, "num_points", "grid.num_points")),
    }
    if cfg["grid"]["num_points"] < 2:
        raise ConfigError("need at least two grid points", field="grid.num_points")

    data_raw = _require(raw, "data", "data", dict)
    inits = _resolve_inits(_require(data_raw, "inits", "data.inits", dict), system.dim)
    total = (
        int(np.prod(inits["counts"])) if inits["kind"] == "grid" else inits["count"]
    )
    train_points = data_raw.get("train_points")
    if train_points is not None:
        train_points = int(train_points)
        if not 2 <= train_points <= cfg["grid"]["num_points"]:
            raise ConfigError("train_points outside the grid", field="data.train_points")
    counts = [int(c) for c in data_raw.get("trajectory_counts", [total])]
    for c in counts:
        if not 1 <= c <= total:
            raise ConfigError(f"trajectory count {c} not in [1, {total}]", field="data.trajectory_counts")
    cfg["data"] = {
        "inits": inits,
        "scheme": data_raw.get("scheme", "rk4_fine"),
        "substeps": int(data_raw.get("substeps", 100)),
        "train_points": train_points,
        "trajectory_counts": counts,
    }

    noise_raw = _require(raw, "noise", "noise", dict)
    percents = [float(p) for p in _require(noise_raw, "percents", "noise.percents", list)]
    if not percents:
        raise ConfigError("need at least one noise level", field="noise.percents")
    cfg["noise"] = {"percents": percents, "seed": int(noise_raw.get("seed", cfg["seed"]))}

    models_raw = _require(raw, "model", "model")
    if isinstance(models_raw, dict):
        models_raw = [models_raw]
    if not models_raw:
        raise ConfigError("need at least one model", field="model")
    cfg["model"] = [_resolve_model(m, i, system.dim) for i, m in enumerate(models_raw)]
    names = [m["name"] for m in cfg["model"]]
    if len(set(names)) != len(names):
        raise ConfigError("model names must be unique", field="model")

    cfg["fit"] = _resolve_fit(_require(raw, "fit", "fit", dict))

    metrics_raw = raw.get("metrics", {})
    eval_raw = metrics_raw.get("eval_grid")
    if eval_raw is None:
        eval_grid = {
            "bounds": inits["bounds"],
            "points_per_dim": 41 if system.dim <= 2 else 5,
        }
    else:
        bounds = _require(eval_raw, "bounds", "metrics.eval_grid.bounds", list)
        eval_grid = {
            "bounds": [[float(lo), float(hi)] for lo, hi in bounds],
            "points_per_dim": int(eval_raw.get("points_per_dim", 41 if system.dim <= 2 else 5)),
        }
    pred_raw = metrics_raw.get("prediction", {})
    support_raw = metrics_raw.get("support", {})
    portrait_raw = metrics_raw.get("phase_portrait", {})
    cfg["metrics"] = {
        "eval_grid": eval_grid,
        "prediction": {
            "enabled": bool(pred_raw.get("enabled", False)),
            "reset_times": [float(t) for t in pred_raw.get("reset_times", [])],
        },
        "support": {
            "enabled": bool(support_raw.get("enabled", True)),
            "zero_tol": float(support_raw.get("zero_tol", 0.2)),
        },
        "phase_portrait": {"enabled": bool(portrait_raw.get("enabled", system.dim == 2))},
    }

    output_raw = raw.get("output", {})
    cfg["output"] = {"dir": str(output_raw.get("dir", "runs"))}
    return cfg


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", field="")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", field="")
    return resolve_config(raw)


# ---------------------------------------------------------------------------
# Builders


def build_model(model_cfg, dim, seed):
    kind = model_cfg["kind"]
    if kind == "sindy":
        dictionary = PolynomialDictionary(
            dim, model_cfg["max_degree"], include_constant=model_cfg["include_constant"]
        )
        return SindyModel(dictionary, np.zeros((dictionary.size, dim)))
    if kind == "neural_shape":
        indices = (
            MultiIndexSet.full(dim, model_cfg["num_shapes"])
            if model_cfg["multi_indices"] == "full"
            else MultiIndexSet.pairwise(dim, model_cfg["num_shapes"])
        )
        return NeuralShapeModel.build(
            dim,
            model_cfg["num_shapes"],
            depth=model_cfg["depth"],
            units=model_cfg["units"],
            indices=indices,
            seed=seed,
        )
    return DenseNetModel.build(dim, hidden=model_cfg["hidden"], seed=seed)


def build_fit_config(fit_cfg, model_cfg):
    merged = dict(fit_cfg)
    merged.update(model_cfg.get("fit", {}))
    solver_cfg = merged["filter_solver"]
    if isinstance(solver_cfg, dict) and solver_cfg.get("kind") == "lbfgs":
        solver = LbfgsSolver(solver_cfg["max_iter"], solver_cfg.get("gtol"), solver_cfg.get("ftol"))
    else:
        solver = GradientDescentSolver(solver_cfg["steps"], solver_cfg["learning_rate"])
    trainer_cfg = model_cfg["train_solver"]
    if trainer_cfg["kind"] == "stlsq":
        trainer = StlsqTrainer(trainer_cfg["threshold"], trainer_cfg["max_iter"])
    else:
        trainer = AdamTrainer(trainer_cfg["epochs"], trainer_cfg["learning_rate"])
    early = model_cfg.get("early_stopping")
    return FitConfig(
        anchor_weight=merged["anchor_weight"],
        max_outer_iters=merged["max_outer_iters"],
        x_change_tol=merged["x_change_tol"],
        filter_mode=merged["filter_mode"],
        filter_solver=solver,
        train_solver=trainer,
        early_stopping=None if early is None else PredictionErrorStopping(early["patience"]),
        residual=merged["residual"],
    )


def _dataset_inits(cfg):
    inits_cfg = cfg["data"]["inits"]
    if inits_cfg["kind"] == "grid":
        return grid_initial_conditions(inits_cfg["bounds"], inits_cfg["counts"])
    return uniform_initial_conditions(
        inits_cfg["bounds"], inits_cfg["count"], [cfg["seed"], inits_cfg["seed"], 11]
    )


def _noise_tag(percent):
    return f"{percent:g}".replace(".", "p")


def _cell_seed(cfg_seed, model_idx, percent, count):
    return [int(cfg_seed), int(model_idx), int(round(percent * 1e6)), int(count)]


def _subset_indices(total, count, cfg_seed):
    if count == total:
        return np.arange(total)
    rng = np.random.default_rng([int(cfg_seed), 101, int(count)])
    return np.sort(rng.choice(total, size=count, replace=False))


# ---------------------------------------------------------------------------
# Stages


def stage_generate(cfg, out_dir):
    """Integrate the configured initial conditions and write one file per noise level."""
    os.makedirs(out_dir, exist_ok=True)
    system = build_system(cfg["system"])
    grid = TimeGrid.uniform(cfg["grid"]["t_start"], cfg["grid"]["t_stop"], cfg["grid"]["num_points"])
    inits = _dataset_inits(cfg)
    paths = []
    clean = None
    for percent in cfg["noise"]["percents"]:
        spec = NoiseSpec(percent, seed=cfg["noise"]["seed"])
        if clean is None:
            clean, noisy = generate_dataset(
                system, inits, grid, spec,
                scheme=cfg["data"]["scheme"], substeps=cfg["data"]["substeps"],
            )
        else:
            from .dynamics import add_noise

            noisy = add_noise(clean, spec)
        dataset = vio.Dataset(
            grid=grid, clean=clean, noisy=noisy, system=system, noise=spec,
            meta={"config_name": cfg["name"]},
        )
        path = os.path.join(out_dir, f"dataset-noise-{_noise_tag(percent)}.npz")
        vio.save_dataset(path, dataset)
        paths.append(path)
    return paths


def fit_cell(cfg, dataset, model_idx, count):
    """Fit one sweep cell from an in-memory dataset; returns (report, subset_indices)."""
    model_cfg = cfg["model"][model_idx]
    percent = dataset.noise.percent
    idx = _subset_indices(dataset.noisy.num_trajectories, count, cfg["seed"])
    noisy = dataset.noisy.select(idx)
    train_points = cfg["data"]["train_points"]
    if train_points is not None:
        noisy = noisy.head_steps(train_points)
    seed = _cell_seed(cfg["seed"], model_idx, percent, count)
    model0 = build_model(model_cfg, noisy.dim, seed)
    fit_config = build_fit_config(cfg["fit"], model_cfg)
    algorithm = dict(cfg["fit"], **model_cfg.get("fit", {}))["algorithm"]
    if algorithm == "bcd":
        report = bcd(noisy, model0, fit_config)
    else:
        report = alternate(noisy, model0, fit_config)
    return report, idx


def evaluate_cell(cfg, system, model, filtered=None, clean=None, subset=None):
    """Metrics document for one fitted cell; every value is reproducible."""
    metrics_cfg = cfg["metrics"]
    out = {}
    eval_grid = EvalGrid(
        tuple(tuple(b) for b in metrics_cfg["eval_grid"]["bounds"]),
        tuple(metrics_cfg["eval_grid"]["points_per_dim"] for _ in metrics_cfg["eval_grid"]["bounds"]),
    )
    out["vector_field_error"] = vector_field_error(model, system.rhs, eval_grid)

    if metrics_cfg["support"]["enabled"] and isinstance(model, SindyModel):
        truth = true_sindy_coefficients(system, model.dictionary)
        report = support_accuracy(model.theta, truth, metrics_cfg["support"]["zero_tol"])
        out["support_exact_match"] = report.exact_match
        out["support_precision"] = report.precision
        out["support_recall"] = report.recall

    if filtered is not None and clean is not None:
        clean_sel = clean if subset is None else clean.select(subset)
        clean_train = clean_sel.head_steps(filtered.num_steps)
        out["state_error"] = state_error(filtered, clean_train)
        if metrics_cfg["prediction"]["enabled"]:
            out.update(
                _prediction_metrics(
                    cfg, model, filtered, clean_sel, metrics_cfg["prediction"]["reset_times"]
                )
            )
    return out


def _prediction_metrics(cfg, model, filtered, clean, reset_times):
    out = {}
    grid = clean.grid
    train_points = filtered.num_steps
    try:
        predicted = predicted_states(model, filtered.data[:, 0], grid, scheme="rk4")
        out["prediction_error"] = prediction_error(predicted, clean)
        if train_points < clean.num_steps:
            out["test_prediction_error"] = float(
                np.mean(np.abs(predicted.data[:, train_points:] - clean.data[:, train_points:]))
            )
    except DivergenceError:
        out["prediction_error"] = float("inf")
        if train_points < clean.num_steps:
            out["test_prediction_error"] = float("inf")
    if reset_times:
        try:
            reset_pred = predict_with_reset(model, filtered, grid, reset_times, scheme="rk4")
            out["reset_prediction_error"] = prediction_error(reset_pred, clean)
            if train_points < clean.num_steps:
                out["reset_test_prediction_error"] = float(
                    np.mean(np.abs(reset_pred.data[:, train_points:] - clean.data[:, train_points:]))
                )
        except DivergenceError:
            out["reset_prediction_error"] = float("inf")
            if train_points < clean.num_steps:
                out["reset_test_prediction_error"] = float("inf")
    return out


def _cell_name(model_cfg, percent, count):
    return f"{model_cfg['name']}-noise{_noise_tag(percent)}-N{count}"


def run_cell(cfg, run_dir, dataset_path, model_idx, count):
    """Load a dataset file, fit one cell, evaluate it, and write its artifacts."""
    dataset = vio.load_dataset(dataset_path)
    system = build_system(cfg["system"])
    model_cfg = cfg["model"][model_idx]
    percent = dataset.noise.percent
    report, subset = fit_cell(cfg, dataset, model_idx, count)

    cell = _cell_name(model_cfg, percent, count)
    cell_dir = os.path.join(run_dir, "cells", cell)
    os.makedirs(cell_dir, exist_ok=True)

    vio.save_report(os.path.join(cell_dir, "fit_report.json"), report)
    vio.save_model(os.path.join(cell_dir, "model.json"), report.model)
    filtered_ds = vio.Dataset(
        grid=report.states.grid, noisy=report.states, system=system, noise=dataset.noise,
        meta={"subset": [int(i) for i in subset], "role": "filtered", "cell": cell,
              "model_index": model_idx, "trajectory_count": int(count)},
    )
    vio.save_dataset(os.path.join(cell_dir, "filtered.npz"), filtered_ds)

    metrics = evaluate_cell(cfg, system, report.model, report.states, dataset.clean, subset)
    metrics["outer_iterations"] = len(report.records)
    metrics["termination"] = report.termination
    metrics["objective_final"] = report.records[-1].objective if report.records else None
    metrics["x_change_final"] = report.records[-1].x_change if report.records else None
    vio.save_json(os.path.join(cell_dir, "metrics.json"), metrics)

    if cfg["metrics"]["phase_portrait"]["enabled"]:
        eval_grid = EvalGrid(
            tuple(tuple(b) for b in cfg["metrics"]["eval_grid"]["bounds"]),
            tuple(
                cfg["metrics"]["eval_grid"]["points_per_dim"]
                for _ in cfg["metrics"]["eval_grid"]["bounds"]
            ),
        )
        points, values = phase_portrait_samples(report.model, eval_grid)
        vio.phase_portrait_csv(os.path.join(cell_dir, "phase_portrait.csv"), points, values)

    row = {"cell": cell, "model": model_cfg["name"], "noise_percent": percent,
           "num_trajectories": int(count)}
    row.update(metrics)
    return row


def _run_cell_worker(args):
    cfg, run_dir, dataset_path, model_idx, count = args
    return run_cell(cfg, run_dir, dataset_path, model_idx, count)


def _summary_line(row):
    parts = [
        f"{row['cell']:<44}",
        f"vf={row.get('vector_field_error', float('nan')):.4g}",
    ]
    if "state_error" in row:
        parts.append(f"state={row['state_error']:.4g}")
    if "prediction_error" in row:
        parts.append(f"pred={row['prediction_error']:.4g}")
    if "support_exact_match" in row:
        parts.append(f"support={'exact' if row['support_exact_match'] else 'partial'}")
    parts.append(f"iters={row.get('outer_iterations')}")
    return "  ".join(str(p) for p in parts)


def make_run_dir(cfg, out_root=None):
    root = out_root or cfg["output"]["dir"]
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{cfg['name']}-{stamp}")
    run_dir = base
    suffix = 1
    while os.path.exists(run_dir):
        run_dir = f"{base}-{suffix}"
        suffix += 1
    os.makedirs(run_dir)
    return run_dir


def run_experiment(config, out_root=None, jobs=1, quiet=False):
    """Execute every sweep cell of a config; returns (run_dir, summary rows)."""
    cfg = load_config(config) if isinstance(config, (str, os.PathLike)) else resolve_config(config)
    run_dir = make_run_dir(cfg, out_root)
    vio.save_json(os.path.join(run_dir, "resolved_config.json"), cfg)

    dataset_paths = stage_generate(cfg, os.path.join(run_dir, "datasets"))
    by_percent = dict(zip(cfg["noise"]["percents"], dataset_paths))

    cells = []
    for model_idx in range(len(cfg["model"])):
        for percent in cfg["noise"]["percents"]:
            for count in cfg["data"]["trajectory_counts"]:
                cells.append((cfg, run_dir, by_percent[percent], model_idx, count))

    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_worker, cells))
    else:
        rows = [_run_cell_worker(args) for args in cells]

    summary_path = os.path.join(run_dir, "summary.jsonl")
    vio.atomic_write_text(
        summary_path, "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    )
    if not quiet:
        for row in rows:
            print(_summary_line(row))
    return run_dir, rows
