import json
import os

import numpy as np
import pytest

from vfield import ConfigError
from vfield import io as vio
from vfield.experiments import (
    build_system,
    evaluate_cell,
    fit_cell,
    resolve_config,
    run_experiment,
    stage_generate,
)


def tiny_config(tmp_path, **overrides):
    cfg = {
        "name": "tiny",
        "seed": 99,
        "system": {"kind": "fitzhugh_nagumo"},
        "grid": {"t_start": 0.0, "t_stop": 1.0, "num_points": 21},
        "data": {
            "inits": {"kind": "grid", "bounds": [[-2, 2], [-2, 2]], "counts": [3, 3]},
            "scheme": "rk4",
            "trajectory_counts": [4],
        },
        "noise": {"percents": [5], "seed": 7},
        "model": [
            {
                "name": "filter-sindy",
                "kind": "sindy",
                "max_degree": 3,
                "include_constant": True,
                "train_solver": {"kind": "stlsq", "threshold": 0.05},
            }
        ],
        "fit": {
            "algorithm": "alternate",
            "anchor_weight": 1e-8,
            "max_outer_iters": 3,
            "x_change_tol": 1e-6,
            "filter_solver": {"kind": "lbfgs", "max_iter": 30},
        },
        "metrics": {
            "eval_grid": {"bounds": [[-2, 2], [-2, 2]], "points_per_dim": 9},
            "prediction": {"enabled": True, "reset_times": []},
        },
        "output": {"dir": str(tmp_path / "runs")},
    }
    cfg.update(overrides)
    return cfg


class TestResolveConfig:
    def test_defaults_are_expanded(self, tmp_path):
        cfg = resolve_config(tiny_config(tmp_path))
        assert cfg["data"]["substeps"] == 100
        assert cfg["fit"]["filter_mode"] == "proximal"
        assert cfg["fit"]["residual"] == "euler"
        assert cfg["model"][0]["train_solver"]["max_iter"] == 10
        assert cfg["metrics"]["support"]["zero_tol"] == 0.2

    def test_missing_field_names_path(self, tmp_path):
        raw = tiny_config(tmp_path)
        del raw["fit"]["anchor_weight"]
        with pytest.raises(ConfigError) as info:
            resolve_config(raw)
        assert "anchor_weight" in str(info.value)

    def test_unknown_model_kind(self, tmp_path):
        raw = tiny_config(tmp_path)
        raw["model"][0]["kind"] = "kriging"
        with pytest.raises(ConfigError):
            resolve_config(raw)

    def test_bad_trajectory_count(self, tmp_path):
        raw = tiny_config(tmp_path)
        raw["data"]["trajectory_counts"] = [50]
        with pytest.raises(ConfigError):
            resolve_config(raw)


class TestRunExperiment:
    def test_artifacts_and_summary(self, tmp_path):
        run_dir, rows = run_experiment(tiny_config(tmp_path), quiet=True)
        assert len(rows) == 1
        row = rows[0]
        assert {"cell", "vector_field_error", "state_error", "prediction_error"} <= set(row)
        cell_dir = os.path.join(run_dir, "cells", row["cell"])
        for name in ["fit_report.json", "model.json", "filtered.npz", "metrics.json",
                     "phase_portrait.csv"]:
            assert os.path.exists(os.path.join(cell_dir, name)), name
        assert os.path.exists(os.path.join(run_dir, "resolved_config.json"))
        assert os.path.exists(os.path.join(run_dir, "summary.jsonl"))
        resolved = vio.load_json(os.path.join(run_dir, "resolved_config.json"))
        assert resolved["fit"]["max_outer_iters"] == 3

    def test_rerun_is_byte_identical(self, tmp_path):
        run_a, rows_a = run_experiment(tiny_config(tmp_path), quiet=True)
        run_b, rows_b = run_experiment(tiny_config(tmp_path), quiet=True)
        cell = rows_a[0]["cell"]
        for name in ["metrics.json", "fit_report.json", "model.json"]:
            a = open(os.path.join(run_a, "cells", cell, name), "rb").read()
            b = open(os.path.join(run_b, "cells", cell, name), "rb").read()
            assert a == b, name
        assert rows_a == rows_b

    def test_sweep_expansion(self, tmp_path):
        raw = tiny_config(tmp_path)
        raw["noise"]["percents"] = [1, 10]
        raw["data"]["trajectory_counts"] = [2, 9]
        _, rows = run_experiment(raw, quiet=True)
        assert len(rows) == 4
        labels = {(r["noise_percent"], r["num_trajectories"]) for r in rows}
        assert labels == {(1.0, 2), (1.0, 9), (10.0, 2), (10.0, 9)}

    def test_parallel_jobs_match_serial(self, tmp_path):
        raw = tiny_config(tmp_path)
        raw["noise"]["percents"] = [1, 10]
        _, serial = run_experiment(raw, quiet=True)
        _, parallel = run_experiment(raw, jobs=2, quiet=True)
        assert serial == parallel


class TestStageComposition:
    def test_stages_reproduce_run(self, tmp_path):
        cfg = resolve_config(tiny_config(tmp_path))
        run_dir, rows = run_experiment(cfg, quiet=True)
        run_metrics = vio.load_json(
            os.path.join(run_dir, "cells", rows[0]["cell"], "metrics.json")
        )

        stage_dir = tmp_path / "stages"
        paths = stage_generate(cfg, str(stage_dir))
        dataset = vio.load_dataset(paths[0])
        report, subset = fit_cell(cfg, dataset, 0, 4)
        system = build_system(cfg["system"])
        metrics = evaluate_cell(cfg, system, report.model, report.states, dataset.clean, subset)
        for key, value in metrics.items():
            assert run_metrics[key] == value, key
