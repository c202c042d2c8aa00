"""On-disk formats: npz dataset containers, JSON models/reports/metrics, CSV exports.

JSON numbers use Python's shortest round-trip float representation, so a
save/load cycle reproduces every parameter bit-for-bit. All writes go through
a write-then-rename so readers never observe partial files.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from .dynamics import (
    NoiseSpec,
    TimeGrid,
    TrajectorySet,
    system_from_dict,
    system_to_dict,
)
from .errors import DataShapeError
from .estimation import FitReport, IterationRecord
from .models import PolynomialDictionary, SindyModel
from .networks import DenseNetModel, Mlp, MultiIndexSet, NeuralShapeModel, ShapeNetwork


def atomic_write_bytes(path, payload):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(path):
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


# ---------------------------------------------------------------------------
# Models


def _mlp_to_dict(mlp):
    return {
        "activation": mlp.activation,
        "weights": [w.tolist() for w in mlp.weights],
        "biases": [b.tolist() for b in mlp.biases],
    }


def _mlp_from_dict(payload):
    return Mlp(
        [np.array(w, dtype=float) for w in payload["weights"]],
        [np.array(b, dtype=float) for b in payload["biases"]],
        activation=payload["activation"],
    )


def model_to_dict(model):
    if isinstance(model, SindyModel):
        return {
            "kind": "sindy",
            "dictionary": model.dictionary.to_dict(),
            "theta": model.theta.tolist(),
        }
    if isinstance(model, NeuralShapeModel):
        return {
            "kind": "neural_shape",
            "shapes": {
                "num_shapes": model.shapes.num_shapes,
                "depth": model.shapes.depth,
                "units": model.shapes.units,
                "mlp": _mlp_to_dict(model.shapes.mlp),
            },
            "indices": model.indices.indices.tolist(),
            "readout": model.readout.tolist(),
        }
    if isinstance(model, DenseNetModel):
        return {"kind": "dense_net", "mlp": _mlp_to_dict(model.mlp)}
    raise DataShapeError(f"cannot serialize model of type {type(model).__name__}")


def model_from_dict(payload):
    kind = payload.get("kind")
    if kind == "sindy":
        dictionary = PolynomialDictionary.from_dict(payload["dictionary"])
        return SindyModel(dictionary, np.array(payload["theta"], dtype=float))
    if kind == "neural_shape":
        spec = payload["shapes"]
        shapes = ShapeNetwork(
            spec["num_shapes"], spec["depth"], spec["units"], mlp=_mlp_from_dict(spec["mlp"])
        )
        indices = MultiIndexSet(np.array(payload["indices"], dtype=int))
        return NeuralShapeModel(shapes, indices, np.array(payload["readout"], dtype=float))
    if kind == "dense_net":
        return DenseNetModel(_mlp_from_dict(payload["mlp"]))
    raise DataShapeError(f"unknown model kind {kind!r}")


def save_model(path, model):
    save_json(path, model_to_dict(model))


def load_model(path):
    return model_from_dict(load_json(path))


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class Dataset:
    grid: TimeGrid
    clean: TrajectorySet | None = None
    noisy: TrajectorySet | None = None
    system: object | None = None
    noise: NoiseSpec | None = None
    meta: dict | None = None


def save_dataset(path, dataset):
    if dataset.clean is None and dataset.noisy is None:
        raise DataShapeError("dataset needs at least one of clean/noisy trajectories")
    meta = {
        "system": system_to_dict(dataset.system) if dataset.system is not None else None,
        "noise": (
            {"percent": dataset.noise.percent, "seed": dataset.noise.seed}
            if dataset.noise is not None
            else None
        ),
        "extra": dataset.meta or {},
    }
    arrays = {"times": dataset.grid.times, "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    if dataset.clean is not None:
        arrays["clean"] = dataset.clean.data
    if dataset.noisy is not None:
        arrays["noisy"] = dataset.noisy.data
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as handle:
            np.savez(handle, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path):
    with np.load(path) as archive:
        times = archive["times"]
        meta = json.loads(archive["meta"].tobytes().decode())
        clean = archive["clean"] if "clean" in archive else None
        noisy = archive["noisy"] if "noisy" in archive else None
    grid = TimeGrid(times)
    system = system_from_dict(meta["system"]) if meta.get("system") else None
    noise = NoiseSpec(**meta["noise"]) if meta.get("noise") else None
    return Dataset(
        grid=grid,
        clean=TrajectorySet(clean, grid) if clean is not None else None,
        noisy=TrajectorySet(noisy, grid) if noisy is not None else None,
        system=system,
        noise=noise,
        meta=meta.get("extra") or {},
    )


def trajectories_to_csv(path, traj):
    """One row per (trajectory, time): j, t, x_1 .. x_d."""
    header = ["j", "t"] + [f"x_{k + 1}" for k in range(traj.dim)]
    rows = []
    times = traj.grid.times
    for j in range(traj.num_trajectories):
        for i in range(traj.num_steps):
            rows.append([j, repr(float(times[i]))] + [repr(float(v)) for v in traj.data[j, i]])
    _write_csv(path, header, rows)


def phase_portrait_csv(path, points, values):
    d = points.shape[1]
    header = [f"x_{k + 1}" for k in range(d)] + [f"f_{k + 1}" for k in range(d)]
    rows = [
        [repr(float(v)) for v in np.concatenate([p, f])] for p, f in zip(points, values)
    ]
    _write_csv(path, header, rows)


def _write_csv(path, header, rows):
    import io as _io

    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Fit reports


def report_to_dict(report):
    return {
        "records": [asdict(r) for r in report.records],
        "model": model_to_dict(report.model),
        "termination": report.termination,
    }


def save_report(path, report):
    save_json(path, report_to_dict(report))


def load_report(path):
    payload = load_json(path)
    records = [IterationRecord(**r) for r in payload["records"]]
    return FitReport(records, model_from_dict(payload["model"]), None, payload["termination"])
