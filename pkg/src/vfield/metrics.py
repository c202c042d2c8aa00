"""Quantitative evaluation of estimated fields, filtered states, and predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import TimeGrid, TrajectorySet
from .errors import ConfigError, DataShapeError, UnrepresentableTermError
from .objective import predicted_states, prediction_error


@dataclass(frozen=True)
class EvalGrid:
    """Uniform lattice over a box, used to compare vector fields pointwise."""

    bounds: tuple  # ((lo, hi), ...) per dimension
    counts: tuple  # points per dimension

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        counts = tuple(int(c) for c in self.counts)
        if len(bounds) != len(counts) or not bounds:
            raise ConfigError("bounds and counts must align", field="metrics.eval_grid")
        for (lo, hi), c in zip(bounds, counts):
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ConfigError("bounds must be finite with lo < hi", field="metrics.eval_grid")
            if c < 2:
                raise ConfigError("need at least two points per dimension", field="metrics.eval_grid")
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "counts", counts)

    @classmethod
    def square(cls, lo, hi, dim, points_per_dim):
        return cls(tuple((lo, hi) for _ in range(dim)), tuple(points_per_dim for _ in range(dim)))

    @property
    def dim(self):
        return len(self.bounds)

    @property
    def num_points(self):
        return int(np.prod(self.counts))

    def lattice(self):
        axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(self.bounds, self.counts)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _field_values(field, points):
    fn = field.eval if hasattr(field, "eval") else field
    values = np.asarray(fn(points), dtype=float)
    if values.shape != points.shape:
        raise DataShapeError(f"field returned shape {values.shape}, expected {points.shape}")
    return values


def vector_field_error(estimated, truth, grid):
    """Mean absolute difference between two fields over the lattice."""
    points = grid.lattice()
    return float(np.mean(np.abs(_field_values(estimated, points) - _field_values(truth, points))))


def state_error(filtered, clean):
    """Mean absolute error between filtered and reference states."""
    return prediction_error(filtered, clean)


def phase_portrait_samples(model, grid):
    """Lattice points paired with field evaluations, ready for quiver plots."""
    points = grid.lattice()
    return points, _field_values(model, points)


def predict_with_reset(model, filtered, grid, reset_times, scheme="rk4", substeps=100):
    """Integrate the model from filtered initial conditions, re-anchoring at resets.

    At every reset time (a grid point covered by the filtered states) the
    running state is replaced by the filtered estimate before integration
    continues; with no reset times this is exactly forward prediction.
    """
    times = grid.times
    reset_idx = []
    for t_reset in sorted(float(t) for t in reset_times):
        hits = np.flatnonzero(np.isclose(times, t_reset, rtol=0.0, atol=1e-9))
        if hits.size == 0:
            raise ConfigError(f"reset time {t_reset:g} is not a grid point", field="reset_times")
        idx = int(hits[0])
        if idx >= filtered.num_steps:
            raise ConfigError(
                f"reset time {t_reset:g} lies outside the filtered range", field="reset_times"
            )
        if idx > 0 and idx not in reset_idx:
            reset_idx.append(idx)
    out = np.empty((filtered.num_trajectories, len(times), filtered.dim))
    # Every segment starts at a filtered state: the initial condition or a reset.
    for s, e in zip([0] + reset_idx, reset_idx + [len(times) - 1]):
        out[:, s] = filtered.data[:, s]
        if e > s:
            seg = predicted_states(
                model, filtered.data[:, s], TimeGrid(times[s : e + 1]),
                scheme=scheme, substeps=substeps,
            )
            out[:, s : e + 1] = seg.data
    return TrajectorySet(out, grid)


def true_sindy_coefficients(system, dictionary):
    """Exact dictionary coefficients of a polynomial system's right-hand side.

    Works for any system exposing ``polynomial_expansion()``: one dict per
    output dimension mapping exponent tuples to coefficients.
    """
    if not hasattr(system, "polynomial_expansion"):
        raise UnrepresentableTermError(f"no polynomial expansion for {type(system).__name__}")
    expansion = system.polynomial_expansion()
    if dictionary.dimension != system.dim:
        raise DataShapeError(
            f"dictionary dimension {dictionary.dimension} != system dimension {system.dim}"
        )
    row_of = {tuple(int(e) for e in row): r for r, row in enumerate(dictionary.exponents)}
    theta = np.zeros((dictionary.size, dictionary.dimension))
    for out_dim, terms in enumerate(expansion):
        for exponent, coef in terms.items():
            if exponent not in row_of:
                monomial = "*".join(
                    f"x{k}^{e}" for k, e in enumerate(exponent) if e > 0
                ) or "1"
                raise UnrepresentableTermError(
                    f"dictionary is missing monomial {monomial} needed by output {out_dim}"
                )
            theta[row_of[exponent], out_dim] = coef
    return theta


@dataclass(frozen=True)
class SupportReport:
    exact_match: bool
    precision: float
    recall: float


def support_accuracy(estimated, true, zero_tol=0.2):
    """Compare sparsity patterns after zeroing entries below ``zero_tol``."""
    est = np.asarray(estimated, dtype=float)
    ref = np.asarray(true, dtype=float)
    if est.shape != ref.shape:
        raise DataShapeError(f"shape mismatch {est.shape} vs {ref.shape}")
    est_nz = np.abs(est) >= zero_tol
    ref_nz = np.abs(ref) >= zero_tol
    hits = int(np.sum(est_nz & ref_nz))
    n_est = int(est_nz.sum())
    n_ref = int(ref_nz.sum())
    precision = hits / n_est if n_est else 1.0
    recall = hits / n_ref if n_ref else 1.0
    return SupportReport(bool(np.array_equal(est_nz, ref_nz)), precision, recall)
