"""Alternating train/filter estimation and its block-coordinate variant.

One outer iteration retrains the vector-field model on the current filtered
states, then re-solves the states against an anchored objective: the residual
sum plus ``anchor_weight`` times the squared distance to either the previous
iterate (proximal mode) or the raw observations (penalty mode). Filter solves
keep the best visited iterate, so the anchored objective never ends up above
its value at the starting point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .dynamics import TimeGrid, TrajectorySet
from .errors import (
    ConfigError,
    DataShapeError,
    DivergenceError,
    SolverDivergenceError,
    UnsupportedModelError,
    VfieldError,
)
from .models import SindyModel, stlsq
from .objective import (
    CENTRAL_STENCILS,
    RESIDUAL_SCHEMES,
    objective_grad_theta,
    predicted_states,
    prediction_error,
    residual_objective,
    stencil_quotients,
)


@dataclass(frozen=True)
class GradientDescentSolver:
    """Fixed-step descent on the anchored objective, scaled per residual entry."""

    steps: int = 1000
    learning_rate: float = 3e-2

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("need at least one step", field="filter_solver.steps")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive", field="filter_solver.learning_rate")


@dataclass(frozen=True)
class LbfgsSolver:
    """Limited-memory quasi-Newton solve; tolerances default to scipy's."""

    max_iter: int = 500
    gtol: float | None = None
    ftol: float | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError("need at least one iteration", field="filter_solver.max_iter")


@dataclass(frozen=True)
class StlsqTrainer:
    threshold: float = 0.0
    max_iter: int = 10

    def __post_init__(self):
        if self.threshold < 0:
            raise ConfigError("threshold must be nonnegative", field="train_solver.threshold")


@dataclass(frozen=True)
class AdamTrainer:
    epochs: int = 100
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("need at least one epoch", field="train_solver.epochs")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive", field="train_solver.learning_rate")


@dataclass(frozen=True)
class PredictionErrorStopping:
    """Halt training once the predicted-state error stops improving."""

    patience: int = 5

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be at least 1", field="early_stopping.patience")


@dataclass(frozen=True)
class FitConfig:
    anchor_weight: float
    max_outer_iters: int = 50
    x_change_tol: float = 1e-4
    filter_mode: str = "proximal"  # or "penalty_to_data"
    filter_solver: object = GradientDescentSolver()
    train_solver: object = StlsqTrainer()
    early_stopping: PredictionErrorStopping | None = None
    residual: str = "euler"

    def __post_init__(self):
        if self.anchor_weight < 0:
            raise ConfigError("anchor weight must be nonnegative", field="fit.anchor_weight")
        if self.max_outer_iters < 1:
            raise ConfigError("need at least one outer iteration", field="fit.max_outer_iters")
        if self.x_change_tol < 0:
            raise ConfigError("tolerance must be nonnegative", field="fit.x_change_tol")
        if self.filter_mode not in ("proximal", "penalty_to_data"):
            raise ConfigError(f"unknown filter mode {self.filter_mode!r}", field="fit.filter_mode")
        if self.residual not in RESIDUAL_SCHEMES:
            raise ConfigError(f"unknown residual scheme {self.residual!r}", field="fit.residual")
        if not isinstance(self.filter_solver, (GradientDescentSolver, LbfgsSolver)):
            raise ConfigError("unknown filter solver", field="fit.filter_solver")
        if not isinstance(self.train_solver, (StlsqTrainer, AdamTrainer)):
            raise ConfigError("unknown train solver", field="fit.train_solver")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    x_change: float
    prediction_error: float | None = None


@dataclass
class FitReport:
    """History and outcome of one fitting run."""

    records: list
    model: object
    states: TrajectorySet
    termination: str


def _gd_minimize(value_and_grad, x0, solver):
    """Fixed-budget descent at the nominal rate, halving the step on overshoot.

    ``value_and_grad`` returns (tracked value, descent value, gradient); the
    iterate quality is judged by the tracked value while steps follow the
    descent objective's gradient. Each loop turn costs one evaluation, so the
    configured step count bounds the work exactly.
    """
    x = x0.copy()
    track, desc, grad_view = value_and_grad(x)
    if not np.isfinite(desc):
        raise SolverDivergenceError("nonfinite objective at the starting point", epoch=0)
    # The evaluator reuses its gradient buffer, so keep a private copy of the
    # gradient at the current point; rejected trial evaluations overwrite it.
    grad = grad_view.copy()
    best_track, best_x = track, x0.copy()
    rate = solver.learning_rate
    candidate = np.empty_like(x)
    for _ in range(solver.steps):
        np.multiply(grad, -rate, out=candidate)
        candidate += x
        track_c, desc_c, grad_c = value_and_grad(candidate)
        if not np.isfinite(desc_c) or desc_c > desc * (1.0 + 1e-12) + 1e-300:
            rate *= 0.5
            continue
        x, candidate = candidate, x
        desc = desc_c
        np.copyto(grad, grad_c)
        if track_c < best_track:
            best_track = track_c
            best_x = x.copy()
    return best_x, best_track


def _lbfgs_minimize(value_and_grad, x0, solver):
    best_track = np.inf
    best_x = x0.copy()

    def wrapped(x):
        nonlocal best_track, best_x
        track, desc, grad = value_and_grad(x)
        if np.isfinite(track) and track < best_track:
            best_track = track
            best_x = x.copy()
        if not np.isfinite(desc):
            # Keep the line search alive with a large finite value.
            desc = 1e300
            grad = np.where(np.isfinite(grad), grad, 0.0)
        # The evaluator reuses its gradient buffer; scipy holds references.
        return desc, np.array(grad)

    desc0, _ = wrapped(x0)
    if not np.isfinite(desc0):
        raise SolverDivergenceError("nonfinite objective at the starting point", epoch=0)
    options = {"maxiter": solver.max_iter}
    if solver.gtol is not None:
        options["gtol"] = solver.gtol
    if solver.ftol is not None:
        options["ftol"] = solver.ftol
    scipy.optimize.minimize(wrapped, x0, jac=True, method="L-BFGS-B", options=options)
    return best_x, best_track


def _window_evaluator(work, dw, model, anchor, weight, free, scheme):
    """Buffered anchored-objective evaluator over a state window.

    Returns a closure mapping the flattened free block to (plain anchored
    value, step-weighted anchored value, gradient of the weighted form). All
    intermediates live in preallocated scratch: solver loops call this
    thousands of times, and reallocation would dominate the runtime. The
    returned gradient is a reused buffer, valid until the next call.
    """
    n, tw, d = work.shape
    rows = n * tw
    width = free.stop - free.start
    if hasattr(model, "make_evaluator"):
        evaluate = model.make_evaluator(rows)  # vjp accepts accumulate=
    else:

        def evaluate(x2, _base=model.linearize):
            values, vjp0 = _base(x2)

            def vjp(v, accumulate=None):
                out = vjp0(v)
                if accumulate is None:
                    return out
                np.add(accumulate, out, out=accumulate)
                return accumulate

            return values, vjp
    inv_d = (1.0 / dw)[None, :, None]
    two_over = (2.0 / dw)[None, :, None]
    central = CENTRAL_STENCILS.get(scheme)
    n_resid = tw - 1 if central is None else tw - 2 * central[0]
    # Mean scaling keeps the descent gentle at every problem size: each outer
    # iteration nudges the states and retrains, instead of committing them to
    # an early (still wrong) model in one aggressive solve.
    scale = 1.0 / (n * n_resid * d)
    quot = np.empty((n, n_resid, d))
    resid = np.empty_like(quot)
    scaled = np.empty_like(quot)
    pred = np.empty_like(quot) if scheme == "ab2" else None
    cot = np.zeros((n, tw, d))
    grad = np.empty((n, tw, d))
    diff = np.empty((n, width, d))
    gfree = np.empty((n, width, d))

    def value_and_grad(flat):
        work[:, free] = flat.reshape(n, width, d)
        values, vjp = evaluate(work.reshape(rows, d))
        f3 = values.reshape(n, tw, d)
        if central is not None:
            half, weights = central
            quot[:] = 0.0
            for off, w in zip(range(-half, half + 1), weights):
                if w != 0.0:
                    quot[:] += (w / dw[0]) * work[:, half + off : tw - half + off]
            np.subtract(quot, f3[:, half : tw - half], out=resid)
        else:
            np.subtract(work[:, 1:], work[:, :-1], out=quot)
            np.multiply(quot, inv_d, out=quot)
            if scheme == "euler":
                np.subtract(quot, f3[:, :-1], out=resid)
            else:
                pred[:, 0] = f3[:, 0]
                np.multiply(f3[:, 1:-1], 1.5, out=pred[:, 1:])
                pred[:, 1:] -= 0.5 * f3[:, :-2]
                np.subtract(quot, pred, out=resid)
        plain = float(np.vdot(resid, resid))
        if central is not None:
            half, weights = central
            grad[:] = 0.0
            for off, w in zip(range(-half, half + 1), weights):
                if w != 0.0:
                    grad[:, half + off : tw - half + off] += (2.0 * w / dw[0]) * resid
            np.multiply(resid, -2.0, out=cot[:, half : tw - half])
        else:
            np.multiply(resid, two_over, out=scaled)
            # Quotient part of the gradient, written directly (no accumulation).
            np.subtract(scaled[:, :-1], scaled[:, 1:], out=grad[:, 1:-1])
            np.negative(scaled[:, 0], out=grad[:, 0])
            grad[:, -1] = scaled[:, -1]
            if scheme == "euler":
                np.multiply(resid, -2.0, out=cot[:, :-1])
            else:
                np.multiply(resid, -3.0, out=cot[:, :-1])
                cot[:, 0] += resid[:, 0]
                cot[:, :-2] += resid[:, 1:]
        vjp(cot.reshape(rows, d), accumulate=grad.reshape(rows, d))
        np.subtract(work[:, free], anchor, out=diff)
        prox = weight * float(np.vdot(diff, diff))
        np.multiply(diff, 2.0 * weight, out=gfree)
        np.add(gfree, grad[:, free], out=gfree)
        np.multiply(gfree, scale, out=gfree)
        total = plain + prox
        return total, scale * total, gfree.reshape(-1)

    return value_and_grad


def _anchored_solve(data, deltas, model, anchor, weight, solver, lo, hi, scheme):
    """Minimize the anchored objective over states ``[:, lo:hi]``.

    ``data`` is the full (N, T, d) starting iterate and is not mutated; the
    residual window extends one step left of ``lo`` so boundary terms that
    couple the free block to fixed states are part of the block objective.

    The solver descends the anchored objective divided by the number of
    residual entries (argmin unchanged); the returned iterate is the best
    visited point, so the anchored objective never exceeds its value at the
    starting point.
    """
    n, t, d = data.shape
    if scheme != "euler" and not (lo == 0 and hi == t):
        raise ConfigError("windowed filtering supports only the euler residual")
    rlo = max(lo - 1, 0)
    rhi = min(hi, t - 1)  # residual indices [rlo, rhi)
    work = data[:, rlo : rhi + 1].copy()
    dw = deltas[rlo:rhi]
    free = slice(lo - rlo, hi - rlo)
    width = hi - lo
    value_and_grad = _window_evaluator(work, dw, model, anchor, weight, free, scheme)
    x0 = data[:, lo:hi].ravel().copy()
    # Trial points may overflow before the safeguard rejects them.
    with np.errstate(over="ignore", invalid="ignore"):
        if isinstance(solver, GradientDescentSolver):
            best_x, _ = _gd_minimize(value_and_grad, x0, solver)
        else:
            best_x, _ = _lbfgs_minimize(value_and_grad, x0, solver)
    out = data.copy()
    out[:, lo:hi] = best_x.reshape(n, width, d)
    return out


def _monitor_error(model, states):
    """Predicted-state error against the current filtered states (inf on blowup)."""
    try:
        pred = predicted_states(model, states.data[:, 0], states.grid, scheme="rk4")
    except DivergenceError:
        return float("inf")
    return prediction_error(pred, states)


def _stlsq_design(states, dictionary, scheme):
    """Feature/target matrices whose least-squares fit minimizes the objective."""
    data = states.data
    n, t, d = data.shape
    deltas = states.grid.deltas
    if scheme in CENTRAL_STENCILS:
        half = CENTRAL_STENCILS[scheme][0]
        targets = stencil_quotients(data, deltas[0], scheme).reshape(-1, d)
        feats = dictionary.features(data[:, half : t - half].reshape(-1, d))
        return feats, targets
    targets = ((data[:, 1:] - data[:, :-1]) / deltas[None, :, None]).reshape(-1, d)
    feats = dictionary.features(data[:, :-1].reshape(-1, d))
    if scheme == "ab2":
        feats = feats.reshape(n, t - 1, -1)
        eff = feats.copy()
        eff[:, 1:] = 1.5 * feats[:, 1:] - 0.5 * feats[:, :-1]
        feats = eff.reshape(n * (t - 1), -1)
    return feats, targets


def _train_step_info(states, model, config):
    trainer = config.train_solver
    if isinstance(trainer, StlsqTrainer):
        if not isinstance(model, SindyModel):
            raise UnsupportedModelError("thresholded least-squares training needs a SindyModel")
        feats, targets = _stlsq_design(states, model.dictionary, config.residual)
        theta = stlsq(feats, targets, trainer.threshold, trainer.max_iter)
        return SindyModel(model.dictionary, theta), None
    return _train_adam(states, model, trainer, config.early_stopping, config.residual)


def train_step(states, model, config):
    """One model-training pass on fixed states; returns the updated model."""
    new_model, _ = _train_step_info(states, model, config)
    return new_model


def _train_adam(states, model, trainer, early, scheme):
    params = [p.copy() for p in model.param_arrays()]
    first = [np.zeros_like(p) for p in params]
    second = [np.zeros_like(p) for p in params]
    current = model.with_params(params)
    best_err = None
    best_params = None
    since_best = 0
    if early is not None:
        best_err = _monitor_error(current, states)
        best_params = [p.copy() for p in params]
    last_err = best_err
    for epoch in range(1, trainer.epochs + 1):
        grads = objective_grad_theta(states, current, scheme)
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise SolverDivergenceError(f"nonfinite training gradient at epoch {epoch}", epoch=epoch)
        bc1 = 1.0 - trainer.beta1**epoch
        bc2 = 1.0 - trainer.beta2**epoch
        for p, g, m, v in zip(params, grads, first, second):
            m *= trainer.beta1
            m += (1.0 - trainer.beta1) * g
            v *= trainer.beta2
            v += (1.0 - trainer.beta2) * g * g
            p -= trainer.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + trainer.eps)
        current = model.with_params(params)
        if early is not None:
            err = _monitor_error(current, states)
            last_err = err
            if err < best_err:
                best_err = err
                best_params = [p.copy() for p in params]
                since_best = 0
            else:
                since_best += 1
                if since_best >= early.patience:
                    break
    if early is not None:
        return model.with_params(best_params), best_err
    return current, last_err


def filter_step(states_prev, data, model, config):
    """Re-solve the states against the anchored objective over the full window."""
    if states_prev.data.shape != data.data.shape:
        raise DataShapeError("previous states and data must have matching shapes")
    anchor = states_prev if config.filter_mode == "proximal" else data
    updated = _anchored_solve(
        states_prev.data,
        states_prev.grid.deltas,
        model,
        anchor.data,
        config.anchor_weight,
        config.filter_solver,
        0,
        states_prev.num_steps,
        config.residual,
    )
    return TrajectorySet(updated, states_prev.grid)


def _with_iteration_context(exc, iteration):
    exc.args = (f"outer iteration {iteration}: {exc.args[0] if exc.args else exc}",)
    return exc


def alternate(data, model, config):
    """Alternate training and filtering from states initialized to the data."""
    states = data.copy()
    records = []
    termination = "max_outer_iters"
    for k in range(1, config.max_outer_iters + 1):
        try:
            model, pred_err = _train_step_info(states, model, config)
            new_states = filter_step(states, data, model, config)
        except VfieldError as exc:
            raise _with_iteration_context(exc, k)
        change = float(np.linalg.norm(new_states.data - states.data))
        states = new_states
        records.append(
            IterationRecord(k, residual_objective(states, model, config.residual), change, pred_err)
        )
        if change < config.x_change_tol:
            termination = "x_change_tol"
            break
    return FitReport(records, model, states, termination)


@dataclass
class StateBlock:
    """One time-contiguous half of a trajectory set (may be a single step)."""

    data: np.ndarray  # (N, t, d)
    times: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.data.ndim != 3 or self.data.shape[1] != self.times.size:
            raise DataShapeError("block data must be (N, t, d) matching its times")


def split_states(states):
    """Split into first-half and second-half time blocks (floor split)."""
    if states.num_steps < 2:
        raise DataShapeError("need at least two steps to split")
    half = states.num_steps // 2
    times = states.grid.times
    first = StateBlock(states.data[:, :half].copy(), times[:half].copy())
    second = StateBlock(states.data[:, half:].copy(), times[half:].copy())
    return first, second


def recombine_states(first, second):
    """Inverse of :func:`split_states`."""
    if first.data.shape[0] != second.data.shape[0] or first.data.shape[2] != second.data.shape[2]:
        raise DataShapeError("blocks disagree on trajectory count or dimension")
    data = np.concatenate([first.data, second.data], axis=1)
    times = np.concatenate([first.times, second.times])
    return TrajectorySet(data, TimeGrid(times))


def bcd(data, model, config):
    """Block-coordinate variant: train, filter the second half, then the first.

    Requires a dictionary model so that every subproblem stays convex in its
    block; boundary residuals at the split index belong to both block
    objectives.
    """
    if not isinstance(model, SindyModel):
        raise UnsupportedModelError("block-coordinate descent requires a SindyModel")
    if not isinstance(config.train_solver, StlsqTrainer):
        raise ConfigError("block-coordinate descent trains with stlsq", field="fit.train_solver")
    half = data.num_steps // 2
    deltas = data.grid.deltas
    states = data.copy()
    records = []
    termination = "max_outer_iters"
    for k in range(1, config.max_outer_iters + 1):
        try:
            model, _ = _train_step_info(states, model, config)
            anchor = states if config.filter_mode == "proximal" else data
            arr = _anchored_solve(
                states.data, deltas, model, anchor.data[:, half:],
                config.anchor_weight, config.filter_solver, half, data.num_steps, config.residual,
            )
            arr = _anchored_solve(
                arr, deltas, model, anchor.data[:, :half],
                config.anchor_weight, config.filter_solver, 0, half, config.residual,
            )
        except VfieldError as exc:
            raise _with_iteration_context(exc, k)
        change = float(np.linalg.norm(arr - states.data))
        states = TrajectorySet(arr, data.grid)
        records.append(
            IterationRecord(k, residual_objective(states, model, config.residual), change, None)
        )
        if change < config.x_change_tol:
            termination = "x_change_tol"
            break
    return FitReport(records, model, states, termination)
