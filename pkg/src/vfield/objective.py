"""Discrete residual objective, its exact gradients, and forward prediction.

The objective sums, over trajectories and steps, the squared mismatch between
difference quotients and the model field evaluated along the states. The
default residual pairs the forward quotient with the field at the left point
(first-order, usable on any grid). Higher-order variants for uniform grids:
"ab2" predicts the forward quotient from two field evaluations, while the
centered stencils "central2"/"central4"/"central6" compare a symmetric
derivative estimate against the field at the stencil center, trading a
shorter usable range for much smaller discretization bias.
"""

from __future__ import annotations

import numpy as np

from .dynamics import TrajectorySet, integrate_batch
from .errors import DataShapeError, NonUniformGridError

# Centered stencils: offsets are symmetric around the evaluation point and
# weights (divided by the step) estimate the time derivative there.
CENTRAL_STENCILS = {
    "central2": (1, np.array([-1.0, 0.0, 1.0]) / 2.0),
    "central4": (2, np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0),
    "central6": (3, np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0),
}

RESIDUAL_SCHEMES = ("euler", "ab2") + tuple(CENTRAL_STENCILS)


def _check_scheme(scheme, deltas):
    if scheme not in RESIDUAL_SCHEMES:
        raise DataShapeError(f"unknown residual scheme {scheme!r}")
    if scheme != "euler" and not np.allclose(deltas, deltas[0], rtol=1e-9, atol=0.0):
        raise NonUniformGridError(f"{scheme} residuals require a uniform grid")
    if scheme in CENTRAL_STENCILS:
        half = CENTRAL_STENCILS[scheme][0]
        if deltas.size < 2 * half + 1:
            raise DataShapeError(f"{scheme} needs at least {2 * half + 2} time points")


def stencil_quotients(data, delta, scheme):
    """Centered derivative estimates at interior points, shape (n, t-2*half, d)."""
    half, weights = CENTRAL_STENCILS[scheme]
    t = data.shape[1]
    out = np.zeros((data.shape[0], t - 2 * half, data.shape[2]))
    for off, w in zip(range(-half, half + 1), weights):
        if w != 0.0:
            out += (w / delta) * data[:, half + off : t - half + off]
    return out


def _residuals(data, deltas, model, scheme):
    """Residual tensor R, field values F (all points), and the model VJP closure."""
    n, t, d = data.shape
    values, vjp = model.linearize(data.reshape(-1, d))
    f = values.reshape(n, t, d)
    if scheme in CENTRAL_STENCILS:
        half = CENTRAL_STENCILS[scheme][0]
        resid = stencil_quotients(data, deltas[0], scheme) - f[:, half : t - half]
        return resid, f, vjp
    quot = (data[:, 1:] - data[:, :-1]) / deltas[None, :, None]
    if scheme == "euler":
        pred = f[:, :-1]
    else:
        pred = f[:, :-1].copy()
        pred[:, 1:] = 1.5 * f[:, 1:-1] - 0.5 * f[:, :-2]
    return quot - pred, f, vjp


def _field_cotangents(resid, scheme, t):
    """dE/dF_i over all t evaluation points, given the residual tensor."""
    n, _, d = resid.shape
    cot = np.zeros((n, t, d))
    if scheme == "euler":
        cot[:, :-1] = -2.0 * resid
    elif scheme == "ab2":
        cot[:, 0] = -2.0 * resid[:, 0]
        if resid.shape[1] > 1:
            cot[:, 1:-1] = -3.0 * resid[:, 1:]
            cot[:, 0 : resid.shape[1] - 1] += resid[:, 1:]
    else:
        half = CENTRAL_STENCILS[scheme][0]
        cot[:, half : t - half] = -2.0 * resid
    return cot


def residual_objective(states, model, scheme="euler"):
    """Sum of squared difference-quotient residuals over all trajectories."""
    if states.num_steps < 2:
        raise DataShapeError("need at least two time steps")
    deltas = states.grid.deltas
    _check_scheme(scheme, deltas)
    resid, _, _ = _residuals(states.data, deltas, model, scheme)
    return float(np.sum(resid * resid))


def objective_grad_theta(states, model, scheme="euler"):
    """Exact parameter gradient of the residual objective."""
    deltas = states.grid.deltas
    _check_scheme(scheme, deltas)
    n, t, d = states.data.shape
    resid, _, _ = _residuals(states.data, deltas, model, scheme)
    cot = _field_cotangents(resid, scheme, t)
    return model.param_grad(states.data.reshape(-1, d), cot.reshape(-1, d))


def _state_gradient(data, deltas, model, scheme):
    """Objective value and its gradient with respect to every state entry."""
    n, t, d = data.shape
    resid, _, vjp = _residuals(data, deltas, model, scheme)
    value = float(np.sum(resid * resid))
    grad = np.zeros_like(data)
    if scheme in CENTRAL_STENCILS:
        half, weights = CENTRAL_STENCILS[scheme]
        for off, w in zip(range(-half, half + 1), weights):
            if w != 0.0:
                grad[:, half + off : t - half + off] += (2.0 * w / deltas[0]) * resid
    else:
        scaled = 2.0 * resid / deltas[None, :, None]
        grad[:, 1:] += scaled
        grad[:, :-1] -= scaled
    cot = _field_cotangents(resid, scheme, t)
    grad += vjp(cot.reshape(-1, d)).reshape(n, t, d)
    return value, grad

def objective_grad_states(states, model, scheme="euler"):
    """Exact gradient of the residual objective with respect to the states.

    Each interior state enters the forward difference at its own step and the
    previous one, plus the model term through the input Jacobian.
    """
    deltas = states.grid.deltas
    _check_scheme(scheme, deltas)
    _, grad = _state_gradient(states.data, deltas, model, scheme)
    return grad


def predicted_states(model, init_states, grid, scheme="rk4", substeps=100):
    """Integrate the estimated field from per-trajectory initial conditions."""
    inits = np.atleast_2d(np.asarray(init_states, dtype=float))
    return integrate_batch(model.eval, inits, grid, scheme=scheme, substeps=substeps)


def prediction_error(predicted, reference):
    """Mean absolute error over all (trajectory, time, component) entries."""
    a = predicted.data if isinstance(predicted, TrajectorySet) else np.asarray(predicted)
    b = reference.data if isinstance(reference, TrajectorySet) else np.asarray(reference)
    if a.shape != b.shape:
        raise DataShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))
