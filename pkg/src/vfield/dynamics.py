"""Ground-truth ODE systems, explicit integration, and synthetic datasets.

State arrays are laid out as (num_trajectories, num_steps, dim) throughout;
right-hand sides are vectorized over leading axes so a whole batch of
trajectories advances in one call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DataShapeError,
    DivergenceError,
    InvalidStateError,
    NonUniformGridError,
)

# States beyond this magnitude abort integration before float64 overflow.
DIVERGENCE_CAP = 1e6


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing observation times shared by a set of trajectories."""

    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise DataShapeError("time grid needs a 1-D array of at least two times")
        if not np.all(np.isfinite(times)):
            raise DataShapeError("time grid contains nonfinite values")
        if not np.all(np.diff(times) > 0.0):
            raise DataShapeError("time grid must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, t_start, t_stop, num_points):
        return cls(np.linspace(float(t_start), float(t_stop), int(num_points)))

    @property
    def deltas(self):
        return np.diff(self.times)

    @property
    def is_uniform(self):
        d = self.deltas
        return bool(np.allclose(d, d[0], rtol=1e-9, atol=0.0))

    def head(self, num_points):
        """Grid of the first ``num_points`` times."""
        return TimeGrid(self.times[:num_points].copy())

    def __len__(self):
        return self.times.size


@dataclass
class TrajectorySet:
    """N trajectories of T d-dimensional states observed on a shared grid."""

    data: np.ndarray  # (N, T, d)
    grid: TimeGrid

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 3:
            raise DataShapeError(f"trajectory data must be (N, T, d), got {data.shape}")
        if data.shape[0] < 1 or data.shape[2] < 1:
            raise DataShapeError("need at least one trajectory and one state dimension")
        if data.shape[1] != len(self.grid):
            raise DataShapeError(
                f"trajectory length {data.shape[1]} does not match grid length {len(self.grid)}"
            )
        if not np.all(np.isfinite(data)):
            raise DataShapeError("trajectory data contains nonfinite values")
        self.data = data

    @property
    def num_trajectories(self):
        return self.data.shape[0]

    @property
    def num_steps(self):
        return self.data.shape[1]

    @property
    def dim(self):
        return self.data.shape[2]

    def copy(self):
        return TrajectorySet(self.data.copy(), self.grid)

    def head_steps(self, num_points):
        """Restrict every trajectory to its first ``num_points`` observations."""
        if not 2 <= num_points <= self.num_steps:
            raise DataShapeError(f"cannot restrict {self.num_steps} steps to {num_points}")
        return TrajectorySet(self.data[:, :num_points].copy(), self.grid.head(num_points))

    def select(self, indices):
        """Subset of trajectories, preserving order of ``indices``."""
        idx = np.asarray(indices, dtype=int)
        return TrajectorySet(self.data[idx].copy(), self.grid)


@dataclass(frozen=True)
class NoiseSpec:
    """Mean-zero Gaussian noise scaled per component as a percentage of its std."""

    percent: float
    seed: int = 0

    def __post_init__(self):
        if self.percent < 0:
            raise ConfigError("noise percent must be nonnegative", field="noise.percent")


@dataclass(frozen=True)
class FitzHughNagumo:
    """Two-dimensional relaxation oscillator with cubic nonlinearity."""

    a: float = 0.5
    b: float = 0.2
    c: float = 3.0

    def __post_init__(self):
        if self.c == 0:
            raise ConfigError("parameter c must be nonzero", field="system.c")

    @property
    def dim(self):
        return 2

    def rhs(self, state):
        return fhn_rhs(state, self.a, self.b, self.c)

    def polynomial_expansion(self):
        """Exact monomial expansion per output: list of {exponent tuple: coef}."""
        a, b, c = self.a, self.b, self.c
        return [
            {(1, 0): c, (3, 0): -c / 3.0, (0, 1): c},
            {(1, 0): -1.0 / c, (0, 0): a / c, (0, 1): -b / c},
        ]


@dataclass(frozen=True)
class MassSpringRing:
    """Ring of identical masses coupled by springs with force F(u) = k1*u + k3*u^3."""

    num_masses: int = 3
    linear_coef: float = 16.0
    cubic_coef: float = -1.0

    def __post_init__(self):
        if self.num_masses < 2:
            raise ConfigError("ring needs at least two masses", field="system.num_masses")

    @property
    def dim(self):
        return 2 * self.num_masses

    def force(self, u):
        return self.linear_coef * u + self.cubic_coef * u**3

    def rhs(self, state):
        return mass_spring_rhs(state, self.force, self.num_masses)

    def polynomial_expansion(self):
        """Exact monomial expansion per output: list of {exponent tuple: coef}."""
        m = self.num_masses
        k1, k3 = self.linear_coef, self.cubic_coef
        dim = 2 * m

        def unit(var):
            e = [0] * dim
            e[var] = 1
            return tuple(e)

        def add(terms, exponent, coef):
            terms[exponent] = terms.get(exponent, 0.0) + coef

        def cubic(terms, i, j, sign):
            # sign * k3 * (x_i - x_j)^3
            for p, coef in ((3, 1.0), (2, -3.0), (1, 3.0), (0, -1.0)):
                e = [0] * dim
                e[i] += p
                e[j] += 3 - p
                add(terms, tuple(e), sign * k3 * coef)

        out = [{unit(m + i): 1.0} for i in range(m)]  # position derivatives
        for i in range(m):
            left = (i - 1) % m
            right = (i + 1) % m
            terms = {}
            add(terms, unit(i), 2.0 * k1)
            add(terms, unit(left), -k1)
            add(terms, unit(right), -k1)
            cubic(terms, i, left, 1.0)
            cubic(terms, right, i, -1.0)
            out.append({e: c for e, c in terms.items() if c != 0.0})
        return out


def _check_state(state):
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise InvalidStateError("state contains nonfinite values")
    return state


def fhn_rhs(state, a=0.5, b=0.2, c=3.0):
    """Time derivative of the (x0, x1) oscillator state; batched over leading axes."""
    if c == 0:
        raise ConfigError("parameter c must be nonzero", field="system.c")
    state = _check_state(state)
    x0 = state[..., 0]
    x1 = state[..., 1]
    dx0 = c * (x0 - x0**3 / 3.0 + x1)
    dx1 = -(x0 - a + b * x1) / c
    return np.stack([dx0, dx1], axis=-1)


def mass_spring_rhs(state, force, num_masses=None):
    """First-order form of the spring ring: positions first, velocities second.

    ``state[..., :M]`` are displacements, ``state[..., M:]`` velocities; ring
    indexing wraps so mass 0 neighbors mass M-1.
    """
    state = _check_state(state)
    if state.shape[-1] % 2 != 0:
        raise DataShapeError("mass-spring state must have even dimension (x..., v...)")
    m = state.shape[-1] // 2
    if num_masses is not None and num_masses != m:
        raise DataShapeError(f"state dimension {state.shape[-1]} does not match M={num_masses}")
    x = state[..., :m]
    v = state[..., m:]
    left = np.roll(x, 1, axis=-1)    # x_{i-1}
    right = np.roll(x, -1, axis=-1)  # x_{i+1}
    accel = force(x - left) - force(right - x)
    return np.concatenate([v, accel], axis=-1)


def _rk4_step(rhs, state, dt):
    k1 = rhs(state)
    k2 = rhs(state + 0.5 * dt * k1)
    k3 = rhs(state + 0.5 * dt * k2)
    k4 = rhs(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_divergence(state, step, times):
    bad = ~np.all(np.isfinite(state), axis=-1) | (np.max(np.abs(state), axis=-1) > DIVERGENCE_CAP)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise DivergenceError(
            f"integration diverged at step {step} (t={times[step]:g}) in trajectory {j}",
            step=step,
            trajectory=j,
            time=float(times[step]),
        )


def integrate_batch(rhs, inits, grid, scheme="rk4", substeps=100):
    """Integrate ``xdot = rhs(x)`` from each row of ``inits`` over ``grid``.

    scheme is one of "euler", "rk4", or "rk4_fine"; the fine variant subdivides
    every grid interval into ``substeps`` RK4 steps for reference-quality
    solutions.
    """
    inits = np.atleast_2d(np.asarray(inits, dtype=float))
    if inits.ndim != 2:
        raise DataShapeError("initial conditions must be a (N, d) array")
    if scheme not in ("euler", "rk4", "rk4_fine"):
        raise ConfigError(f"unknown integration scheme {scheme!r}", field="scheme")
    times = grid.times
    n, d = inits.shape
    out = np.empty((n, len(grid), d))
    out[:, 0] = inits
    state = inits.copy()
    _check_divergence(state, 0, times)
    for i, dt in enumerate(grid.deltas):
        if scheme == "euler":
            state = state + dt * rhs(state)
        elif scheme == "rk4":
            state = _rk4_step(rhs, state, dt)
        else:
            h = dt / substeps
            for _ in range(substeps):
                state = _rk4_step(rhs, state, h)
        _check_divergence(state, i + 1, times)
        out[:, i + 1] = state
    return TrajectorySet(out, grid)


def integrate(rhs, x0, grid, scheme="rk4", substeps=100):
    """Single-trajectory convenience wrapper around :func:`integrate_batch`."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return integrate_batch(rhs, x0[None, :], grid, scheme=scheme, substeps=substeps)


def noise_scales(clean, percent):
    """Per-component noise std: percent of each component's std over the whole set."""
    return (percent / 100.0) * clean.data.std(axis=(0, 1))


def add_noise(clean, spec):
    """Observation noise y = x + eps with eps ~ N(0, sigma_k^2) per component.

    Deterministic given ``spec.seed``; the trajectory at position j draws from
    the substream seeded by (seed, j), so trajectories can be corrupted in any
    order (or in parallel) without changing the result.
    """
    if spec.percent == 0:
        return clean.copy()
    sigma = noise_scales(clean, spec.percent)
    noisy = np.empty_like(clean.data)
    t, d = clean.num_steps, clean.dim
    for j in range(clean.num_trajectories):
        rng = np.random.default_rng([spec.seed, j])
        noisy[j] = clean.data[j] + rng.standard_normal((t, d)) * sigma
    return TrajectorySet(noisy, clean.grid)


def generate_dataset(system, inits, grid, noise, scheme="rk4_fine", substeps=100):
    """Integrate every initial condition and return (clean, noisy) sets."""
    inits = np.atleast_2d(np.asarray(inits, dtype=float))
    if inits.size == 0:
        raise DataShapeError("need at least one initial condition")
    if inits.shape[1] != system.dim:
        raise DataShapeError(
            f"initial conditions have dimension {inits.shape[1]}, system expects {system.dim}"
        )
    clean = integrate_batch(system.rhs, inits, grid, scheme=scheme, substeps=substeps)
    noisy = add_noise(clean, noise)
    return clean, noisy


def grid_initial_conditions(bounds, counts):
    """Equispaced lattice of initial conditions, e.g. a 20x20 grid on a square."""
    axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def uniform_initial_conditions(bounds, count, seed):
    """``count`` initial conditions sampled uniformly from a box."""
    rng = np.random.default_rng(seed)
    bounds = np.asarray(bounds, dtype=float)
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (hi - lo) * rng.random((int(count), bounds.shape[0]))


def reshape_trajectory(traj, segment_length):
    """Cut one long trajectory into T/segment_length shorter ones.

    Requires a uniform grid and exact divisibility; concatenating the output
    segments in order reproduces the input series.
    """
    if traj.num_trajectories != 1:
        raise DataShapeError("reshape expects a single trajectory")
    segment_length = int(segment_length)
    if segment_length < 2:
        raise DataShapeError("segment length must be at least 2")
    t = traj.num_steps
    if t % segment_length != 0:
        raise DataShapeError(f"{t} steps not divisible into segments of {segment_length}")
    if not traj.grid.is_uniform:
        raise NonUniformGridError("reshaping requires uniform time spacing")
    data = traj.data.reshape(t // segment_length, segment_length, traj.dim).copy()
    return TrajectorySet(data, traj.grid.head(segment_length))


def system_to_dict(system):
    if isinstance(system, FitzHughNagumo):
        return {"kind": "fitzhugh_nagumo", "a": system.a, "b": system.b, "c": system.c}
    if isinstance(system, MassSpringRing):
        return {
            "kind": "mass_spring_ring",
            "num_masses": system.num_masses,
            "linear_coef": system.linear_coef,
            "cubic_coef": system.cubic_coef,
        }
    raise ConfigError(f"unknown system type {type(system).__name__}", field="system")


def system_from_dict(payload):
    kind = payload.get("kind")
    if kind == "fitzhugh_nagumo":
        return FitzHughNagumo(a=payload["a"], b=payload["b"], c=payload["c"])
    if kind == "mass_spring_ring":
        return MassSpringRing(
            num_masses=payload["num_masses"],
            linear_coef=payload["linear_coef"],
            cubic_coef=payload["cubic_coef"],
        )
    raise ConfigError(f"unknown system kind {kind!r}", field="system.kind")
