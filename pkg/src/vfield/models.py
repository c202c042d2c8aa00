"""Polynomial dictionary vector fields and sequentially thresholded least squares.

Monomials are ordered graded-lexicographically: ascending total degree, and
within a degree descending lexicographic exponent tuples, so for two variables
degree two reads x1^2, x1*x2, x2^2. The ordering is deterministic and is part
of the serialization format.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import DataShapeError, RankDeficientDesignWarning


def _compositions(total, parts):
    """Exponent tuples with the given sum, in descending lexicographic order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def monomial_exponents(dimension, max_degree, include_constant=False):
    """All exponent rows up to ``max_degree`` in graded-lexicographic order."""
    rows = []
    for degree in range(0 if include_constant else 1, max_degree + 1):
        rows.extend(_compositions(degree, dimension))
    return np.array(rows, dtype=int).reshape(len(rows), dimension)


class PolynomialDictionary:
    """A fixed set of monomial features of a d-dimensional state.

    The default table holds every monomial up to ``max_degree`` (minus the
    constant unless requested); a custom exponent table restricted to a subset
    of those monomials may be supplied instead.
    """

    def __init__(self, dimension, max_degree, include_constant=False, exponents=None):
        self.dimension = int(dimension)
        self.max_degree = int(max_degree)
        self.include_constant = bool(include_constant)
        if self.dimension < 1 or self.max_degree < 1:
            raise DataShapeError("dictionary needs dimension >= 1 and max_degree >= 1")

        # Complete graded table (constant included) used internally so that the
        # derivative of any row is again a table entry.
        self._complete = monomial_exponents(self.dimension, self.max_degree, True)
        self._complete_index = {tuple(r): i for i, r in enumerate(self._complete)}
        self._build_parent = np.full(len(self._complete), -1, dtype=int)
        self._build_var = np.full(len(self._complete), -1, dtype=int)
        for i, row in enumerate(self._complete[1:], start=1):
            k = int(np.argmax(row > 0))
            parent = row.copy()
            parent[k] -= 1
            self._build_parent[i] = self._complete_index[tuple(parent)]
            self._build_var[i] = k

        if exponents is None:
            exponents = self._complete if include_constant else self._complete[1:]
        exponents = np.asarray(exponents, dtype=int)
        if exponents.ndim != 2 or exponents.shape[1] != self.dimension:
            raise DataShapeError("exponent table must be (s, dimension)")
        if np.any(exponents < 0) or np.any(exponents.sum(axis=1) > self.max_degree):
            raise DataShapeError("exponent rows must be nonnegative with degree <= max_degree")
        seen = set()
        rows = []
        for row in exponents:
            key = tuple(int(e) for e in row)
            if key in seen:
                raise DataShapeError(f"duplicate exponent row {key}")
            seen.add(key)
            rows.append(self._complete_index[key])
        if (0 in {self._complete_index[k] for k in seen}) != self.include_constant:
            raise DataShapeError("constant row presence must match include_constant")
        self.exponents = exponents.copy()
        self._rows = np.array(rows, dtype=int)

    @property
    def size(self):
        return len(self._rows)

    def __eq__(self, other):
        return (
            isinstance(other, PolynomialDictionary)
            and self.dimension == other.dimension
            and self.max_degree == other.max_degree
            and self.include_constant == other.include_constant
            and np.array_equal(self.exponents, other.exponents)
        )

    def _columns(self, x, needed):
        """Complete-table columns for ``needed`` indices, built incrementally."""
        need = {int(i) for i in needed}
        stack = list(need)
        while stack:
            idx = stack.pop()
            parent = int(self._build_parent[idx]) if idx != 0 else 0
            if parent not in need:
                need.add(parent)
                stack.append(parent)
        need.add(0)
        # Parents precede children in graded order, so a sorted sweep suffices.
        cache = {}
        for idx in sorted(need):
            if idx == 0:
                cache[idx] = np.ones(x.shape[0])
            else:
                cache[idx] = cache[int(self._build_parent[idx])] * x[:, int(self._build_var[idx])]
        return cache

    def features(self, x):
        """Monomial feature vector(s); (d,) -> (s,) and (n, d) -> (n, s)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        if x2.shape[-1] != self.dimension:
            raise DataShapeError(f"state dimension {x2.shape[-1]} != {self.dimension}")
        cache = self._columns(x2, self._rows)
        out = np.stack([cache[i] for i in self._rows], axis=1)
        return out[0] if single else out

    def feature_jacobian(self, x):
        """Derivatives of every feature row; (n, d) -> (n, s, d)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None, :] if single else x
        needed = set()
        for row_idx in self._rows:
            row = self._complete[row_idx]
            for k in range(self.dimension):
                if row[k] > 0:
                    parent = row.copy()
                    parent[k] -= 1
                    needed.add(self._complete_index[tuple(parent)])
        cache = self._columns(x2, needed)
        jac = np.zeros((x2.shape[0], self.size, self.dimension))
        for r, row_idx in enumerate(self._rows):
            row = self._complete[row_idx]
            for k in range(self.dimension):
                if row[k] > 0:
                    parent = row.copy()
                    parent[k] -= 1
                    jac[:, r, k] = row[k] * cache[self._complete_index[tuple(parent)]]
        return jac[0] if single else jac

    def to_dict(self):
        return {
            "dimension": self.dimension,
            "max_degree": self.max_degree,
            "include_constant": self.include_constant,
            "exponents": self.exponents.tolist(),
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            payload["dimension"],
            payload["max_degree"],
            include_constant=payload["include_constant"],
            exponents=np.array(payload["exponents"], dtype=int),
        )


class SindyModel:
    """Vector field modeled as a linear combination of dictionary features."""

    kind = "sindy"

    def __init__(self, dictionary, theta):
        theta = np.array(theta, dtype=float)
        if theta.shape != (dictionary.size, dictionary.dimension):
            raise DataShapeError(
                f"theta shape {theta.shape} != ({dictionary.size}, {dictionary.dimension})"
            )
        if not np.all(np.isfinite(theta)):
            raise DataShapeError("theta contains nonfinite values")
        theta.setflags(write=False)  # models are values; the eval plan is cached
        self.dictionary = dictionary
        self.theta = theta
        self._plan = None

    @property
    def dim(self):
        return self.dictionary.dimension

    def copy(self):
        return SindyModel(self.dictionary, self.theta.copy())

    def param_arrays(self):
        return [self.theta]

    def with_params(self, arrays):
        (theta,) = arrays
        return SindyModel(self.dictionary, np.asarray(theta, dtype=float).copy())

    def _active(self):
        return np.flatnonzero(np.any(self.theta != 0.0, axis=1))

    def _linearize_plan(self):
        """Precomputed gather structure for fast evaluation on the active support."""
        if self._plan is not None:
            return self._plan
        dic = self.dictionary
        act = self._active()
        rows = dic._rows[act]
        # Complete columns needed: active rows, their derivative parents, and
        # the build ancestors of both.
        needed = set(int(r) for r in rows)
        deriv = []  # (position in act, var k, coefficient, parent complete index)
        for pos, row_idx in enumerate(rows):
            row = dic._complete[row_idx]
            for k in range(dic.dimension):
                if row[k] > 0:
                    parent = row.copy()
                    parent[k] -= 1
                    pidx = dic._complete_index[tuple(parent)]
                    deriv.append((pos, k, float(row[k]), pidx))
                    needed.add(pidx)
        closure = set(needed)
        stack = list(closure)
        while stack:
            idx = stack.pop()
            if idx == 0:
                continue
            parent = int(dic._build_parent[idx])
            if parent not in closure:
                closure.add(parent)
                stack.append(parent)
        closure.add(0)
        order = sorted(closure)
        pos_of = {idx: i for i, idx in enumerate(order)}
        build = np.array(
            [
                (-1, -1) if idx == 0 else (pos_of[int(dic._build_parent[idx])], int(dic._build_var[idx]))
                for idx in order
            ],
            dtype=int,
        )
        eval_cols = np.array([pos_of[int(r)] for r in rows], dtype=int)
        per_var = []
        for k in range(dic.dimension):
            entries = [(pos, coef, pos_of[pidx]) for pos, kk, coef, pidx in deriv if kk == k]
            per_var.append(
                (
                    np.array([e[0] for e in entries], dtype=int),
                    np.array([e[1] for e in entries], dtype=float),
                    np.array([e[2] for e in entries], dtype=int),
                )
            )
        self._plan = {
            "build": build,
            "eval_cols": eval_cols,
            "per_var": per_var,
            "theta_act": self.theta[act].copy(),
        }
        return self._plan

    def _packed_rows(self, x2, plan):
        """Monomial table laid out (columns, points) so each row is contiguous."""
        build = plan["build"]
        xt = np.ascontiguousarray(x2.T)
        table = np.empty((build.shape[0], x2.shape[0]))
        for pos, (parent, var) in enumerate(build):
            if parent < 0:
                table[pos] = 1.0
            else:
                np.multiply(table[parent], xt[var], out=table[pos])
        return table

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        plan = self._linearize_plan()
        if plan["eval_cols"].size == 0:
            out = np.zeros_like(x2)
        else:
            table = self._packed_rows(x2, plan)
            out = (plan["theta_act"].T @ table[plan["eval_cols"]]).T
        return out[0] if single else out

    __call__ = eval

    def linearize(self, x):
        """Field values at x plus a closure computing J(x)^T v row-wise."""
        x2 = np.asarray(x, dtype=float)
        plan = self._linearize_plan()
        if plan["eval_cols"].size == 0:
            zero = np.zeros_like(x2)
            return zero, lambda v: np.zeros_like(x2)
        table = self._packed_rows(x2, plan)
        value = (plan["theta_act"].T @ table[plan["eval_cols"]]).T
        theta_act = plan["theta_act"]
        per_var = plan["per_var"]

        def vjp(v):
            wt = theta_act @ np.ascontiguousarray(v.T)  # (n_active, n)
            out = np.zeros_like(x2)
            for k, (act_pos, coefs, parent_cols) in enumerate(per_var):
                if act_pos.size:
                    out[:, k] = np.einsum(
                        "mn,mn->n", table[parent_cols], wt[act_pos] * coefs[:, None]
                    )
            return out

        return value, vjp

    def make_evaluator(self, n_rows):
        """Reusable linearize for a fixed batch size with preallocated scratch.

        Solver inner loops evaluate the same-shaped batch thousands of times;
        reusing the monomial table and gather buffers avoids reallocating
        hundreds of megabytes per call. The returned arrays are views into
        scratch, valid until the next call.
        """
        plan = self._linearize_plan()
        dim = self.dim
        if plan["eval_cols"].size == 0:
            value = np.zeros((n_rows, dim))
            out = np.zeros((n_rows, dim))

            def vjp_empty(v, accumulate=None):
                return out if accumulate is None else accumulate

            def evaluate_empty(x2):
                return value, vjp_empty

            return evaluate_empty

        build = plan["build"]
        eval_cols = plan["eval_cols"]
        theta_act = plan["theta_act"]
        per_var = plan["per_var"]
        n_act = theta_act.shape[0]
        table = np.empty((build.shape[0], n_rows))
        xt = np.empty((dim, n_rows))
        eval_rows = np.empty((eval_cols.size, n_rows))
        value_t = np.empty((dim, n_rows))
        value = np.empty((n_rows, dim))
        vt = np.empty((dim, n_rows))
        wt = np.empty((n_act, n_rows))
        out = np.empty((n_rows, dim))
        col = np.empty(n_rows)
        gat = [np.empty((pv[0].size, n_rows)) for pv in per_var]
        wsel = [np.empty((pv[0].size, n_rows)) for pv in per_var]

        def evaluate(x2):
            np.copyto(xt, x2.T)
            for pos, (parent, var) in enumerate(build):
                if parent < 0:
                    table[pos] = 1.0
                else:
                    np.multiply(table[parent], xt[var], out=table[pos])
            np.take(table, eval_cols, axis=0, out=eval_rows)
            np.matmul(theta_act.T, eval_rows, out=value_t)
            np.copyto(value, value_t.T)

            def vjp(v, accumulate=None):
                np.copyto(vt, v.T)
                np.matmul(theta_act, vt, out=wt)
                target = out if accumulate is None else accumulate
                for k, (act_pos, coefs, parent_cols) in enumerate(per_var):
                    if act_pos.size:
                        np.take(table, parent_cols, axis=0, out=gat[k])
                        np.take(wt, act_pos, axis=0, out=wsel[k])
                        wsel[k] *= coefs[:, None]
                        wsel[k] *= gat[k]
                        np.sum(wsel[k], axis=0, out=col)
                        if accumulate is None:
                            target[:, k] = col
                        else:
                            target[:, k] += col
                    elif accumulate is None:
                        target[:, k] = 0.0
                return target

            return value, vjp

        return evaluate

    def param_grad(self, x, cotangent):
        """Gradient of sum_i cotangent_i . f(x_i) with respect to theta."""
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        cot = np.atleast_2d(np.asarray(cotangent, dtype=float))
        feats = self.dictionary.features(x2)
        return [feats.T @ cot]

    def jac_T_vp(self, x, v):
        _, vjp = self.linearize(np.atleast_2d(np.asarray(x, dtype=float)))
        return vjp(np.atleast_2d(np.asarray(v, dtype=float)))

    def input_jacobian(self, x):
        """d f / d x; (d,) -> (d, d) and (n, d) -> (n, d, d)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        fj = self.dictionary.feature_jacobian(x2)  # (n, s, d_in)
        jac = np.einsum("nsk,se->nek", fj, self.theta)
        return jac[0] if single else jac


def stlsq(features, targets, threshold, max_iter=10):
    """Sequentially thresholded least squares, solved per output dimension.

    Starts from the full least-squares fit, repeatedly zeroes coefficients
    smaller than ``threshold`` in magnitude and refits on the survivors until
    the support stops changing (or ``max_iter`` passes). Rank-deficient
    designs fall back to the minimum-norm solution and emit
    :class:`RankDeficientDesignWarning`.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim != 2 or targets.ndim != 2 or features.shape[0] != targets.shape[0]:
        raise DataShapeError("features (n, s) and targets (n, d) must share n")
    if threshold < 0:
        raise DataShapeError("threshold must be nonnegative")
    n, s = features.shape
    d = targets.shape[1]
    # Normal-equation form: cheap to re-solve on shrinking supports, and the
    # minimum-norm solution of the Gram system matches the pseudo-inverse fit.
    gram = features.T @ features
    cross = features.T @ targets
    theta = np.zeros((s, d))
    for j in range(d):
        support = np.ones(s, dtype=bool)
        coef = np.zeros(s)
        for _ in range(max(1, int(max_iter))):
            if not support.any():
                coef[:] = 0.0
                break
            idx = np.flatnonzero(support)
            sol, _, rank, _ = np.linalg.lstsq(gram[np.ix_(idx, idx)], cross[idx, j], rcond=None)
            if rank < idx.size:
                warnings.warn(
                    "rank-deficient design; using minimum-norm least squares",
                    RankDeficientDesignWarning,
                    stacklevel=2,
                )
            coef[:] = 0.0
            coef[idx] = sol
            new_support = np.abs(coef) >= threshold
            if np.array_equal(new_support, support):
                break
            support = new_support
        theta[:, j] = coef
    return theta
