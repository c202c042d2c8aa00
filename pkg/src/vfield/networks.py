"""Dense networks, neural shape functions, and their reverse-mode gradients.

Everything here is plain numpy: forward passes, vector-Jacobian products for
both parameters and inputs, and a forward-mode tangent pass used for the
one-dimensional shape-function derivatives.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import DataShapeError

_ACTIVATIONS = {
    # name -> (activation, derivative expressed via the activation output)
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
}


def glorot_uniform(fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _seed_list(seed, extra):
    """Flatten an int-or-sequence seed and append a substream tag."""
    if isinstance(seed, (list, tuple, np.ndarray)):
        base = [int(s) for s in seed]
    else:
        base = [int(seed)]
    return base + [int(extra)]


class Mlp:
    """Fully connected network with nonlinear hidden layers and a linear head."""

    def __init__(self, weights, biases, activation="tanh"):
        if activation not in _ACTIVATIONS:
            raise DataShapeError(f"unknown activation {activation!r}")
        if len(weights) != len(biases) or not weights:
            raise DataShapeError("need matching, nonempty weight/bias lists")
        for idx, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DataShapeError(f"layer {idx} has inconsistent shapes")
            if idx > 0 and w.shape[0] != weights[idx - 1].shape[1]:
                raise DataShapeError(f"layer {idx} width mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataShapeError(f"layer {idx} has nonfinite parameters")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activation = activation

    @classmethod
    def init_glorot(cls, widths, activation="tanh", seed=0):
        rng = np.random.default_rng(seed)
        weights = [glorot_uniform(nin, nout, rng) for nin, nout in zip(widths[:-1], widths[1:])]
        biases = [np.zeros(nout) for nout in widths[1:]]
        return cls(weights, biases, activation=activation)

    @property
    def widths(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_layers(self):
        return len(self.weights)

    def copy(self):
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def param_arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def with_params(self, arrays):
        if len(arrays) != 2 * self.num_layers:
            raise DataShapeError("wrong number of parameter arrays")
        weights = [np.asarray(arrays[2 * i], dtype=float).copy() for i in range(self.num_layers)]
        biases = [np.asarray(arrays[2 * i + 1], dtype=float).copy() for i in range(self.num_layers)]
        return Mlp(weights, biases, self.activation)

    def forward(self, x):
        act, _ = _ACTIVATIONS[self.activation]
        a = np.asarray(x, dtype=float)
        last = self.num_layers - 1
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            a = z if idx == last else act(z)
        return a

    def linearize(self, x):
        """Forward pass plus a VJP closure returning (param_grads, input_grad)."""
        act, deriv = _ACTIVATIONS[self.activation]
        a = np.asarray(x, dtype=float)
        acts = [a]
        last = self.num_layers - 1
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(z if idx == last else act(z))
        out = acts[-1]

        def vjp(cotangent):
            delta = np.asarray(cotangent, dtype=float)
            grads = [None] * (2 * self.num_layers)
            for idx in range(last, -1, -1):
                grads[2 * idx] = acts[idx].T @ delta
                grads[2 * idx + 1] = delta.sum(axis=0)
                delta = delta @ self.weights[idx].T
                if idx > 0:
                    delta = delta * deriv(acts[idx])
            return grads, delta

        return out, vjp

    def vjp(self, x, cotangent):
        _, fn = self.linearize(x)
        return fn(cotangent)

    def input_tangent(self, x, tangent):
        """Forward-mode pass: returns (output, J(x) @ tangent) row-wise."""
        act, deriv = _ACTIVATIONS[self.activation]
        a = np.asarray(x, dtype=float)
        t = np.asarray(tangent, dtype=float)
        last = self.num_layers - 1
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            t = t @ w
            if idx != last:
                a = act(z)
                t = t * deriv(a)
            else:
                a = z
        return a, t


class ShapeNetwork:
    """One-dimensional shape functions h_1..h_B produced by a shared network.

    ``depth`` counts weight layers, so depth D means D-1 hidden layers of
    ``units`` each feeding a linear layer with ``num_shapes`` outputs.
    """

    def __init__(self, num_shapes, depth=2, units=16, activation="tanh", seed=0, mlp=None):
        if num_shapes < 1 or depth < 1 or units < 1:
            raise DataShapeError("num_shapes, depth, and units must be positive")
        self.num_shapes = int(num_shapes)
        self.depth = int(depth)
        self.units = int(units)
        if mlp is None:
            widths = [1] + [self.units] * (self.depth - 1) + [self.num_shapes]
            mlp = Mlp.init_glorot(widths, activation=activation, seed=seed)
        if mlp.widths[0] != 1 or mlp.widths[-1] != self.num_shapes:
            raise DataShapeError("shape network must map 1 input to num_shapes outputs")
        self.mlp = mlp

    def copy(self):
        return ShapeNetwork(self.num_shapes, self.depth, self.units, self.mlp.activation, mlp=self.mlp.copy())

    def forward(self, x):
        """Raw network outputs h_1..h_B; scalars and 1-D arrays are batched."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 1)
        out = self.mlp.forward(flat)
        return out.reshape(x.shape + (self.num_shapes,))

    def shape_functions(self, x):
        """Shape values with the constant function prepended: (1, h_1 .. h_B)."""
        x = np.asarray(x, dtype=float)
        vals = self.forward(x)
        ones = np.ones(x.shape + (1,))
        return np.concatenate([ones, vals], axis=-1)


class MultiIndexSet:
    """Which tensor products of shape functions enter the model.

    Each row alpha selects shape h_{alpha_k} for coordinate k, index 0 being
    the constant function.
    """

    def __init__(self, indices):
        indices = np.asarray(indices, dtype=int)
        if indices.ndim != 2 or indices.shape[0] < 1:
            raise DataShapeError("multi-index set must be a nonempty (m, d) array")
        if np.any(indices < 0):
            raise DataShapeError("multi-indices must be nonnegative")
        if len({tuple(r) for r in indices}) != indices.shape[0]:
            raise DataShapeError("multi-index rows must be unique")
        self.indices = indices.copy()
        # Nonzero positions per row, precomputed for feature products.
        self._nonzeros = [
            [(int(k), int(b)) for k, b in enumerate(row) if b > 0] for row in indices
        ]
        # When no row has more than two nonzero entries, the products reduce to
        # two gathered factors; (0, 0) is a sentinel hitting the constant shape,
        # whose value is one and whose derivative is zero.
        if all(len(nz) <= 2 for nz in self._nonzeros):
            m = len(self._nonzeros)
            self._pairs = np.zeros((m, 4), dtype=int)  # k1, b1, k2, b2
            for a, nz in enumerate(self._nonzeros):
                if len(nz) >= 1:
                    self._pairs[a, 0], self._pairs[a, 1] = nz[0]
                if len(nz) == 2:
                    self._pairs[a, 2], self._pairs[a, 3] = nz[1]
        else:
            self._pairs = None

    @property
    def dim(self):
        return self.indices.shape[1]

    def __len__(self):
        return self.indices.shape[0]

    @classmethod
    def pairwise(cls, dim, num_shapes):
        """Default set: every alpha with at most two nonzero entries."""
        rows = [tuple([0] * dim)]
        for k in range(dim):
            for b in range(1, num_shapes + 1):
                row = [0] * dim
                row[k] = b
                rows.append(tuple(row))
        for k1 in range(dim):
            for k2 in range(k1 + 1, dim):
                for b1 in range(1, num_shapes + 1):
                    for b2 in range(1, num_shapes + 1):
                        row = [0] * dim
                        row[k1] = b1
                        row[k2] = b2
                        rows.append(tuple(row))
        return cls(np.array(rows, dtype=int))

    @classmethod
    def full(cls, dim, num_shapes):
        """Every multi-index in {0..num_shapes}^dim; grows as (B+1)^d."""
        rows = list(itertools.product(range(num_shapes + 1), repeat=dim))
        return cls(np.array(rows, dtype=int))


class NeuralShapeModel:
    """Vector field built from tensor products of learned 1-D shape functions."""

    kind = "neural_shape"

    def __init__(self, shapes, indices, readout):
        readout = np.asarray(readout, dtype=float)
        if readout.shape != (len(indices), indices.dim):
            raise DataShapeError(
                f"readout shape {readout.shape} != ({len(indices)}, {indices.dim})"
            )
        if not np.all(np.isfinite(readout)):
            raise DataShapeError("readout contains nonfinite values")
        if int(indices.indices.max()) > shapes.num_shapes:
            raise DataShapeError("multi-index exceeds the number of shape functions")
        self.shapes = shapes
        self.indices = indices
        self.readout = readout

    @classmethod
    def build(cls, dim, num_shapes, depth=2, units=16, indices=None, seed=0):
        shapes = ShapeNetwork(num_shapes, depth=depth, units=units, seed=_seed_list(seed, 0))
        if indices is None:
            indices = MultiIndexSet.pairwise(dim, num_shapes)
        rng = np.random.default_rng(_seed_list(seed, 1))
        readout = rng.uniform(-1.0, 1.0, size=(len(indices), dim)) / np.sqrt(len(indices))
        return cls(shapes, indices, readout)

    @property
    def dim(self):
        return self.indices.dim

    def copy(self):
        return NeuralShapeModel(self.shapes.copy(), self.indices, self.readout.copy())

    def param_arrays(self):
        return self.shapes.mlp.param_arrays() + [self.readout]

    def with_params(self, arrays):
        mlp = self.shapes.mlp.with_params(arrays[:-1])
        shapes = ShapeNetwork(
            self.shapes.num_shapes, self.shapes.depth, self.shapes.units,
            self.shapes.mlp.activation, mlp=mlp,
        )
        return NeuralShapeModel(shapes, self.indices, np.asarray(arrays[-1], dtype=float).copy())

    def _shape_values(self, x2):
        """(n, d) states -> (n, d, B+1) shape values including the constant."""
        n, d = x2.shape
        vals = self.shapes.mlp.forward(x2.reshape(-1, 1)).reshape(n, d, self.shapes.num_shapes)
        return np.concatenate([np.ones((n, d, 1)), vals], axis=2)

    def _features_from_values(self, hv):
        pairs = self.indices._pairs
        if pairs is not None:
            return hv[:, pairs[:, 0], pairs[:, 1]] * hv[:, pairs[:, 2], pairs[:, 3]]
        n = hv.shape[0]
        feats = np.empty((n, len(self.indices)))
        for a, nz in enumerate(self.indices._nonzeros):
            col = np.ones(n)
            for k, b in nz:
                col = col * hv[:, k, b]
            feats[:, a] = col
        return feats

    def tensor_features(self, x):
        """Tensor-product features H_alpha(x); (d,) -> (|A|,) and (n, d) -> (n, |A|)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        feats = self._features_from_values(self._shape_values(x2))
        return feats[0] if single else feats

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        out = self.tensor_features(x2) @ self.readout
        return out[0] if single else out

    __call__ = eval

    def _leave_one_out(self, hv, nz, skip_pos):
        n = hv.shape[0]
        out = np.ones(n)
        for pos, (k, b) in enumerate(nz):
            if pos != skip_pos:
                out = out * hv[:, k, b]
        return out

    def linearize(self, x):
        x2 = np.asarray(x, dtype=float)
        n, d = x2.shape
        hv = self._shape_values(x2)
        feats = self._features_from_values(hv)
        value = feats @ self.readout
        # h_j'(x_k) for the input-gradient path; the constant contributes zero.
        flat = x2.reshape(-1, 1)
        _, tang = self.shapes.mlp.input_tangent(flat, np.ones_like(flat))
        hvp = np.concatenate(
            [np.zeros((n, d, 1)), tang.reshape(n, d, self.shapes.num_shapes)], axis=2
        )

        pairs = self.indices._pairs

        def vjp(v):
            g = v @ self.readout.T  # (n, |A|)
            out = np.zeros_like(x2)
            if pairs is not None:
                k1, b1, k2, b2 = pairs.T
                contrib1 = g * hv[:, k2, b2] * hvp[:, k1, b1]
                contrib2 = g * hv[:, k1, b1] * hvp[:, k2, b2]
                for k in range(d):
                    m1 = k1 == k
                    m2 = k2 == k
                    if m1.any():
                        out[:, k] += contrib1[:, m1].sum(axis=1)
                    if m2.any():
                        out[:, k] += contrib2[:, m2].sum(axis=1)
                return out
            for a, nz in enumerate(self.indices._nonzeros):
                for pos, (k, b) in enumerate(nz):
                    loo = self._leave_one_out(hv, nz, pos)
                    out[:, k] += g[:, a] * loo * hvp[:, k, b]
            return out

        return value, vjp

    def jac_T_vp(self, x, v):
        _, vjp = self.linearize(np.atleast_2d(np.asarray(x, dtype=float)))
        return vjp(np.atleast_2d(np.asarray(v, dtype=float)))

    def param_grad(self, x, cotangent):
        """Gradients of sum_i cotangent_i . f(x_i) for all network params + readout."""
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        cot = np.atleast_2d(np.asarray(cotangent, dtype=float))
        n, d = x2.shape
        hv = self._shape_values(x2)
        feats = self._features_from_values(hv)
        readout_grad = feats.T @ cot
        g = cot @ self.readout.T  # (n, |A|)
        pairs = self.indices._pairs
        if pairs is not None:
            k1, b1, k2, b2 = pairs.T
            contrib1 = g * hv[:, k2, b2]
            contrib2 = g * hv[:, k1, b1]
            # Accumulate into (n, d, B+1); the sentinel column b=0 is dropped.
            dfull = np.zeros((n, d, self.shapes.num_shapes + 1))
            for k in range(d):
                for b in range(self.shapes.num_shapes + 1):
                    m1 = (k1 == k) & (b1 == b)
                    m2 = (k2 == k) & (b2 == b)
                    if m1.any():
                        dfull[:, k, b] += contrib1[:, m1].sum(axis=1)
                    if m2.any():
                        dfull[:, k, b] += contrib2[:, m2].sum(axis=1)
            dshape = dfull[:, :, 1:]
        else:
            dshape = np.zeros((n, d, self.shapes.num_shapes))
            for a, nz in enumerate(self.indices._nonzeros):
                for pos, (k, b) in enumerate(nz):
                    loo = self._leave_one_out(hv, nz, pos)
                    dshape[:, k, b - 1] += g[:, a] * loo
        mlp_grads, _ = self.shapes.mlp.vjp(
            x2.reshape(-1, 1), dshape.reshape(n * d, self.shapes.num_shapes)
        )
        return mlp_grads + [readout_grad]

    def input_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        _, vjp = self.linearize(x2)
        rows = []
        for e in range(self.dim):
            cot = np.zeros_like(x2)
            cot[:, e] = 1.0
            rows.append(vjp(cot))
        jac = np.stack(rows, axis=1)  # (n, d_out, d_in)
        return jac[0] if single else jac


class DenseNetModel:
    """Plain feedforward vector-field model with d inputs and d outputs."""

    kind = "dense_net"

    def __init__(self, mlp):
        if mlp.widths[0] != mlp.widths[-1]:
            raise DataShapeError("dense model needs equal input and output widths")
        self.mlp = mlp

    @classmethod
    def build(cls, dim, hidden=(32, 32), activation="tanh", seed=0):
        widths = [int(dim)] + [int(h) for h in hidden] + [int(dim)]
        return cls(Mlp.init_glorot(widths, activation=activation, seed=seed))

    @property
    def dim(self):
        return self.mlp.widths[0]

    def copy(self):
        return DenseNetModel(self.mlp.copy())

    def param_arrays(self):
        return self.mlp.param_arrays()

    def with_params(self, arrays):
        return DenseNetModel(self.mlp.with_params(arrays))

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        out = self.mlp.forward(np.atleast_2d(x))
        return out[0] if single else out

    __call__ = eval

    def linearize(self, x):
        x2 = np.asarray(x, dtype=float)
        value, vjp_full = self.mlp.linearize(x2)

        def vjp(v):
            _, input_grad = vjp_full(v)
            return input_grad

        return value, vjp

    def jac_T_vp(self, x, v):
        _, vjp = self.linearize(np.atleast_2d(np.asarray(x, dtype=float)))
        return vjp(np.atleast_2d(np.asarray(v, dtype=float)))

    def param_grad(self, x, cotangent):
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        cot = np.atleast_2d(np.asarray(cotangent, dtype=float))
        grads, _ = self.mlp.vjp(x2, cot)
        return grads

    def input_jacobian(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        _, vjp_full = self.mlp.linearize(x2)
        rows = []
        for e in range(self.dim):
            cot = np.zeros((x2.shape[0], self.dim))
            cot[:, e] = 1.0
            _, input_grad = vjp_full(cot)
            rows.append(input_grad)
        jac = np.stack(rows, axis=1)
        return jac[0] if single else jac
