import numpy as np
import pytest

from vfield import (
    DataShapeError,
    DenseNetModel,
    Mlp,
    MultiIndexSet,
    NeuralShapeModel,
    ShapeNetwork,
)


def flat(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def fd_param_grad(model, x, cot, eps=1e-6):
    """Central finite differences of sum(cot * f(x)) through every parameter."""
    grads = []
    params = model.param_arrays()
    for idx in range(len(params)):
        g = np.zeros_like(params[idx])
        it = np.nditer(g, flags=["multi_index"])
        while not it.finished:
            bumped = [p.copy() for p in params]
            bumped[idx][it.multi_index] += eps
            up = float(np.sum(cot * model.with_params(bumped).eval(x)))
            bumped[idx][it.multi_index] -= 2 * eps
            dn = float(np.sum(cot * model.with_params(bumped).eval(x)))
            g[it.multi_index] = (up - dn) / (2 * eps)
            it.iternext()
        grads.append(g)
    return grads


class TestMlp:
    def test_forward_shapes(self):
        net = Mlp.init_glorot([3, 8, 2], seed=0)
        out = net.forward(np.random.default_rng(0).normal(size=(5, 3)))
        assert out.shape == (5, 2)

    def test_param_vjp_matches_fd(self):
        rng = np.random.default_rng(1)
        net = Mlp.init_glorot([2, 6, 6, 2], seed=1)
        x = rng.normal(size=(4, 2))
        cot = rng.normal(size=(4, 2))
        grads, _ = net.vjp(x, cot)
        params = net.param_arrays()
        eps = 1e-6
        for idx, g in enumerate(grads):
            probe = np.unravel_index(rng.integers(g.size), g.shape)
            bumped = [p.copy() for p in params]
            bumped[idx][probe] += eps
            up = float(np.sum(cot * net.with_params(bumped).forward(x)))
            bumped[idx][probe] -= 2 * eps
            dn = float(np.sum(cot * net.with_params(bumped).forward(x)))
            assert g[probe] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-9)

    def test_input_vjp_matches_fd(self):
        rng = np.random.default_rng(2)
        net = Mlp.init_glorot([3, 5, 3], seed=2)
        x = rng.normal(size=(4, 3))
        cot = rng.normal(size=(4, 3))
        _, input_grad = net.vjp(x, cot)
        eps = 1e-6
        for (i, k) in [(0, 0), (1, 2), (3, 1)]:
            bump = np.zeros_like(x)
            bump[i, k] = eps
            up = float(np.sum(cot * net.forward(x + bump)))
            dn = float(np.sum(cot * net.forward(x - bump)))
            assert input_grad[i, k] == pytest.approx((up - dn) / (2 * eps), rel=1e-5, abs=1e-9)

    def test_input_tangent_matches_vjp(self):
        rng = np.random.default_rng(3)
        net = Mlp.init_glorot([1, 7, 4], seed=3)
        x = rng.normal(size=(6, 1))
        out, tang = net.input_tangent(x, np.ones_like(x))
        assert np.allclose(out, net.forward(x))
        # For scalar input, the tangent with seed 1 is the full Jacobian column.
        eps = 1e-6
        fd = (net.forward(x + eps) - net.forward(x - eps)) / (2 * eps)
        assert np.allclose(tang, fd, rtol=1e-5, atol=1e-8)

    def test_round_trip_params(self):
        net = Mlp.init_glorot([2, 4, 2], seed=4)
        clone = net.with_params(net.param_arrays())
        x = np.random.default_rng(4).normal(size=(3, 2))
        assert np.array_equal(net.forward(x), clone.forward(x))


class TestShapeNetwork:
    def test_constant_component_is_one(self):
        net = ShapeNetwork(num_shapes=4, depth=2, units=8, seed=0)
        vals = net.shape_functions(np.array([0.3, -1.2, 4.0]))
        assert vals.shape == (3, 5)
        assert np.all(vals[:, 0] == 1.0)

    def test_zero_final_layer_gives_zero_shapes(self):
        net = ShapeNetwork(num_shapes=3, depth=2, units=8, seed=1)
        net.mlp.weights[-1][:] = 0.0
        net.mlp.biases[-1][:] = 0.0
        vals = net.shape_functions(np.linspace(-2, 2, 7))
        assert np.allclose(vals[:, 1:], 0.0)
        assert np.all(vals[:, 0] == 1.0)

    def test_published_configuration_builds(self):
        net = ShapeNetwork(num_shapes=3, depth=2, units=16, seed=0)
        assert net.mlp.widths == [1, 16, 3]

    def test_scalar_input(self):
        net = ShapeNetwork(num_shapes=2, depth=2, units=4, seed=2)
        vals = net.shape_functions(0.5)
        assert vals.shape == (3,)
        assert vals[0] == 1.0


class TestMultiIndexSet:
    def test_pairwise_counts(self):
        s = MultiIndexSet.pairwise(6, 3)
        # 1 zero row + 6*3 singles + C(6,2)*9 pairs
        assert len(s) == 1 + 18 + 135
        assert s.dim == 6

    def test_full_counts(self):
        s = MultiIndexSet.full(2, 6)
        assert len(s) == 49

    def test_cardinality_bound(self):
        s = MultiIndexSet.pairwise(3, 2)
        assert len(s) <= 3**3

    def test_unique_rows_enforced(self):
        with pytest.raises(DataShapeError):
            MultiIndexSet(np.array([[0, 1], [0, 1]]))


class TestNeuralShapeModel:
    def _model(self, dim=2, num_shapes=3, seed=0, full=False):
        indices = (
            MultiIndexSet.full(dim, num_shapes)
            if full
            else MultiIndexSet.pairwise(dim, num_shapes)
        )
        return NeuralShapeModel.build(dim, num_shapes, depth=2, units=6, indices=indices, seed=seed)

    def test_zero_multi_index_feature_is_one(self):
        model = self._model()
        feats = model.tensor_features(np.array([[0.4, -1.1], [2.0, 0.0]]))
        zero_row = next(
            a for a, row in enumerate(model.indices.indices) if np.all(row == 0)
        )
        assert np.allclose(feats[:, zero_row], 1.0)

    def test_feature_length_and_bound(self):
        model = self._model()
        feats = model.tensor_features(np.array([0.2, 0.7]))
        assert feats.shape == (len(model.indices),)
        assert len(model.indices) <= (model.shapes.num_shapes + 1) ** model.dim

    def test_tensor_product_structure(self):
        model = self._model()
        x = np.array([0.6, -0.9])
        hv = model.shapes.shape_functions(x)  # (2, B+1)
        feats = model.tensor_features(x)
        for a, row in enumerate(model.indices.indices):
            expected = hv[0, row[0]] * hv[1, row[1]]
            assert feats[a] == pytest.approx(expected, rel=1e-12)

    def test_eval_is_readout_combination(self):
        model = self._model()
        pts = np.random.default_rng(5).normal(size=(4, 2))
        assert np.allclose(model.eval(pts), model.tensor_features(pts) @ model.readout)

    @pytest.mark.parametrize("full", [False, True])
    def test_param_grad_matches_fd(self, full):
        rng = np.random.default_rng(6)
        model = self._model(dim=2, num_shapes=2, seed=6, full=full)
        x = rng.normal(size=(3, 2))
        cot = rng.normal(size=(3, 2))
        grads = model.param_grad(x, cot)
        fd = fd_param_grad(model, x, cot)
        for g, f in zip(grads, fd):
            assert np.allclose(g, f, rtol=1e-4, atol=1e-7)

    def test_input_jacobian_matches_fd(self):
        rng = np.random.default_rng(7)
        model = self._model(dim=3, num_shapes=2, seed=7)
        x = rng.normal(size=(2, 3))
        jac = model.input_jacobian(x)
        eps = 1e-6
        for k in range(3):
            bump = np.zeros_like(x)
            bump[:, k] = eps
            fd = (model.eval(x + bump) - model.eval(x - bump)) / (2 * eps)
            assert np.allclose(jac[:, :, k], fd, rtol=1e-5, atol=1e-8)

    def test_pairwise_fast_path_matches_generic(self):
        # Force the generic path by tripling one row's nonzeros
        model = self._model(dim=3, num_shapes=2, seed=8)
        idx = model.indices.indices.copy()
        idx[-1] = [1, 2, 1]
        generic = NeuralShapeModel(model.shapes, MultiIndexSet(idx), model.readout)
        assert generic.indices._pairs is None
        pts = np.random.default_rng(8).normal(size=(5, 3))
        hv = model._shape_values(pts)
        fast = model._features_from_values(hv)
        slow = generic._features_from_values(hv)
        assert np.allclose(fast[:, :-1], slow[:, :-1])

    def test_zero_cotangent_zero_grads(self):
        model = self._model()
        grads = model.param_grad(np.ones((2, 2)), np.zeros((2, 2)))
        assert all(np.allclose(g, 0.0) for g in grads)


class TestDenseNetModel:
    def test_shapes_and_widths(self):
        model = DenseNetModel.build(3, hidden=(8, 8), seed=0)
        assert model.dim == 3
        out = model.eval(np.zeros((4, 3)))
        assert out.shape == (4, 3)

    def test_param_grad_matches_fd(self):
        rng = np.random.default_rng(9)
        model = DenseNetModel.build(2, hidden=(5,), seed=9)
        x = rng.normal(size=(4, 2))
        cot = rng.normal(size=(4, 2))
        grads = model.param_grad(x, cot)
        fd = fd_param_grad(model, x, cot)
        for g, f in zip(grads, fd):
            assert np.allclose(g, f, rtol=1e-4, atol=1e-7)

    def test_input_jacobian_matches_fd(self):
        rng = np.random.default_rng(10)
        model = DenseNetModel.build(2, hidden=(6,), seed=10)
        x = rng.normal(size=(3, 2))
        jac = model.input_jacobian(x)
        eps = 1e-6
        for k in range(2):
            bump = np.zeros_like(x)
            bump[:, k] = eps
            fd = (model.eval(x + bump) - model.eval(x - bump)) / (2 * eps)
            assert np.allclose(jac[:, :, k], fd, rtol=1e-5, atol=1e-8)

    def test_rejects_mismatched_widths(self):
        with pytest.raises(DataShapeError):
            DenseNetModel(Mlp.init_glorot([2, 4, 3], seed=0))
