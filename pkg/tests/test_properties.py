"""Invariant checks driven by randomized inputs."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfield import (
    NoiseSpec,
    PolynomialDictionary,
    SindyModel,
    TimeGrid,
    TrajectorySet,
    add_noise,
    integrate,
    mass_spring_rhs,
    recombine_states,
    reshape_trajectory,
    residual_objective,
    split_states,
    stlsq,
)
from vfield.networks import MultiIndexSet, NeuralShapeModel


def double_well(u):
    return 16.0 * u - u**3


@st.composite
def trajectory_sets(draw, max_n=4, max_t=12, max_d=3):
    n = draw(st.integers(1, max_n))
    t = draw(st.integers(2, max_t))
    d = draw(st.integers(1, max_d))
    seed = draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    grid = TimeGrid(np.cumsum(rng.uniform(0.05, 0.4, size=t)))
    return TrajectorySet(rng.normal(scale=1.5, size=(n, t, d)), grid)


class TestReshapeRoundTrip:
    @given(
        segments=st.integers(2, 12),
        seg_len=st.integers(2, 10),
        d=st.integers(1, 4),
        seed=st.integers(0, 2**16),
    )
    @settings(max_examples=30, deadline=None)
    def test_concat_restores_series(self, segments, seg_len, d, seed):
        t = segments * seg_len
        rng = np.random.default_rng(seed)
        traj = TrajectorySet(
            rng.normal(size=(1, t, d)), TimeGrid.uniform(0.0, 1.0 * (t - 1), t)
        )
        out = reshape_trajectory(traj, seg_len)
        assert out.num_trajectories == segments
        assert np.array_equal(out.data.reshape(1, t, d), traj.data)


class TestNoiseDeterminism:
    @given(traj=trajectory_sets(), percent=st.floats(0, 50), seed=st.integers(0, 2**16))
    @settings(max_examples=30, deadline=None)
    def test_pure_function_of_inputs(self, traj, percent, seed):
        a = add_noise(traj, NoiseSpec(percent=percent, seed=seed))
        b = add_noise(traj, NoiseSpec(percent=percent, seed=seed))
        assert np.array_equal(a.data, b.data)


class TestMomentumConservation:
    @given(m=st.integers(2, 6), seed=st.integers(0, 2**16))
    @settings(max_examples=40, deadline=None)
    def test_ring_accelerations_sum_to_zero(self, m, seed):
        rng = np.random.default_rng(seed)
        state = rng.normal(scale=2.0, size=2 * m)
        accel = mass_spring_rhs(state, double_well)[m:]
        assert abs(float(accel.sum())) <= 1e-9 * (1.0 + float(np.abs(accel).sum()))


class TestDictionaryDeterminism:
    @given(d=st.integers(1, 4), p=st.integers(1, 4), const=st.booleans())
    @settings(max_examples=20, deadline=None)
    def test_identical_construction(self, d, p, const):
        a = PolynomialDictionary(d, p, include_constant=const)
        b = PolynomialDictionary(d, p, include_constant=const)
        assert a == b
        x = np.linspace(-1, 1, d)
        assert np.array_equal(a.features(x), b.features(x))


class TestStlsqZeroThreshold:
    @given(seed=st.integers(0, 2**16), n=st.integers(8, 40))
    @settings(max_examples=25, deadline=None)
    def test_matches_plain_least_squares(self, seed, n):
        rng = np.random.default_rng(seed)
        feats = rng.normal(size=(n, 5))
        targets = rng.normal(size=(n, 2))
        theta = stlsq(feats, targets, threshold=0.0)
        expected, *_ = np.linalg.lstsq(feats, targets, rcond=None)
        assert np.allclose(theta, expected, atol=1e-8)


class TestSplitRecombine:
    @given(traj=trajectory_sets(max_t=16))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip(self, traj):
        first, second = split_states(traj)
        assert first.data.shape[1] == traj.num_steps // 2
        back = recombine_states(first, second)
        assert np.array_equal(back.data, traj.data)
        assert np.array_equal(back.grid.times, traj.grid.times)


class TestEulerConsistency:
    @given(seed=st.integers(0, 2**16), t=st.integers(3, 20))
    @settings(max_examples=25, deadline=None)
    def test_objective_vanishes_on_euler_orbits(self, seed, t):
        rng = np.random.default_rng(seed)
        dic = PolynomialDictionary(2, 2, include_constant=True)
        model = SindyModel(dic, 0.3 * rng.normal(size=(dic.size, 2)))
        grid = TimeGrid.uniform(0.0, 0.02 * (t - 1), t)
        try:
            traj = integrate(model.eval, rng.normal(size=2), grid, scheme="euler")
        except Exception:
            return  # diverging draws prove nothing about the identity
        value = residual_objective(traj, model)
        scale = float(np.max(np.abs(traj.data))) + 1.0
        assert value <= 1e-18 * scale**2 * traj.num_steps


class TestTensorFeatureIdentity:
    @given(d=st.integers(1, 4), b=st.integers(1, 4), seed=st.integers(0, 2**16))
    @settings(max_examples=20, deadline=None)
    def test_zero_index_row_is_one(self, d, b, seed):
        model = NeuralShapeModel.build(d, b, depth=2, units=4, seed=seed)
        rng = np.random.default_rng(seed)
        feats = model.tensor_features(rng.normal(size=(3, d)))
        zero_row = next(
            a for a, row in enumerate(model.indices.indices) if np.all(row == 0)
        )
        assert np.allclose(feats[:, zero_row], 1.0)

    @given(d=st.integers(2, 3), b=st.integers(1, 3), seed=st.integers(0, 2**16))
    @settings(max_examples=15, deadline=None)
    def test_cardinality_bound(self, d, b, seed):
        indices = MultiIndexSet.pairwise(d, b)
        assert len(indices) <= (b + 1) ** d
