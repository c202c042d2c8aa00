import numpy as np
import pytest

from vfield import (
    DataShapeError,
    DivergenceError,
    FitzHughNagumo,
    InvalidStateError,
    MassSpringRing,
    NoiseSpec,
    NonUniformGridError,
    TimeGrid,
    TrajectorySet,
    add_noise,
    fhn_rhs,
    generate_dataset,
    grid_initial_conditions,
    integrate,
    integrate_batch,
    mass_spring_rhs,
    reshape_trajectory,
    uniform_initial_conditions,
)


def double_well(u):
    return 16.0 * u - u**3


class TestTimeGrid:
    def test_uniform_construction(self):
        grid = TimeGrid.uniform(0.0, 20.0, 401)
        assert len(grid) == 401
        assert grid.is_uniform
        assert np.allclose(grid.deltas, 0.05)

    def test_rejects_decreasing_times(self):
        with pytest.raises(DataShapeError):
            TimeGrid(np.array([0.0, 1.0, 0.5]))

    def test_rejects_single_point(self):
        with pytest.raises(DataShapeError):
            TimeGrid(np.array([0.0]))

    def test_nonuniform_allowed(self):
        grid = TimeGrid(np.array([0.0, 0.1, 0.3, 0.35]))
        assert not grid.is_uniform
        assert np.all(grid.deltas > 0)


class TestTrajectorySet:
    def test_shape_validation(self):
        grid = TimeGrid.uniform(0, 1, 3)
        with pytest.raises(DataShapeError):
            TrajectorySet(np.zeros((2, 4, 2)), grid)

    def test_rejects_nonfinite(self):
        grid = TimeGrid.uniform(0, 1, 3)
        data = np.zeros((1, 3, 2))
        data[0, 1, 0] = np.nan
        with pytest.raises(DataShapeError):
            TrajectorySet(data, grid)

    def test_select_and_head(self):
        grid = TimeGrid.uniform(0, 1, 5)
        data = np.arange(2 * 5 * 3, dtype=float).reshape(2, 5, 3)
        traj = TrajectorySet(data, grid)
        sub = traj.select([1]).head_steps(3)
        assert sub.data.shape == (1, 3, 3)
        assert np.array_equal(sub.data[0], data[1, :3])


class TestFhnRhs:
    def test_published_point(self):
        out = fhn_rhs(np.array([-1.0, 1.0]), a=0.5, b=0.2, c=3.0)
        assert np.allclose(out, [1.0, 1.3 / 3.0], atol=1e-12)

    def test_origin_fixed_point_without_offset(self):
        assert np.allclose(fhn_rhs(np.zeros(2), a=0.0, b=0.0, c=1.0), 0.0)

    def test_origin_with_offset(self):
        out = fhn_rhs(np.zeros(2), a=0.5, b=0.2, c=3.0)
        assert np.allclose(out, [0.0, 0.5 / 3.0], atol=1e-12)

    def test_batched_matches_single(self):
        pts = np.array([[-1.0, 1.0], [0.5, -0.25]])
        batched = fhn_rhs(pts)
        for row, point in zip(batched, pts):
            assert np.allclose(row, fhn_rhs(point))

    def test_nonfinite_state_rejected(self):
        with pytest.raises(InvalidStateError):
            fhn_rhs(np.array([np.inf, 0.0]))


class TestMassSpringRhs:
    def test_equilibrium(self):
        out = mass_spring_rhs(np.zeros(6), double_well)
        assert np.allclose(out, 0.0)

    def test_single_displacement(self):
        state = np.array([1.0, 0, 0, 0, 0, 0])
        out = mass_spring_rhs(state, double_well)
        assert np.allclose(out[:3], 0.0)
        assert np.allclose(out[3:], [30.0, -15.0, -15.0])

    def test_momentum_conservation(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            state = rng.normal(size=8)
            accel = mass_spring_rhs(state, double_well)[4:]
            assert abs(accel.sum()) < 1e-10 * (1 + np.abs(accel).sum())

    def test_system_dataclass_matches_function(self):
        sys = MassSpringRing(num_masses=3)
        state = np.array([0.3, -0.1, 0.2, 0.05, 0.0, -0.4])
        assert np.allclose(sys.rhs(state), mass_spring_rhs(state, double_well))


class TestIntegrate:
    def test_single_euler_step(self):
        grid = TimeGrid(np.array([0.0, 0.1]))
        traj = integrate(lambda x: x, np.array([1.0]), grid, scheme="euler")
        assert traj.data.shape == (1, 2, 1)
        assert traj.data[0, 1, 0] == pytest.approx(1.1, abs=0.0)

    def test_rk4_exponential_accuracy(self):
        grid = TimeGrid.uniform(0.0, 1.0, 11)
        traj = integrate(lambda x: x, np.array([1.0]), grid, scheme="rk4")
        assert abs(traj.data[0, -1, 0] - np.e) <= 1e-5

    def test_fhn_trajectory_shape(self):
        grid = TimeGrid.uniform(0.0, 20.0, 401)
        traj = integrate(fhn_rhs, np.array([-1.0, 1.0]), grid, scheme="rk4")
        assert traj.data.shape == (1, 401, 2)
        assert np.all(np.isfinite(traj.data))

    def test_euler_satisfies_update_exactly(self):
        grid = TimeGrid.uniform(0.0, 1.0, 21)
        traj = integrate(fhn_rhs, np.array([-1.0, 1.0]), grid, scheme="euler")
        x = traj.data[0]
        for i, dt in enumerate(grid.deltas):
            step = x[i] + dt * fhn_rhs(x[i])
            assert np.array_equal(step, x[i + 1])

    def test_rk4_convergence_order(self):
        x0 = np.array([-1.0, 1.0])
        ref = integrate(fhn_rhs, x0, TimeGrid.uniform(0, 2, 21), "rk4_fine", substeps=200)
        coarse = integrate(fhn_rhs, x0, TimeGrid.uniform(0, 2, 21), "rk4")
        fine = integrate(fhn_rhs, x0, TimeGrid.uniform(0, 2, 41), "rk4")
        err_coarse = np.max(np.abs(coarse.data[0, -1] - ref.data[0, -1]))
        err_fine = np.max(np.abs(fine.data[0, -1] - ref.data[0, -1]))
        order = np.log2(err_coarse / err_fine)
        assert 3.5 <= order <= 4.5

    def test_divergence_reports_step(self):
        grid = TimeGrid.uniform(0.0, 5.0, 51)
        with pytest.raises(DivergenceError) as info:
            integrate(lambda x: x**3, np.array([2.0]), grid, scheme="euler")
        assert info.value.step is not None
        assert info.value.trajectory == 0

    def test_batch_matches_loop(self):
        grid = TimeGrid.uniform(0, 1, 11)
        inits = np.array([[-1.0, 1.0], [0.5, 0.5]])
        batch = integrate_batch(fhn_rhs, inits, grid, scheme="rk4")
        for j, x0 in enumerate(inits):
            single = integrate(fhn_rhs, x0, grid, scheme="rk4")
            assert np.array_equal(batch.data[j], single.data[0])


class TestAddNoise:
    def _clean(self, n=8, t=30):
        grid = TimeGrid.uniform(0, 3, t)
        inits = uniform_initial_conditions([(-2, 2), (-2, 2)], n, seed=1)
        return integrate_batch(fhn_rhs, inits, grid, scheme="rk4")

    def test_zero_percent_is_identity(self):
        clean = self._clean()
        noisy = add_noise(clean, NoiseSpec(percent=0, seed=5))
        assert np.array_equal(noisy.data, clean.data)

    def test_seeded_determinism(self):
        clean = self._clean()
        a = add_noise(clean, NoiseSpec(percent=5, seed=42))
        b = add_noise(clean, NoiseSpec(percent=5, seed=42))
        assert np.array_equal(a.data, b.data)
        c = add_noise(clean, NoiseSpec(percent=5, seed=43))
        assert not np.array_equal(a.data, c.data)

    def test_noise_scale_matches_percent(self):
        # 400 x 401 x 2 sample: per-component std of (Y - X) within 5% of 10% of std(X_k)
        grid = TimeGrid.uniform(0.0, 20.0, 401)
        inits = grid_initial_conditions([(-4, 4), (-4, 4)], (20, 20))
        clean = integrate_batch(fhn_rhs, inits, grid, scheme="rk4")
        noisy = add_noise(clean, NoiseSpec(percent=10, seed=0))
        eps = noisy.data - clean.data
        target = 0.1 * clean.data.std(axis=(0, 1))
        measured = eps.std(axis=(0, 1))
        assert np.all(np.abs(measured - target) <= 0.05 * target)

    def test_per_trajectory_substreams(self):
        # Noise at position j depends only on (seed, j): editing other
        # trajectories' clean data must not change trajectory j's draws.
        clean = self._clean(n=6)
        noisy = add_noise(clean, NoiseSpec(percent=5, seed=9))
        altered = clean.copy()
        altered.data[0] += 10.0  # changes sigma too, so compare unit draws
        renoised = add_noise(TrajectorySet(altered.data, clean.grid), NoiseSpec(percent=5, seed=9))
        sigma_a = (noisy.data - clean.data)[3]
        sigma_b = (renoised.data - altered.data)[3]
        ratio = sigma_a / sigma_b
        for k in range(ratio.shape[1]):
            assert np.allclose(ratio[:, k], ratio[0, k])


class TestGenerateDataset:
    def test_fhn_grid_count(self):
        grid = TimeGrid.uniform(0.0, 0.25, 6)
        inits = grid_initial_conditions([(-4, 4), (-4, 4)], (20, 20))
        clean, noisy = generate_dataset(
            FitzHughNagumo(), inits, grid, NoiseSpec(percent=1, seed=0), scheme="rk4"
        )
        assert clean.data.shape == (400, 6, 2)
        assert noisy.data.shape == (400, 6, 2)

    def test_zero_noise_twin(self):
        grid = TimeGrid.uniform(0.0, 1.0, 5)
        clean, noisy = generate_dataset(
            FitzHughNagumo(), [[-1.0, 1.0]], grid, NoiseSpec(percent=0, seed=0), scheme="rk4"
        )
        assert np.array_equal(clean.data, noisy.data)

    def test_mass_spring_shapes(self):
        grid = TimeGrid.uniform(0.0, 0.5, 11)
        inits = uniform_initial_conditions([(-0.5, 0.5)] * 6, 10, seed=2)
        clean, noisy = generate_dataset(
            MassSpringRing(), inits, grid, NoiseSpec(percent=10, seed=1),
            scheme="rk4_fine", substeps=10,
        )
        assert clean.data.shape == (10, 11, 6)

    def test_dimension_mismatch(self):
        grid = TimeGrid.uniform(0, 1, 4)
        with pytest.raises(DataShapeError):
            generate_dataset(FitzHughNagumo(), [[0.0, 0.0, 0.0]], grid, NoiseSpec(0))


class TestReshapeTrajectory:
    def _series(self, t, d=2):
        grid = TimeGrid.uniform(0.0, 1.0 * (t - 1), t)
        data = np.arange(t * d, dtype=float).reshape(1, t, d)
        return TrajectorySet(data, grid)

    def test_partition_roundtrip(self):
        traj = self._series(6)
        out = reshape_trajectory(traj, 3)
        assert out.data.shape == (2, 3, 2)
        assert np.array_equal(out.data.reshape(1, 6, 2), traj.data)

    def test_long_series_counts(self):
        traj = self._series(360000, d=1)
        out = reshape_trajectory(traj, 100)
        assert out.num_trajectories == 3600
        assert out.num_steps == 100

    def test_indivisible_length(self):
        with pytest.raises(DataShapeError):
            reshape_trajectory(self._series(7), 3)

    def test_nonuniform_grid_rejected(self):
        grid = TimeGrid(np.array([0.0, 1.0, 3.0, 4.0]))
        traj = TrajectorySet(np.zeros((1, 4, 1)), grid)
        with pytest.raises(NonUniformGridError):
            reshape_trajectory(traj, 2)

    def test_multi_trajectory_rejected(self):
        grid = TimeGrid.uniform(0, 1, 4)
        with pytest.raises(DataShapeError):
            reshape_trajectory(TrajectorySet(np.zeros((2, 4, 1)), grid), 2)
