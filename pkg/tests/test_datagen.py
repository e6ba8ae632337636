"""Field sampling, forward solvers, measurement extraction, and dataset round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invop import datagen as dg
from invop import physics


class TestGrf:
    def test_zero_variance_gives_zero_field(self):
        cfg = dg.GrfConfig(length_scale=0.2, variance=0.0)
        field = dg.grf_sample(cfg, dg.line_grid(20), seed=5)
        assert np.all(field == 0.0)

    def test_same_seed_identical(self):
        cfg = dg.GrfConfig(length_scale=0.2)
        a = dg.grf_sample(cfg, dg.rectangle_grid(12), seed=9)
        b = dg.grf_sample(cfg, dg.rectangle_grid(12), seed=9)
        assert np.array_equal(a, b)

    def test_covariance_against_kernel_monte_carlo(self):
        # 2000 seeded draws; five pairs at separations 0..~l, all with kernel
        # values far from zero so the 10% relative budget is ~3 sigma.
        cfg = dg.GrfConfig(length_scale=0.15)
        grid = dg.line_grid(30)
        draws = np.stack([dg.grf_sample(cfg, grid, seed=s) for s in range(2000)])
        x = grid.nodes(0)
        for i, j in [(8, 8), (8, 9), (8, 10), (8, 11), (8, 12)]:
            emp = float((draws[:, i] * draws[:, j]).mean())
            kern = float(cfg.kernel_value(abs(x[i] - x[j])))
            assert abs(emp - kern) / kern < 0.10

    def test_grid_too_large_rejected(self):
        with pytest.raises(ValueError, match="2500"):
            dg.grf_sample(dg.GrfConfig(length_scale=0.2), dg.rectangle_grid(60))

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            dg.GrfConfig(length_scale=0.0)
        with pytest.raises(ValueError):
            dg.GrfConfig(length_scale=0.1, jitter=-1.0)


class TestReactionDiffusionSolver:
    def test_zero_forcing_stays_zero(self):
        grid = dg.space_time_grid(30, 30)
        u = dg.solve_reaction_diffusion(grid, np.zeros(30), np.zeros(30),
                                        lambda t: np.ones_like(np.asarray(t)))
        assert np.all(u == 0.0)

    def test_manufactured_solution_and_convergence(self):
        # u = e^-t sin(pi x), f = (pi^2 - 1) sin(pi x), g = e^-t solves
        # du/dt - Lap(u) = f g with u0 = sin(pi x).
        def solve(n):
            grid = dg.space_time_grid(n, n)
            x, t = grid.nodes(1), grid.nodes(0)
            f = (np.pi**2 - 1) * np.sin(np.pi * x)
            u = dg.solve_reaction_diffusion(grid, np.sin(np.pi * x), f,
                                            lambda tt: np.exp(-np.asarray(tt)))
            exact = np.exp(-t)[:, None] * np.sin(np.pi * x)[None, :]
            return np.abs(u - exact).max()

        err30, err59 = solve(30), solve(59)
        assert err30 < 5e-3
        assert 3.0 < err30 / err59 < 5.0

    def test_steady_state_preserved(self):
        # f = sin(pi x), g = 1, u0 = f / pi^2 is the equilibrium of du/dt = Lap(u) + f.
        grid = dg.space_time_grid(30, 30)
        x = grid.nodes(1)
        f = np.sin(np.pi * x)
        u = dg.solve_reaction_diffusion(grid, f / np.pi**2, f,
                                        lambda t: np.ones_like(np.asarray(t)))
        drift = np.abs(u - u[0][None, :]).max()
        assert drift < 2e-4  # spatial-discretization equilibrium offset only

    def test_endpoints_clamped(self):
        grid = dg.space_time_grid(10, 12)
        u0 = np.ones(12)
        u = dg.solve_reaction_diffusion(grid, u0, np.zeros(12),
                                        lambda t: np.ones_like(np.asarray(t)))
        assert u[0, 0] == 0.0 and u[0, -1] == 0.0


class TestHelmholtzSolver:
    def test_constant_solution(self):
        grid = dg.rectangle_grid(50)
        u = dg.solve_helmholtz(grid, np.ones((50, 50)))
        assert np.abs(u - 1.0).max() < 1e-9

    def test_manufactured_solution_and_convergence(self):
        def solve(n):
            grid = dg.rectangle_grid(n)
            v = grid.nodes(0)
            yy, xx = np.meshgrid(v, v, indexing="ij")
            f = (2 * np.pi**2 + 1) * np.cos(np.pi * xx) * np.cos(np.pi * yy)
            u = dg.solve_helmholtz(grid, f)
            return np.abs(u - np.cos(np.pi * xx) * np.cos(np.pi * yy)).max()

        err50, err99 = solve(50), solve(99)
        assert err50 < 2e-3
        assert 3.0 < err50 / err99 < 5.0

    def test_linearity(self):
        grid = dg.rectangle_grid(30)
        rng = np.random.default_rng(0)
        f1, f2 = rng.normal(size=(30, 30)), rng.normal(size=(30, 30))
        u12 = dg.solve_helmholtz(grid, f1 + f2)
        u1, u2 = dg.solve_helmholtz(grid, f1), dg.solve_helmholtz(grid, f2)
        assert np.abs(u12 - (u1 + u2)).max() < 1e-9


class TestDarcySolver:
    @staticmethod
    def _sine_source(x, y):
        return 2 * np.pi**2 * np.sin(np.pi * x) * np.sin(np.pi * y)

    def test_manufactured_solution_and_convergence(self):
        def solve(n):
            grid = dg.rectangle_grid(n)
            v = grid.nodes(0)
            yy, xx = np.meshgrid(v, v, indexing="ij")
            u = dg.solve_darcy(grid, np.ones((n, n)), self._sine_source)
            return np.abs(u - np.sin(np.pi * xx) * np.sin(np.pi * yy)).max()

        err100, err199 = solve(100), solve(199)
        assert err100 < 1e-3
        assert 3.0 < err100 / err199 < 5.0

    def test_homogeneity_in_sigma(self):
        # Scaling sigma by c scales u by 1/c for the fixed polynomial source.
        grid = dg.rectangle_grid(40)
        rng = np.random.default_rng(1)
        sigma = 0.2 + np.abs(rng.normal(size=(40, 40)))
        u1 = dg.solve_darcy(grid, sigma)
        u3 = dg.solve_darcy(grid, 3.0 * sigma)
        assert np.abs(u3 - u1 / 3.0).max() < 1e-10

    def test_matches_dense_direct_solve(self):
        # Independent oracle: dense LU on the same 30x30 system.
        n = 30
        grid = dg.rectangle_grid(n)
        sigma = np.ones((n, n))
        u = dg.solve_darcy(grid, sigma)
        prob = physics.darcy_problem()
        A = dg._darcy_system(sigma, grid.spacing(0)).toarray()
        v = grid.nodes(0)
        yy, xx = np.meshgrid(v, v, indexing="ij")
        b = prob.source(xx, yy)[1:-1, 1:-1].ravel()
        u_dense = np.zeros((n, n))
        u_dense[1:-1, 1:-1] = np.linalg.solve(A, b).reshape(n - 2, n - 2)
        assert np.abs(u - u_dense).max() < 1e-8

    def test_nonpositive_sigma_rejected(self):
        grid = dg.rectangle_grid(10)
        sigma = np.ones((10, 10))
        sigma[3, 3] = 0.0
        with pytest.raises(ValueError, match="positive"):
            dg.solve_darcy(grid, sigma)

    def test_downsample_striding(self):
        field = np.arange(117 * 117, dtype=float).reshape(117, 117)
        coarse = dg.downsample_striding(field, 30)
        assert coarse.shape == (30, 30)
        assert coarse[0, 0] == field[0, 0] and coarse[-1, -1] == field[-1, -1]
        assert coarse[1, 2] == field[4, 8]
        with pytest.raises(ValueError, match="stride"):
            dg.downsample_striding(np.zeros((100, 100)), 30)


class TestMeasurementExtraction:
    def test_rd_zero_field(self):
        prob = physics.reaction_diffusion_problem()
        m = dg.extract_measurement(prob, np.zeros((30, 30)))
        assert m.shape == (60,) and np.all(m == 0.0)

    def test_rd_layout_initial_then_final(self):
        prob = physics.reaction_diffusion_problem()
        u = np.zeros((30, 30))
        u[0, :] = 1.0
        u[-1, :] = 2.0
        m = dg.extract_measurement(prob, u)
        assert np.all(m[:30] == 1.0) and np.all(m[30:] == 2.0)

    def test_helmholtz_centered_block_indices(self):
        prob = physics.helmholtz_problem()
        assert prob.measurement_index() == (5, 45)
        u = np.zeros((50, 50))
        u[5:45, 5:45] = 7.0
        m = dg.extract_measurement(prob, u)
        assert m.shape == (1600,) and np.all(m == 7.0)

    def test_darcy_roundtrip_identity(self):
        prob = physics.darcy_problem()
        u = np.random.default_rng(0).normal(size=(30, 30))
        m = dg.extract_measurement(prob, u)
        assert np.array_equal(m.reshape(30, 30), u)


class TestMinMaxScale:
    def test_hits_endpoints_exactly(self):
        field = np.random.default_rng(0).normal(size=(9, 9))
        out = dg.min_max_scale(field, 0.05, 1.0)
        assert out.min() == 0.05 and out.max() == 1.0

    def test_fixed_point_when_already_spanning(self):
        field = np.linspace(0.05, 1.0, 50)
        out = dg.min_max_scale(field, 0.05, 1.0)
        assert np.abs(out - field).max() <= 1e-15

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, seed):
        field = np.random.default_rng(seed).normal(size=25)
        once = dg.min_max_scale(field)
        twice = dg.min_max_scale(once)
        assert np.abs(once - twice).max() <= 1e-12

    def test_constant_field_rejected(self):
        with pytest.raises(dg.ConstantFieldError):
            dg.min_max_scale(np.full(10, 3.3))


class TestDataset:
    def test_roundtrip_bit_exact(self, tmp_path):
        prob = physics.reaction_diffusion_problem()
        ds = dg.generate_dataset(prob, 5, master_seed=11)
        dg.save_dataset(ds, tmp_path / "d")
        back = dg.load_dataset(tmp_path / "d")
        for name in ds.arrays:
            assert np.array_equal(ds.arrays[name], back.arrays[name])
        assert back.n == 5
        assert ds.fingerprint() == back.fingerprint()

    def test_manifest_n_matches_records(self, tmp_path):
        prob = physics.reaction_diffusion_problem()
        ds = dg.generate_dataset(prob, 3, master_seed=2)
        path = dg.save_dataset(ds, tmp_path / "d")
        import json
        manifest = json.loads((path / "manifest.json").read_text())
        assert manifest["n"] == 3 == ds.u_fields.shape[0]

    def test_truncated_binary_raises_corruption(self, tmp_path):
        prob = physics.reaction_diffusion_problem()
        ds = dg.generate_dataset(prob, 3, master_seed=2)
        path = dg.save_dataset(ds, tmp_path / "d")
        target = path / "u.f64"
        target.write_bytes(target.read_bytes()[:-16])
        with pytest.raises(dg.DatasetCorruptionError, match="bytes"):
            dg.load_dataset(path)

    def test_parallel_generation_bit_identical(self):
        prob = physics.reaction_diffusion_problem()
        a = dg.generate_dataset(prob, 6, master_seed=4, threads=1)
        b = dg.generate_dataset(prob, 6, master_seed=4, threads=2)
        for name in a.arrays:
            assert np.array_equal(a.arrays[name], b.arrays[name])

    def test_rd_dataset_algebraic_residual(self):
        prob = physics.reaction_diffusion_problem()
        ds = dg.generate_dataset(prob, 2, master_seed=1)
        for i in range(2):
            assert dg.rd_step_residual(prob, ds.u_fields[i], ds.s_fields[i]) < 1e-9

    def test_darcy_sigma_within_range(self):
        prob = physics.darcy_problem()
        ds = dg.generate_dataset(prob, 2, master_seed=6)
        assert ds.s_fields.min() >= 0.05 - 1e-12
        assert ds.s_fields.max() <= 1.0 + 1e-12
        assert np.isfinite(ds.u_fields).all()

    def test_measurement_width_matches_problem(self):
        for prob, width in ((physics.reaction_diffusion_problem(), 60),
                            (physics.helmholtz_problem(), 1600)):
            ds = dg.generate_dataset(prob, 1, master_seed=0)
            assert ds.measurements.shape == (1, width)
            assert prob.measurement_width == width
